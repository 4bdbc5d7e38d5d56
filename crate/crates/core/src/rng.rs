//! Seeded random streams.
//!
//! Every stream is a xoshiro256++ generator whose 256-bit state is filled by
//! SplitMix64 from a single 64-bit key (`Xoshiro256PlusPlus::seed_from_u64`).
//! Keys for sub-streams are derived with one SplitMix64 finalizer round over
//! `seed ^ (stream * GOLDEN)`, so `(seed, stream)` pairs map to independent,
//! reproducible sequences. Standard normals come from `rand_distr::StandardNormal`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type StreamRng = Xoshiro256PlusPlus;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named sub-streams used by the experiment runners.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Model = 1,
    CleanSample = 2,
    RandomScale = 3,
    InitialNoise = 4,
    Perturbation = 5,
    Measurement = 6,
    Instance = 7,
}

pub fn stream_key(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ stream.wrapping_mul(GOLDEN))
}

pub fn stream(seed: u64, stream: Stream) -> StreamRng {
    StreamRng::seed_from_u64(stream_key(seed, stream as u64))
}

pub fn keyed(seed: u64, key: u64) -> StreamRng {
    StreamRng::seed_from_u64(stream_key(seed, key))
}

pub fn normal_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> DVector<f64> {
    loop {
        let v = normal_vector(rng, dim);
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

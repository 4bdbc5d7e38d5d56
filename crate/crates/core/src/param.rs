//! Noise, score and velocity parameterizations of the denoiser output.
//!
//! Each space is an affine image `psi = a_t eps + b_t` of the noise prediction, with
//! `sigma_t = sqrt(1 - ab_t)`:
//!
//! | space    | `a_t`         | `b_t`             |
//! |----------|---------------|-------------------|
//! | noise    | 1             | 0                 |
//! | score    | `-1 / sigma_t`| 0                 |
//! | velocity | `sqrt(ab_t)`  | `-sigma_t * x_t`  |
//!
//! Because the CFG weights sum to one, `b_t` cancels and fixed-scale guidance yields the
//! same noise prediction in every space. The POLARIS scale is a ratio of squared norms
//! and does change with the metric.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::guidance::{polaris_robust_scale, PredictionDelta, ScalePolicy};
use crate::oracle::{Condition, NoisePredictor, PredictionPair};
use crate::pipeline::{guided_walk, Direction, LatentState, Trajectory};
use crate::schedule::{NoiseSchedule, TimestepMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldSpace {
    Noise,
    Score,
    Velocity,
}

impl FieldSpace {
    pub const ALL: [FieldSpace; 3] = [FieldSpace::Noise, FieldSpace::Score, FieldSpace::Velocity];

    pub fn name(self) -> &'static str {
        match self {
            FieldSpace::Noise => "noise",
            FieldSpace::Score => "score",
            FieldSpace::Velocity => "velocity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }

    fn sigma(alpha_bar: f64) -> Result<f64> {
        let sigma = (1.0 - alpha_bar).sqrt();
        if sigma > 0.0 && alpha_bar > 0.0 {
            Ok(sigma)
        } else {
            Err(Error::DegenerateTimestep { alpha_bar })
        }
    }

    /// `a_t` for this space.
    pub fn scale(self, alpha_bar: f64) -> Result<f64> {
        let sigma = Self::sigma(alpha_bar)?;
        Ok(match self {
            FieldSpace::Noise => 1.0,
            FieldSpace::Score => -1.0 / sigma,
            FieldSpace::Velocity => alpha_bar.sqrt(),
        })
    }

    pub fn to_space(self, eps: &DVector<f64>, x: &DVector<f64>, alpha_bar: f64) -> Result<DVector<f64>> {
        let sigma = Self::sigma(alpha_bar)?;
        Ok(match self {
            FieldSpace::Noise => eps.clone(),
            FieldSpace::Score => eps * (-1.0 / sigma),
            FieldSpace::Velocity => eps * alpha_bar.sqrt() - x * sigma,
        })
    }

    pub fn from_space(self, psi: &DVector<f64>, x: &DVector<f64>, alpha_bar: f64) -> Result<DVector<f64>> {
        let sigma = Self::sigma(alpha_bar)?;
        Ok(match self {
            FieldSpace::Noise => psi.clone(),
            FieldSpace::Score => psi * -sigma,
            FieldSpace::Velocity => (psi + x * sigma) / alpha_bar.sqrt(),
        })
    }

    pub fn pair_to_space(self, pair: &PredictionPair, x: &DVector<f64>, alpha_bar: f64) -> Result<PredictionPair> {
        Ok(PredictionPair {
            eps_uncond: self.to_space(&pair.eps_uncond, x, alpha_bar)?,
            eps_cond: self.to_space(&pair.eps_cond, x, alpha_bar)?,
            t: pair.t,
        })
    }
}

/// POLARIS scale from field-space deltas; same contract as [`polaris_robust_scale`].
pub fn unified_polaris_scale(d_psi_uncond: &DVector<f64>, d_psi_cond: &DVector<f64>, guard: f64) -> Result<f64> {
    let delta = PredictionDelta::new(d_psi_uncond.clone(), d_psi_cond.clone())?;
    Ok(polaris_robust_scale(&delta, guard))
}

/// Inversion followed by reverse-order replay sampling, with guidance applied in `space`.
#[allow(clippy::too_many_arguments)]
pub fn roundtrip_in_space<P: NoisePredictor + ?Sized>(
    model: &P,
    x0: &DVector<f64>,
    cond: &Condition,
    policy: &ScalePolicy,
    space: FieldSpace,
    schedule: &NoiseSchedule,
    map: &TimestepMap,
) -> Result<(Trajectory, Trajectory)> {
    let start = LatentState::new(x0.clone(), 0);
    let inv = guided_walk(&start, model, cond, policy, space, Direction::Invert, schedule, map)?;
    let replay = ScalePolicy::Replay {
        schedule: inv.omegas.clone(),
        order: crate::guidance::ReplayOrder::Reverse,
    };
    let samp = guided_walk(
        inv.last(),
        model,
        cond,
        &replay,
        space,
        Direction::Denoise,
        schedule,
        map,
    )?;
    Ok((inv, samp))
}

fn relative_gap(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

fn visited(inv: &Trajectory, samp: &Trajectory) -> Vec<DVector<f64>> {
    inv.states.iter().chain(&samp.states).map(|s| s.x.clone()).collect()
}

/// Max relative state gap, over all visited states and space pairs, between fixed-`omega`
/// round trips guided in the noise, score and velocity spaces.
pub fn check_fixed_scale_invariance<P: NoisePredictor + ?Sized>(
    model: &P,
    x0: &DVector<f64>,
    cond: &Condition,
    omega: f64,
    schedule: &NoiseSchedule,
    map: &TimestepMap,
) -> Result<f64> {
    let policy = ScalePolicy::Fixed(omega);
    let runs = FieldSpace::ALL
        .into_iter()
        .map(|space| {
            let (inv, samp) = roundtrip_in_space(model, x0, cond, &policy, space, schedule, map)?;
            if inv.diverged || samp.diverged {
                return Err(Error::Divergence(format!("fixed-scale run in {} space", space.name())));
            }
            Ok(visited(&inv, &samp))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut worst = 0.0f64;
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            for (a, b) in runs[i].iter().zip(&runs[j]) {
                worst = worst.max(relative_gap(a, b));
            }
        }
    }
    Ok(worst)
}

/// Per-space POLARIS round trip compared against the noise-space run.
#[derive(Debug, Clone)]
pub struct SpaceComparison {
    pub space: FieldSpace,
    /// Inversion-recorded scales.
    pub omegas: Vec<f64>,
    /// Relative gap to the noise-space state after each inversion step.
    pub deviations: Vec<f64>,
    pub reconstruction: DVector<f64>,
}

pub fn compare_polaris_spaces<P: NoisePredictor + ?Sized>(
    model: &P,
    x0: &DVector<f64>,
    cond: &Condition,
    policy: &ScalePolicy,
    schedule: &NoiseSchedule,
    map: &TimestepMap,
) -> Result<Vec<SpaceComparison>> {
    let runs = FieldSpace::ALL
        .into_iter()
        .map(|space| {
            Ok((
                space,
                roundtrip_in_space(model, x0, cond, policy, space, schedule, map)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let reference = &runs[0].1 .0;
    Ok(runs
        .iter()
        .map(|(space, (inv, samp))| SpaceComparison {
            space: *space,
            omegas: inv.omegas.omegas().to_vec(),
            deviations: inv
                .states
                .iter()
                .skip(1)
                .zip(reference.states.iter().skip(1))
                .map(|(a, b)| relative_gap(&a.x, &b.x))
                .collect(),
            reconstruction: samp.last().x.clone(),
        })
        .collect())
}

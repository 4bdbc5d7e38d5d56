//! MSE, PSNR and SSIM over vectors and small grids.

use crate::error::{Error, Result};

pub const MAX_PIXEL: f64 = 255.0;
/// Reported in place of an infinite PSNR.
pub const PSNR_CAP_DB: f64 = 200.0;
pub const SSIM_WINDOW: usize = 7;
const C1: f64 = (0.01 * MAX_PIXEL) * (0.01 * MAX_PIXEL);
const C2: f64 = (0.03 * MAX_PIXEL) * (0.03 * MAX_PIXEL);

/// Row-major grid of intensities in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridImage {
    pixels: Vec<f64>,
    height: usize,
    width: usize,
}

impl GridImage {
    /// Values outside `[0, 255]` are clamped.
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: height * width,
                got: pixels.len(),
            });
        }
        let pixels = pixels.into_iter().map(|p| p.clamp(0.0, MAX_PIXEL)).collect();
        Ok(Self { pixels, height, width })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("size matches")
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::Precondition("metrics need at least one element".into()));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(max^2 / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64, max: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max * max / mse).log10()).min(PSNR_CAP_DB)
}

/// PSNR on the 8-bit domain.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, MAX_PIXEL))
}

/// PSNR of an estimate against a latent ground truth, with peak = max |truth|.
pub fn latent_psnr(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    let peak = truth.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(psnr_from_mse(mse(truth, estimate)?, peak))
}

/// Mean SSIM over all 7x7 windows at stride 1.
pub fn ssim(a: &GridImage, b: &GridImage) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::DimensionMismatch {
            expected: a.pixels.len(),
            got: b.pixels.len(),
        });
    }
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::Precondition(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.height, a.width
        )));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=a.height - SSIM_WINDOW {
        for c0 in 0..=a.width - SSIM_WINDOW {
            let cells = || (r0..r0 + SSIM_WINDOW).flat_map(move |r| (c0..c0 + SSIM_WINDOW).map(move |c| (r, c)));
            let (sa, sb) = cells().fold((0.0, 0.0), |(x, y), (r, c)| (x + a.at(r, c), y + b.at(r, c)));
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for (r, c) in cells() {
                let (da, db) = (a.at(r, c) - ma, b.at(r, c) - mb);
                va += da * da;
                vb += db * db;
                cov += da * db;
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM of a flattened `channels x height x width` estimate against its ground truth.
///
/// Both are mapped affinely to `[0, 255]` using the truth's min and max, clamped, and the
/// per-channel SSIM values averaged.
pub fn latent_ssim(truth: &[f64], estimate: &[f64], shape: (usize, usize, usize)) -> Result<f64> {
    same_len(truth, estimate)?;
    let (ch, h, w) = shape;
    if ch * h * w != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: ch * h * w,
            got: truth.len(),
        });
    }
    let lo = truth.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = truth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let to_grid = |v: &[f64]| GridImage::new(h, w, v.iter().map(|x| (x - lo) / span * MAX_PIXEL).collect());
    let mut acc = 0.0;
    for c in 0..ch {
        let range = c * h * w..(c + 1) * h * w;
        acc += ssim(&to_grid(&truth[range.clone()])?, &to_grid(&estimate[range])?)?;
    }
    Ok(acc / ch as f64)
}

/// One reconstruction-quality row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quality {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl Quality {
    pub fn latent(truth: &[f64], estimate: &[f64], shape: (usize, usize, usize)) -> Result<Self> {
        Ok(Self {
            mse: mse(truth, estimate)?,
            psnr: latent_psnr(truth, estimate)?,
            ssim: latent_ssim(truth, estimate, shape)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        let z = vec![0.0; 64];
        let f = vec![255.0; 64];
        assert_eq!(mse(&z, &z).unwrap(), 0.0);
        assert_eq!(mse(&z, &f).unwrap(), 65025.0);
        assert!(mse(&z, &f[..3]).is_err());
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr_from_mse(65025.0, MAX_PIXEL), 0.0);
        assert!((psnr_from_mse(650.25, MAX_PIXEL) - 20.0).abs() < 1e-12);
        let a = vec![3.0; 10];
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = GridImage::new(9, 8, (0..72).map(|i| (i * 37 % 256) as f64).collect()).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let (x, y) = (40.0, 200.0);
        let expected = (2.0 * x * y + C1) / (x * x + y * y + C1);
        let got = ssim(&GridImage::filled(8, 8, x), &GridImage::filled(8, 8, y)).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!(ssim(&GridImage::filled(6, 8, 0.0), &GridImage::filled(6, 8, 0.0)).is_err());
    }

    #[test]
    fn grid_values_are_clamped() {
        let g = GridImage::new(1, 3, vec![-5.0, 100.0, 300.0]).unwrap();
        assert_eq!(g.pixels(), &[0.0, 100.0, 255.0]);
    }

    #[test]
    fn latent_metrics() {
        let truth: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let q = Quality::latent(&truth, &truth, (1, 8, 8)).unwrap();
        assert_eq!(
            q,
            Quality {
                mse: 0.0,
                psnr: PSNR_CAP_DB,
                ssim: 1.0
            }
        );
        let est: Vec<f64> = truth.iter().map(|v| v + 0.1).collect();
        let q = Quality::latent(&truth, &est, (1, 8, 8)).unwrap();
        let peak = truth.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((q.psnr - 10.0 * (peak * peak / 0.01).log10()).abs() < 1e-9);
        assert!(q.ssim < 1.0);
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_bounded(
            a in proptest::collection::vec(0.0f64..255.0, 100),
            b in proptest::collection::vec(0.0f64..255.0, 100),
        ) {
            let (ga, gb) = (GridImage::new(10, 10, a).unwrap(), GridImage::new(10, 10, b).unwrap());
            let s = ssim(&ga, &gb).unwrap();
            prop_assert!((s - ssim(&gb, &ga).unwrap()).abs() < 1e-15);
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn mse_permutation_invariant(a in proptest::collection::vec(-5.0f64..5.0, 2..50), seed in 0u64..1000) {
            let b: Vec<f64> = a.iter().map(|v| v * 0.5 + 1.0).collect();
            let mut idx: Vec<usize> = (0..a.len()).collect();
            idx.rotate_left((seed as usize) % a.len());
            let pa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
            let pb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
            let (m, pm) = (mse(&a, &b).unwrap(), mse(&pa, &pb).unwrap());
            prop_assert!((m - pm).abs() <= 1e-12 * m.max(1e-300));
        }

        #[test]
        fn psnr_decreases_with_mse(m1 in 1e-6f64..1e5, f in 1.0001f64..100.0) {
            prop_assert!(psnr_from_mse(m1 * f, 255.0) < psnr_from_mse(m1, 255.0));
        }
    }
}

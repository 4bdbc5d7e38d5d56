//! Perturbation studies of the exact and robust scale rules, and the magnitude-ratio trace.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::guidance::{polaris_exact_delta, polaris_robust_scale, tau_approx, ExactSolverState, PredictionDelta};
use crate::pipeline::Trajectory;
use crate::rng::{self, normal_vector, unit_vector, StreamRng};

/// Ratios above this (including the infinite one of a vanishing history term) are capped.
pub const RATIO_CAP: f64 = 1e12;

/// One point on the exact rule's path `b* = t u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationCase {
    pub a_true: DVector<f64>,
    pub u: DVector<f64>,
    pub delta_a: DVector<f64>,
    pub delta_b: DVector<f64>,
    pub b_scale: f64,
}

impl PerturbationCase {
    pub fn b_true(&self) -> DVector<f64> {
        &self.u * self.b_scale
    }

    /// `dw_obs - dw_true` with `dw = -a.b / |b|^2`.
    pub fn error(&self) -> Result<f64> {
        let b = self.b_true();
        let truth = polaris_exact_delta(&ExactSolverState::new(self.a_true.clone(), b.clone(), 0.0)?)?;
        let observed = polaris_exact_delta(&ExactSolverState::new(
            &self.a_true + &self.delta_a,
            b + &self.delta_b,
            0.0,
        )?)?;
        Ok(observed - truth)
    }
}

/// Random draw for an exact-rule sweep; perturbations are frozen across `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactTemplate {
    pub dim: usize,
    /// Standard deviation of the entries of `delta_a` and `delta_b`.
    pub noise: f64,
    /// Remove the component of `a*` along `u`.
    pub orthogonal: bool,
}

impl Default for ExactTemplate {
    fn default() -> Self {
        Self {
            dim: 16,
            noise: 0.1,
            orthogonal: false,
        }
    }
}

impl ExactTemplate {
    pub fn draw(&self, rng: &mut StreamRng) -> PerturbationCase {
        let u = unit_vector(rng, self.dim);
        let mut a_true = normal_vector(rng, self.dim);
        if self.orthogonal {
            a_true -= &u * a_true.dot(&u);
        }
        let delta_a = normal_vector(rng, self.dim) * self.noise;
        let delta_b = normal_vector(rng, self.dim) * self.noise;
        PerturbationCase {
            a_true,
            u,
            delta_a,
            delta_b,
            b_scale: 1.0,
        }
    }
}

fn check_positive(values: &[f64], key: &str) -> Result<()> {
    if values.iter().all(|&v| v.is_finite() && v > 0.0) {
        Ok(())
    } else {
        Err(Error::config(key, "all values must be finite and > 0"))
    }
}

/// `(t, |E|)` along `b* = t u` for one frozen perturbation draw.
pub fn exact_error_curve(template: &ExactTemplate, t_values: &[f64], seed: u64) -> Result<Vec<(f64, f64)>> {
    check_positive(t_values, "theorems.t_values")?;
    let base = template.draw(&mut rng::keyed(seed, 0x7431));
    t_values
        .iter()
        .map(|&t| {
            let case = PerturbationCase {
                b_scale: t,
                ..base.clone()
            };
            Ok((t, case.error()?.abs()))
        })
        .collect()
}

/// True prediction deltas with a guaranteed separation, plus frozen perturbation directions.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustCase {
    pub d_uncond: DVector<f64>,
    pub d_cond: DVector<f64>,
    pub dir_uncond: DVector<f64>,
    pub dir_cond: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustTemplate {
    pub dim: usize,
    /// Required lower bound on `|d_uncond - d_cond|`.
    pub eta: f64,
    /// Actual separation `|d_uncond - d_cond|` of the drawn case.
    pub separation: f64,
    /// Denominator guard of the rule under test.
    pub guard: f64,
}

impl Default for RobustTemplate {
    fn default() -> Self {
        Self {
            dim: 16,
            eta: 0.5,
            separation: 1.0,
            guard: 0.0,
        }
    }
}

impl RobustTemplate {
    /// Perturbation directions are scaled so that `|dd_uncond - dd_cond| <= noise`.
    pub fn draw(&self, rng: &mut StreamRng) -> RobustCase {
        let d_uncond = normal_vector(rng, self.dim);
        let gap = unit_vector(rng, self.dim) * self.separation;
        let d_cond = &d_uncond - gap;
        let dir_uncond = unit_vector(rng, self.dim) * 0.5;
        let dir_cond = unit_vector(rng, self.dim) * 0.5;
        RobustCase {
            d_uncond,
            d_cond,
            dir_uncond,
            dir_cond,
        }
    }
}

impl RobustCase {
    pub fn error(&self, noise: f64, guard: f64) -> f64 {
        let clean = PredictionDelta {
            d_uncond: self.d_uncond.clone(),
            d_cond: self.d_cond.clone(),
        };
        let noisy = PredictionDelta {
            d_uncond: &self.d_uncond + &self.dir_uncond * noise,
            d_cond: &self.d_cond + &self.dir_cond * noise,
        };
        polaris_robust_scale(&noisy, guard) - polaris_robust_scale(&clean, guard)
    }

    /// Norm of the stacked perturbation `(dd_uncond, dd_cond)` at `noise`.
    pub fn perturbation_norm(&self, noise: f64) -> f64 {
        noise * (self.dir_uncond.norm_squared() + self.dir_cond.norm_squared()).sqrt()
    }
}

/// `(|dd|, |E|)` for the robust rule at each noise scale.
pub fn robust_error_curve(template: &RobustTemplate, noise_scales: &[f64], seed: u64) -> Result<Vec<(f64, f64)>> {
    if !(template.eta > 0.0) || template.separation < template.eta {
        return Err(Error::Precondition(format!(
            "separation {} must be at least eta {} > 0",
            template.separation, template.eta
        )));
    }
    if let Some(s) = noise_scales.iter().find(|&&s| !(s >= 0.0 && s <= template.eta / 2.0)) {
        return Err(Error::Precondition(format!(
            "noise scale {s} outside [0, eta/2 = {}]",
            template.eta / 2.0
        )));
    }
    let case = template.draw(&mut rng::keyed(seed, 0x7432));
    Ok(noise_scales
        .iter()
        .map(|&s| (case.perturbation_norm(s), case.error(s, template.guard).abs()))
        .collect())
}

/// Robust-rule error at a fixed noise level as the true separation shrinks toward `eta`.
pub fn robust_error_vs_separation(
    template: &RobustTemplate,
    separations: &[f64],
    noise: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    separations
        .iter()
        .map(|&sep| {
            let t = RobustTemplate {
                separation: sep,
                ..*template
            };
            let curve = robust_error_curve(&t, &[noise], seed)?;
            Ok((sep, curve[0].1))
        })
        .collect()
}

/// OLS slope of `log10 y` against `log10 x` after dropping 10% of points from each end
/// (by `x`). Points with a non-positive coordinate are ignored.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.log10(), y.log10()))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let trim = pts.len() / 10;
    let pts = &pts[trim..pts.len() - trim];
    if pts.len() < 2 {
        return Err(Error::Precondition(
            "slope fit needs at least two positive points".into(),
        ));
    }
    let n = pts.len() as f64;
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Precondition("slope fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..n)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
                .collect()
        }
    }
}

/// Per-step magnitudes of the current-step term `a` and the history term `b dw`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagnitudeRow {
    pub step: usize,
    pub a_norm: f64,
    pub hist_norm: f64,
    /// `(|a| / |b dw|)^2`, capped at [`RATIO_CAP`].
    pub ratio2: f64,
}

/// Bookkeeping of the exact rule along a recorded trajectory: at step `k >= 1`,
/// `a = (1 - w_{k-1}) d_uncond + w_{k-1} d_cond`, `b` is the guidance direction at step
/// `k - 1`, and `dw = -a.b / |b|^2`.
pub fn magnitude_ratio_trace(traj: &Trajectory) -> Vec<MagnitudeRow> {
    let omegas = traj.omegas.omegas();
    (1..traj.preds.len())
        .map(|k| {
            let delta = PredictionDelta::between(&traj.preds[k], &traj.preds[k - 1]);
            let a = tau_approx(omegas[k - 1], &delta);
            let b = traj.preds[k - 1].guidance_direction();
            let nb = b.norm();
            let hist_norm = if nb > 0.0 { a.dot(&b).abs() / nb } else { 0.0 };
            let a_norm = a.norm();
            let ratio2 = if hist_norm > 0.0 {
                ((a_norm / hist_norm).powi(2)).min(RATIO_CAP)
            } else {
                RATIO_CAP
            };
            MagnitudeRow {
                step: k,
                a_norm,
                hist_norm,
                ratio2,
            }
        })
        .collect()
}

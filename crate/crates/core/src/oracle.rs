//! Closed-form noise predictors for Gaussian-mixture data.
//!
//! For clean data `x0 ~ sum_k w_k N(mu_k, Sigma_k)` and `x_t = sqrt(ab) x0 + sqrt(1 - ab) n`,
//! the marginal of `x_t` under component `k` is `N(sqrt(ab) mu_k, ab Sigma_k + (1 - ab) I)`.
//! The predictors return the exact posterior-mean noise
//! `eps*(x_t) = (x_t - sqrt(ab) E[x0 | x_t]) / sqrt(1 - ab)`.
//!
//! Each covariance is eigendecomposed once at construction so that every evaluation is
//! `O(K d^2)`: the marginal covariance shares the eigenvectors of `Sigma_k`.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, normal_vector};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Which mixture components a prediction is conditioned on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Condition {
    Unconditional,
    Component(usize),
    Subset(Vec<usize>),
}

impl Condition {
    fn indices(&self, n_components: usize) -> Result<Vec<usize>> {
        let idx = match self {
            Condition::Unconditional => (0..n_components).collect(),
            Condition::Component(i) => vec![*i],
            Condition::Subset(v) => v.clone(),
        };
        if idx.is_empty() {
            return Err(Error::Precondition("condition selects no components".into()));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n_components) {
            return Err(Error::Precondition(format!(
                "condition references component {bad} of a {n_components}-component model"
            )));
        }
        Ok(idx)
    }
}

/// Unconditional and conditional noise predictions at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPair {
    pub eps_uncond: DVector<f64>,
    pub eps_cond: DVector<f64>,
    /// Trajectory position the pair was evaluated at.
    pub t: usize,
}

impl PredictionPair {
    pub fn guidance_direction(&self) -> DVector<f64> {
        &self.eps_cond - &self.eps_uncond
    }
}

/// Anything that can stand in for the trained denoiser.
pub trait NoisePredictor {
    fn dim(&self) -> usize;

    fn predict_noise(&self, x: &DVector<f64>, cond: &Condition, alpha_bar: f64) -> Result<DVector<f64>>;

    fn predict_pair(&self, x: &DVector<f64>, cond: &Condition, alpha_bar: f64, t: usize) -> Result<PredictionPair> {
        Ok(PredictionPair {
            eps_uncond: self.predict_noise(x, &Condition::Unconditional, alpha_bar)?,
            eps_cond: self.predict_noise(x, cond, alpha_bar)?,
            t,
        })
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn predict_noise(&self, x: &DVector<f64>, cond: &Condition, ab: f64) -> Result<DVector<f64>> {
        (**self).predict_noise(x, cond, ab)
    }
}

#[derive(Debug, Clone)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
}

impl GaussianComponent {
    /// Builds a component from a lower Cholesky factor `L` (`Sigma = L L^T`).
    pub fn from_cholesky(weight: f64, mean: DVector<f64>, chol: &DMatrix<f64>) -> Result<Self> {
        let covariance = chol * chol.transpose();
        Self::from_covariance(weight, mean, covariance)
    }

    pub fn from_covariance(weight: f64, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: covariance.nrows(),
            });
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::config(
                "model.components.weight",
                format!("invalid weight {weight}"),
            ));
        }
        let sym_err = (&covariance - covariance.transpose()).amax();
        if sym_err > 1e-12 * covariance.amax().max(1.0) {
            return Err(Error::config(
                "model.components.cholesky",
                "covariance is not symmetric",
            ));
        }
        if covariance.clone().cholesky().is_none() {
            return Err(Error::config(
                "model.components.cholesky",
                "covariance is not positive definite",
            ));
        }
        let eig = SymmetricEigen::new(covariance.clone());
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(Error::config(
                "model.components.cholesky",
                "covariance has a non-positive eigenvalue",
            ));
        }
        Ok(Self {
            weight,
            mean,
            covariance,
            eigvecs: eig.eigenvectors,
            eigvals: eig.eigenvalues,
        })
    }

    pub fn diagonal(weight: f64, mean: DVector<f64>, variances: &DVector<f64>) -> Result<Self> {
        Self::from_covariance(weight, mean, DMatrix::from_diagonal(variances))
    }

    fn evaluate(&self, x: &DVector<f64>, alpha_bar: f64) -> ComponentEval {
        let sa = alpha_bar.sqrt();
        let centred = x - &self.mean * sa;
        let z = self.eigvecs.tr_mul(&centred);
        let s = self.eigvals.map(|l| alpha_bar * l + (1.0 - alpha_bar));
        let quad: f64 = z.iter().zip(s.iter()).map(|(zi, si)| zi * zi / si).sum();
        let logdet: f64 = s.iter().map(|si| si.ln()).sum();
        let d = x.len() as f64;
        let log_density = -0.5 * (quad + logdet + d * LN_2PI);
        let shrunk = DVector::from_fn(z.len(), |i, _| self.eigvals[i] / s[i] * z[i]);
        let post_mean = &self.mean + &self.eigvecs * shrunk * sa;
        let whitened = DVector::from_fn(z.len(), |i, _| z[i] / s[i]);
        let score = -(&self.eigvecs * whitened);
        ComponentEval {
            log_density,
            post_mean,
            score,
            s,
        }
    }

    /// `J v` for the component's (symmetric) posterior-mean Jacobian `sqrt(ab) Sigma S^-1`.
    fn jacobian_mul(&self, eval: &ComponentEval, alpha_bar: f64, v: &DVector<f64>) -> DVector<f64> {
        let zv = self.eigvecs.tr_mul(v);
        let scaled = DVector::from_fn(zv.len(), |i, _| self.eigvals[i] / eval.s[i] * zv[i]);
        &self.eigvecs * scaled * alpha_bar.sqrt()
    }
}

struct ComponentEval {
    log_density: f64,
    post_mean: DVector<f64>,
    /// Gradient of the component's marginal log density at `x`.
    score: DVector<f64>,
    s: DVector<f64>,
}

/// Parameters of the random two-component families used by the experiment sweeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairFamily {
    pub dim: usize,
    /// Means sit at `+/- separation * u` for a random unit vector `u`.
    pub separation: f64,
    pub var_lo: f64,
    pub var_hi: f64,
    /// Component 1 covariance is `cov_ratio` times component 0's.
    pub cov_ratio: f64,
    pub weight: f64,
}

impl Default for PairFamily {
    fn default() -> Self {
        Self {
            dim: 64,
            separation: 1.5,
            var_lo: 0.3,
            var_hi: 1.0,
            cov_ratio: 3.0,
            weight: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalyticModel {
    components: Vec<GaussianComponent>,
    dim: usize,
}

struct MixtureEval {
    resp: Vec<f64>,
    evals: Vec<ComponentEval>,
    log_norm: f64,
}

impl AnalyticModel {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::config("model.components", "at least one component required"))?;
        let dim = first.mean.len();
        if let Some(c) = components.iter().find(|c| c.mean.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: c.mean.len(),
            });
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(
                "model.components.weight",
                format!("weights sum to {total}, expected 1"),
            ));
        }
        Ok(Self { components, dim })
    }

    pub fn standard_gaussian(dim: usize) -> Self {
        let c = GaussianComponent::diagonal(1.0, DVector::zeros(dim), &DVector::from_element(dim, 1.0))
            .expect("identity covariance is valid");
        Self::new(vec![c]).expect("single unit-weight component")
    }

    /// Draws a model from the two-component family.
    pub fn random_pair<R: Rng + ?Sized>(rng: &mut R, family: &PairFamily) -> Result<Self> {
        if family.dim == 0 || !(family.var_lo > 0.0 && family.var_hi >= family.var_lo) {
            return Err(Error::config("model", "invalid random-pair family"));
        }
        if !(family.weight > 0.0 && family.weight < 1.0) {
            return Err(Error::config("model.weight", "must lie in (0, 1)"));
        }
        if !(family.cov_ratio > 0.0) {
            return Err(Error::config("model.cov_ratio", "must be positive"));
        }
        let u = rng::unit_vector(rng, family.dim);
        let var0 = DVector::from_fn(family.dim, |_, _| {
            family.var_lo + (family.var_hi - family.var_lo) * rng.random::<f64>()
        });
        let var1 = &var0 * family.cov_ratio;
        let c0 = GaussianComponent::diagonal(family.weight, &u * family.separation, &var0)?;
        let c1 = GaussianComponent::diagonal(1.0 - family.weight, &u * -family.separation, &var1)?;
        Self::new(vec![c0, c1])
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Draws a clean sample from the mixture restricted to `cond`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, cond: &Condition) -> Result<DVector<f64>> {
        let idx = cond.indices(self.components.len())?;
        let total: f64 = idx.iter().map(|&i| self.components[i].weight).sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = *idx.last().expect("non-empty");
        for &i in &idx {
            u -= self.components[i].weight;
            if u <= 0.0 {
                pick = i;
                break;
            }
        }
        let c = &self.components[pick];
        let z = normal_vector(rng, self.dim);
        let sqrt_vals = c.eigvals.map(f64::sqrt);
        Ok(&c.mean + &c.eigvecs * z.component_mul(&sqrt_vals))
    }

    fn check(&self, x: &DVector<f64>, alpha_bar: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
            return Err(Error::DegenerateTimestep { alpha_bar });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite state passed to the oracle".into()));
        }
        Ok(())
    }

    fn mixture(&self, x: &DVector<f64>, cond: &Condition, alpha_bar: f64) -> Result<MixtureEval> {
        self.check(x, alpha_bar)?;
        let idx = cond.indices(self.components.len())?;
        let total: f64 = idx.iter().map(|&i| self.components[i].weight).sum();
        let evals: Vec<ComponentEval> = idx.iter().map(|&i| self.components[i].evaluate(x, alpha_bar)).collect();
        let logw: Vec<f64> = idx
            .iter()
            .zip(&evals)
            .map(|(&i, e)| (self.components[i].weight / total).ln() + e.log_density)
            .collect();
        let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logw.iter().map(|l| (l - max).exp()).sum();
        let log_norm = max + sum.ln();
        let resp = logw.iter().map(|l| (l - log_norm).exp()).collect();
        Ok(MixtureEval { resp, evals, log_norm })
    }

    /// `E[x0 | x_t]` under the conditioned mixture.
    pub fn posterior_mean(&self, x: &DVector<f64>, cond: &Condition, alpha_bar: f64) -> Result<DVector<f64>> {
        let m = self.mixture(x, cond, alpha_bar)?;
        let mut out = DVector::zeros(self.dim);
        for (r, e) in m.resp.iter().zip(&m.evals) {
            out.axpy(*r, &e.post_mean, 1.0);
        }
        Ok(out)
    }

    /// Log density of the noisy marginal `p_t(x_t)` under the conditioned mixture.
    pub fn marginal_log_density(&self, x: &DVector<f64>, cond: &Condition, alpha_bar: f64) -> Result<f64> {
        Ok(self.mixture(x, cond, alpha_bar)?.log_norm)
    }

    /// `J^T v` where `J` is the Jacobian of `E[x0 | x_t]` with respect to `x_t`.
    ///
    /// `J = sum_k r_k J_k + sum_k r_k mhat_k (g_k - gbar)^T`, with `g_k` the component
    /// marginal scores and `gbar = sum_k r_k g_k`.
    pub fn posterior_mean_vjp(
        &self,
        x: &DVector<f64>,
        cond: &Condition,
        alpha_bar: f64,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        let idx = cond.indices(self.components.len())?;
        let m = self.mixture(x, cond, alpha_bar)?;
        let mut gbar = DVector::zeros(self.dim);
        for (r, e) in m.resp.iter().zip(&m.evals) {
            gbar.axpy(*r, &e.score, 1.0);
        }
        let mut out = DVector::zeros(self.dim);
        for ((r, e), &i) in m.resp.iter().zip(&m.evals).zip(&idx) {
            let jv = self.components[i].jacobian_mul(e, alpha_bar, v);
            out.axpy(*r, &jv, 1.0);
            let coef = r * e.post_mean.dot(v);
            out.axpy(coef, &e.score, 1.0);
            out.axpy(-coef, &gbar, 1.0);
        }
        Ok(out)
    }
}

impl NoisePredictor for AnalyticModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_noise(&self, x: &DVector<f64>, cond: &Condition, alpha_bar: f64) -> Result<DVector<f64>> {
        let mean = self.posterior_mean(x, cond, alpha_bar)?;
        Ok((x - mean * alpha_bar.sqrt()) / (1.0 - alpha_bar).sqrt())
    }
}

/// Adds seeded i.i.d. Gaussian noise of standard deviation `noise_scale` to every prediction.
///
/// Call `n` on a wrapper keyed by `seed` draws from stream `(seed, n)`, so two wrappers
/// with the same seed replay identical perturbations call for call. The call counter is
/// a `Cell`: one wrapper serves one trajectory at a time.
#[derive(Debug)]
pub struct Perturbed<P> {
    inner: P,
    noise_scale: f64,
    seed: u64,
    calls: Cell<u64>,
}

impl<P: NoisePredictor> Perturbed<P> {
    pub fn new(inner: P, noise_scale: f64, seed: u64) -> Result<Self> {
        if !(noise_scale.is_finite() && noise_scale >= 0.0) {
            return Err(Error::config("noise_scale", format!("must be >= 0, got {noise_scale}")));
        }
        Ok(Self {
            inner,
            noise_scale,
            seed,
            calls: Cell::new(0),
        })
    }

    pub fn calls(&self) -> u64 {
        self.calls.get()
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: NoisePredictor> NoisePredictor for Perturbed<P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn predict_noise(&self, x: &DVector<f64>, cond: &Condition, alpha_bar: f64) -> Result<DVector<f64>> {
        let call = self.calls.get();
        self.calls.set(call + 1);
        let eps = self.inner.predict_noise(x, cond, alpha_bar)?;
        if self.noise_scale == 0.0 {
            return Ok(eps);
        }
        let mut rng = rng::keyed(self.seed, call);
        Ok(eps + normal_vector(&mut rng, self.inner.dim()) * self.noise_scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn two_component_2d() -> AnalyticModel {
        let c0 = GaussianComponent::from_cholesky(
            0.3,
            DVector::from_vec(vec![1.0, -0.5]),
            &DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.2, 0.4]),
        )
        .unwrap();
        let c1 = GaussianComponent::from_cholesky(
            0.7,
            DVector::from_vec(vec![-1.0, 0.8]),
            &DMatrix::from_row_slice(2, 2, &[0.9, 0.0, -0.3, 0.5]),
        )
        .unwrap();
        AnalyticModel::new(vec![c0, c1]).unwrap()
    }

    #[test]
    fn unit_gaussian_closed_form() {
        let m = AnalyticModel::standard_gaussian(2);
        let x = DVector::from_vec(vec![2.0, 0.0]);
        let eps = m.predict_noise(&x, &Condition::Unconditional, 0.75).unwrap();
        assert_relative_eq!(eps, DVector::from_vec(vec![1.0, 0.0]), epsilon = 1e-15);
        let pm = m.posterior_mean(&x, &Condition::Unconditional, 0.75).unwrap();
        assert_relative_eq!(pm, &x * 0.75f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn noise_vanishes_at_scaled_mean() {
        let mean = DVector::from_vec(vec![0.5, -1.5, 2.0]);
        let c = GaussianComponent::diagonal(1.0, mean.clone(), &DVector::from_vec(vec![0.3, 0.8, 1.7])).unwrap();
        let m = AnalyticModel::new(vec![c]).unwrap();
        let ab: f64 = 0.6;
        let x = &mean * ab.sqrt();
        let eps = m.predict_noise(&x, &Condition::Unconditional, ab).unwrap();
        assert!(eps.amax() < 1e-14);
    }

    #[test]
    fn posterior_mean_matches_direct_solve() {
        let m = two_component_2d();
        let c = &m.components()[0];
        let single = AnalyticModel::new(vec![GaussianComponent::from_covariance(
            1.0,
            c.mean.clone(),
            c.covariance.clone(),
        )
        .unwrap()])
        .unwrap();
        let ab = 0.99;
        let x = DVector::from_vec(vec![0.3, 0.7]);
        let s = &c.covariance * ab + DMatrix::identity(2, 2) * (1.0 - ab);
        let rhs = &x - &c.mean * ab.sqrt();
        let solved = s.lu().solve(&rhs).unwrap();
        let expected = &c.mean + &c.covariance * solved * ab.sqrt();
        let got = single.posterior_mean(&x, &Condition::Unconditional, ab).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn unit_weight_mixture_reduces_to_single_gaussian() {
        let base = two_component_2d();
        let c0 = base.components()[0].clone();
        let mut c1 = base.components()[1].clone();
        let mut c0w = c0.clone();
        c0w.weight = 1.0;
        c1.weight = 0.0;
        let degenerate = AnalyticModel::new(vec![c0w.clone(), c1]).unwrap();
        let single = AnalyticModel::new(vec![c0w]).unwrap();
        let x = DVector::from_vec(vec![-0.4, 1.1]);
        let a = degenerate.posterior_mean(&x, &Condition::Unconditional, 0.4).unwrap();
        let b = single.posterior_mean(&x, &Condition::Unconditional, 0.4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn component_condition_selects_one_gaussian() {
        let m = two_component_2d();
        let only0 = AnalyticModel::new(vec![{
            let mut c = m.components()[0].clone();
            c.weight = 1.0;
            c
        }])
        .unwrap();
        let x = DVector::from_vec(vec![0.2, 0.1]);
        let a = m.predict_noise(&x, &Condition::Component(0), 0.5).unwrap();
        let b = only0.predict_noise(&x, &Condition::Unconditional, 0.5).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-14);
        let s = m.predict_noise(&x, &Condition::Subset(vec![0, 1]), 0.5).unwrap();
        let u = m.predict_noise(&x, &Condition::Unconditional, 0.5).unwrap();
        assert_relative_eq!(s, u, epsilon = 1e-14);
    }

    #[test]
    fn rejects_degenerate_timestep_and_bad_models() {
        let m = AnalyticModel::standard_gaussian(2);
        let x = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(
            m.predict_noise(&x, &Condition::Unconditional, 1.0),
            Err(Error::DegenerateTimestep { .. })
        ));
        assert!(m.predict_noise(&x, &Condition::Component(3), 0.5).is_err());
        let c = GaussianComponent::diagonal(0.5, DVector::zeros(2), &DVector::from_element(2, 1.0)).unwrap();
        assert!(AnalyticModel::new(vec![c]).is_err());
        let not_pd = GaussianComponent::from_covariance(
            1.0,
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
        );
        assert!(not_pd.is_err());
    }

    #[test]
    fn repeated_calls_are_bitwise_identical() {
        let m = two_component_2d();
        let x = DVector::from_vec(vec![0.9, -0.2]);
        let a = m.predict_noise(&x, &Condition::Unconditional, 0.3).unwrap();
        let b = m.predict_noise(&x, &Condition::Unconditional, 0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perturbation_zero_scale_is_transparent() {
        let m = two_component_2d();
        let p = Perturbed::new(&m, 0.0, 11).unwrap();
        let x = DVector::from_vec(vec![0.1, 0.4]);
        for _ in 0..3 {
            assert_eq!(
                p.predict_noise(&x, &Condition::Component(1), 0.2).unwrap(),
                m.predict_noise(&x, &Condition::Component(1), 0.2).unwrap()
            );
        }
        assert_eq!(p.calls(), 3);
        assert!(Perturbed::new(&m, -1.0, 0).is_err());
    }

    #[test]
    fn perturbation_replays_per_call_index() {
        let m = AnalyticModel::standard_gaussian(4);
        let x = DVector::from_element(4, 0.5);
        let p = Perturbed::new(&m, 0.1, 5).unwrap();
        let q = Perturbed::new(&m, 0.1, 5).unwrap();
        let a: Vec<_> = (0..3)
            .map(|_| p.predict_noise(&x, &Condition::Unconditional, 0.5).unwrap())
            .collect();
        let b: Vec<_> = (0..3)
            .map(|_| q.predict_noise(&x, &Condition::Unconditional, 0.5).unwrap())
            .collect();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn sampling_respects_condition() {
        let m = two_component_2d();
        let mut r = crate::rng::StreamRng::seed_from_u64(3);
        let n = 20_000;
        let mut acc = DVector::zeros(2);
        for _ in 0..n {
            acc += m.sample(&mut r, &Condition::Component(1)).unwrap();
        }
        acc /= n as f64;
        assert!((acc - &m.components()[1].mean).amax() < 0.03);
    }
}

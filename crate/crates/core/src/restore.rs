//! Linear inverse problems solved inside the guided sampling loop.
//!
//! Signals are `channels x height x width` grids flattened channel-major. Each sampling
//! step applies CFG (scale from the policy) and then the method's correction:
//!
//! * DDNM replaces the range-space part of `x0_hat` with `A^+ y`;
//! * DDRM nudges `x0_hat` by `eta * A^+ (y - A x0_hat)`;
//! * DPS subtracts `lambda` times the gradient of `0.5 |y - A x0_hat(x_t)|^2` from the next state.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::guidance::{cfg_combine, PredictionDelta, ReplayOrder, ScalePolicy};
use crate::metrics::Quality;
use crate::oracle::{AnalyticModel, Condition, NoisePredictor, PredictionPair};
use crate::pipeline::{denoise_step, invert, LatentState};
use crate::rng::{self, normal_vector, Stream};
use crate::schedule::{NoiseSchedule, TimestepMap};

pub const DEFAULT_ETA: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 0.2;
const PINV_RCOND: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LinearMeasurement {
    operator: DMatrix<f64>,
    pinv: DMatrix<f64>,
    y: DVector<f64>,
    noise_sigma: f64,
}

impl LinearMeasurement {
    pub fn new(operator: DMatrix<f64>, y: DVector<f64>, noise_sigma: f64) -> Result<Self> {
        let (m, n) = operator.shape();
        if m > n {
            return Err(Error::config(
                "restore.operator",
                format!("needs rows <= cols, got {m}x{n}"),
            ));
        }
        if y.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) || !(noise_sigma >= 0.0) {
            return Err(Error::config(
                "restore.noise_sigma",
                "measurement must be finite, sigma >= 0",
            ));
        }
        let tol = PINV_RCOND * operator.amax().max(f64::MIN_POSITIVE) * n as f64;
        let pinv = operator
            .clone()
            .pseudo_inverse(tol)
            .map_err(|e| Error::Precondition(e.to_string()))?;
        Ok(Self {
            operator,
            pinv,
            y,
            noise_sigma,
        })
    }

    /// Measures `x` through `operator`, adding `noise_sigma` Gaussian noise.
    pub fn observe<R: Rng + ?Sized>(
        operator: DMatrix<f64>,
        x: &DVector<f64>,
        noise_sigma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if x.len() != operator.ncols() {
            return Err(Error::DimensionMismatch {
                expected: operator.ncols(),
                got: x.len(),
            });
        }
        let mut y = &operator * x;
        if noise_sigma > 0.0 {
            y += normal_vector(rng, y.len()) * noise_sigma;
        }
        Self::new(operator, y, noise_sigma)
    }

    pub fn operator(&self) -> &DMatrix<f64> {
        &self.operator
    }

    pub fn pinv(&self) -> &DMatrix<f64> {
        &self.pinv
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn dim(&self) -> usize {
        self.operator.ncols()
    }

    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.y - &self.operator * x
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::config(
                "restore.operator",
                format!("operator acts on {} entries, signal has {}", self.dim(), x.len()),
            ));
        }
        Ok(())
    }
}

/// `A^+ y + (I - A^+ A) x0_hat`.
pub fn ddnm_project(x0_hat: &DVector<f64>, meas: &LinearMeasurement) -> Result<DVector<f64>> {
    meas.check(x0_hat)?;
    Ok(x0_hat + &meas.pinv * meas.residual(x0_hat))
}

/// `x0_hat + eta A^+ (y - A x0_hat)`.
pub fn ddrm_correct(x0_hat: &DVector<f64>, meas: &LinearMeasurement, eta: f64) -> Result<DVector<f64>> {
    meas.check(x0_hat)?;
    Ok(x0_hat + &meas.pinv * meas.residual(x0_hat) * eta)
}

/// Gradient of `0.5 |y - A E[x0 | x_t]|^2` with respect to `x_t`.
pub fn dps_gradient(
    x: &DVector<f64>,
    meas: &LinearMeasurement,
    model: &AnalyticModel,
    cond: &Condition,
    alpha_bar: f64,
) -> Result<DVector<f64>> {
    meas.check(x)?;
    let x0_hat = model.posterior_mean(x, cond, alpha_bar)?;
    let v = -(meas.operator.transpose() * meas.residual(&x0_hat));
    model.posterior_mean_vjp(x, cond, alpha_bar, &v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RestoreMethod {
    Ddnm,
    Dps,
    Ddrm,
}

impl RestoreMethod {
    pub const ALL: [RestoreMethod; 3] = [RestoreMethod::Ddnm, RestoreMethod::Dps, RestoreMethod::Ddrm];

    pub fn name(self) -> &'static str {
        match self {
            RestoreMethod::Ddnm => "ddnm",
            RestoreMethod::Dps => "dps",
            RestoreMethod::Ddrm => "ddrm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Where the corrected sampling loop starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestoreInit {
    /// Invert the back-projection `A^+ y` under the policy, then sample replaying the
    /// recorded scales in reverse order.
    Inversion,
    /// Start from seeded Gaussian noise; the policy picks scales online while sampling.
    Gaussian,
}

impl RestoreInit {
    pub fn name(self) -> &'static str {
        match self {
            RestoreInit::Inversion => "inversion",
            RestoreInit::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [RestoreInit::Inversion, RestoreInit::Gaussian]
            .into_iter()
            .find(|i| i.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestoreConfig {
    pub method: RestoreMethod,
    pub eta: f64,
    pub lambda: f64,
    pub init: RestoreInit,
}

impl RestoreConfig {
    pub fn new(method: RestoreMethod) -> Self {
        Self {
            method,
            eta: DEFAULT_ETA,
            lambda: DEFAULT_LAMBDA,
            init: RestoreInit::Inversion,
        }
    }

    pub fn with_init(mut self, init: RestoreInit) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::config("restore.eta", format!("must be >= 0, got {}", self.eta)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config(
                "restore.lambda",
                format!("must be >= 0, got {}", self.lambda),
            ));
        }
        Ok(())
    }
}

/// Degradations on a `channels x height x width` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestoreTask {
    /// 3x3 binomial blur, valid region only.
    Blur,
    /// Average over `k x k` blocks.
    Downsample(usize),
    /// Hides the central `height/2 x width/2` block of every channel.
    CenterMask,
    /// Per-pixel average over channels.
    Colorize,
}

impl fmt::Display for RestoreTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RestoreTask::Blur => write!(f, "blur"),
            RestoreTask::Downsample(k) => write!(f, "downsample{k}"),
            RestoreTask::CenterMask => write!(f, "mask"),
            RestoreTask::Colorize => write!(f, "colorize"),
        }
    }
}

impl RestoreTask {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "blur" => Some(RestoreTask::Blur),
            "mask" => Some(RestoreTask::CenterMask),
            "colorize" => Some(RestoreTask::Colorize),
            _ => s
                .strip_prefix("downsample")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k >= 1)
                .map(RestoreTask::Downsample),
        }
    }

    pub fn operator(self, shape: (usize, usize, usize)) -> Result<DMatrix<f64>> {
        let (ch, h, w) = shape;
        let n = ch * h * w;
        let idx = |c: usize, r: usize, q: usize| (c * h + r) * w + q;
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
        match self {
            RestoreTask::Blur => {
                if h < 3 || w < 3 {
                    return Err(Error::config("restore.shape", "blur needs at least 3x3"));
                }
                let k = [0.25, 0.5, 0.25];
                for c in 0..ch {
                    for r in 0..h - 2 {
                        for q in 0..w - 2 {
                            rows.push(
                                (0..3)
                                    .flat_map(|i| (0..3).map(move |j| (i, j)))
                                    .map(|(i, j)| (idx(c, r + i, q + j), k[i] * k[j]))
                                    .collect(),
                            );
                        }
                    }
                }
            }
            RestoreTask::Downsample(k) => {
                if k == 0 || h % k != 0 || w % k != 0 {
                    return Err(Error::config("restore.factor", format!("{k} must divide {h}x{w}")));
                }
                let wt = 1.0 / (k * k) as f64;
                for c in 0..ch {
                    for r in (0..h).step_by(k) {
                        for q in (0..w).step_by(k) {
                            rows.push(
                                (0..k)
                                    .flat_map(|i| (0..k).map(move |j| (idx(c, r + i, q + j), wt)))
                                    .collect(),
                            );
                        }
                    }
                }
            }
            RestoreTask::CenterMask => {
                let (r0, q0) = (h / 4, w / 4);
                let hidden = |r: usize, q: usize| (r0..r0 + h / 2).contains(&r) && (q0..q0 + w / 2).contains(&q);
                for c in 0..ch {
                    for r in 0..h {
                        for q in 0..w {
                            if !hidden(r, q) {
                                rows.push(vec![(idx(c, r, q), 1.0)]);
                            }
                        }
                    }
                }
            }
            RestoreTask::Colorize => {
                let wt = 1.0 / ch as f64;
                for r in 0..h {
                    for q in 0..w {
                        rows.push((0..ch).map(|c| (idx(c, r, q), wt)).collect());
                    }
                }
            }
        }
        let mut a = DMatrix::zeros(rows.len(), n);
        for (i, row) in rows.iter().enumerate() {
            for &(j, v) in row {
                a[(i, j)] = v;
            }
        }
        Ok(a)
    }
}

/// Restored estimate with its scores against the ground truth.
#[derive(Debug, Clone)]
pub struct RestoreOutcome {
    pub restored: DVector<f64>,
    pub quality: Quality,
    pub omegas: Vec<f64>,
    pub diverged: bool,
}

/// Everything a restoration run needs besides the policy and method.
#[derive(Debug, Clone, Copy)]
pub struct RestoreProblem<'a> {
    pub meas: &'a LinearMeasurement,
    pub model: &'a AnalyticModel,
    pub cond: &'a Condition,
    pub truth: &'a DVector<f64>,
    pub shape: (usize, usize, usize),
}

/// Guided sampling with a measurement correction after every step.
///
/// DDNM and DDRM return the corrected clean estimate of the final step; DPS returns the
/// final state.
pub fn run_restoration(
    problem: &RestoreProblem<'_>,
    config: &RestoreConfig,
    policy: &ScalePolicy,
    schedule: &NoiseSchedule,
    map: &TimestepMap,
    seed: u64,
) -> Result<RestoreOutcome> {
    config.validate()?;
    let RestoreProblem {
        meas,
        model,
        cond,
        truth,
        shape,
    } = *problem;
    meas.check(truth)?;
    let total = map.steps();
    let (mut x, replay, mut diverged) = match config.init {
        RestoreInit::Gaussian => (
            normal_vector(&mut rng::stream(seed, Stream::InitialNoise), model.dim()),
            None,
            false,
        ),
        RestoreInit::Inversion => {
            let start = LatentState::new(meas.pinv() * meas.y(), 0);
            let inv = invert(&start, model, cond, policy, schedule, map)?;
            let replay = ScalePolicy::Replay {
                schedule: inv.omegas.clone(),
                order: ReplayOrder::Reverse,
            };
            (inv.last().x.clone(), Some(replay), inv.diverged)
        }
    };
    let mut selector = replay.as_ref().unwrap_or(policy).selector(total)?;
    let mut prev: Option<PredictionPair> = None;
    let mut omegas = Vec::with_capacity(total);
    let mut estimate = x.clone();
    for step in 0..total {
        if diverged {
            break;
        }
        let t = total - step;
        let (ab, ab_prev) = (map.alpha_bar(schedule, t), map.alpha_bar(schedule, t - 1));
        let pair = model.predict_pair(&x, cond, ab, t)?;
        let delta = prev.as_ref().map(|p| PredictionDelta::between(&pair, p));
        let omega = selector.next_scale(step, delta.as_ref(), None)?;
        omegas.push(omega);
        let eps = cfg_combine(&pair, omega);
        let x0_hat = (&x - &eps * (1.0 - ab).sqrt()) / ab.sqrt();
        let (x0_fixed, next) = match config.method {
            RestoreMethod::Ddnm | RestoreMethod::Ddrm => {
                let fixed = if config.method == RestoreMethod::Ddnm {
                    ddnm_project(&x0_hat, meas)?
                } else {
                    ddrm_correct(&x0_hat, meas, config.eta)?
                };
                let next = &fixed * ab_prev.sqrt() + &eps * (1.0 - ab_prev).sqrt();
                (fixed, next)
            }
            RestoreMethod::Dps => {
                let grad = dps_gradient(&x, meas, model, cond, ab)?;
                let next = denoise_step(&x, &eps, ab, ab_prev)? - grad * config.lambda;
                (next.clone(), next)
            }
        };
        prev = Some(pair);
        if next.iter().any(|v| !v.is_finite()) {
            diverged = true;
            estimate = x0_fixed;
            break;
        }
        estimate = x0_fixed;
        x = next;
    }
    let quality = Quality::latent(truth.as_slice(), estimate.as_slice(), shape)?;
    Ok(RestoreOutcome {
        restored: estimate,
        quality,
        omegas,
        diverged: diverged || selector.diverged(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{GaussianComponent, PairFamily};
    use crate::rng::StreamRng;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    const SHAPE: (usize, usize, usize) = (3, 8, 8);

    fn random_matrix(r: &mut StreamRng, m: usize, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, n, |_, _| r.sample::<f64, _>(rand_distr::StandardNormal))
    }

    #[test]
    fn identity_operator_returns_y() {
        let mut r = StreamRng::seed_from_u64(1);
        let y = normal_vector(&mut r, 5);
        let meas = LinearMeasurement::new(DMatrix::identity(5, 5), y.clone(), 0.0).unwrap();
        let got = ddnm_project(&normal_vector(&mut r, 5), &meas).unwrap();
        assert_relative_eq!(got, y, epsilon = 1e-14);
    }

    #[test]
    fn mask_projection_keeps_hidden_entries() {
        let a = RestoreTask::CenterMask.operator(SHAPE).unwrap();
        let mut r = StreamRng::seed_from_u64(2);
        let truth = normal_vector(&mut r, 192);
        let meas = LinearMeasurement::observe(a.clone(), &truth, 0.0, &mut r).unwrap();
        let guess = normal_vector(&mut r, 192);
        let out = ddnm_project(&guess, &meas).unwrap();
        let observed: Vec<bool> = (0..192).map(|j| a.column(j).iter().any(|&v| v != 0.0)).collect();
        assert_eq!(observed.iter().filter(|&&o| !o).count(), 3 * 16);
        for j in 0..192 {
            let want = if observed[j] { truth[j] } else { guess[j] };
            assert!((out[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ddnm_matches_least_squares_oracle() {
        let mut r = StreamRng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random_matrix(&mut r, 3, 8);
            let y = normal_vector(&mut r, 3);
            let x0 = normal_vector(&mut r, 8);
            let meas = LinearMeasurement::new(a.clone(), y.clone(), 0.0).unwrap();
            let out = ddnm_project(&x0, &meas).unwrap();
            assert!((&a * &out - &y).norm() <= 1e-10 * y.norm().max(1.0));
            // Nearest point to x0 on {x : A x = y}: x0 + A^T (A A^T)^-1 (y - A x0).
            let gram = &a * a.transpose();
            let lam = gram.lu().solve(&(&y - &a * &x0)).unwrap();
            let oracle = &x0 + a.transpose() * lam;
            assert!((out - oracle).amax() < 1e-10);
        }
    }

    #[test]
    fn operators_have_expected_shapes() {
        assert_eq!(RestoreTask::Blur.operator(SHAPE).unwrap().shape(), (108, 192));
        assert_eq!(RestoreTask::Downsample(2).operator(SHAPE).unwrap().shape(), (48, 192));
        assert_eq!(RestoreTask::CenterMask.operator(SHAPE).unwrap().shape(), (144, 192));
        assert_eq!(RestoreTask::Colorize.operator(SHAPE).unwrap().shape(), (64, 192));
        assert!(RestoreTask::Downsample(3).operator(SHAPE).is_err());
        for task in ["blur", "downsample2", "mask", "colorize"] {
            assert_eq!(RestoreTask::parse(task).unwrap().to_string(), task);
        }
    }

    #[test]
    fn pseudo_inverse_projector_is_idempotent() {
        for task in [
            RestoreTask::Blur,
            RestoreTask::Downsample(2),
            RestoreTask::CenterMask,
            RestoreTask::Colorize,
        ] {
            let meas = LinearMeasurement::new(
                task.operator(SHAPE).unwrap(),
                DVector::zeros(task.operator(SHAPE).unwrap().nrows()),
                0.0,
            )
            .unwrap();
            let p = meas.pinv() * meas.operator();
            assert!((&p * &p - &p).amax() < 1e-10, "{task}");
        }
    }

    fn central_difference(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| {
            let mut p = x.clone();
            let mut m = x.clone();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    fn loss<'a>(
        model: &'a AnalyticModel,
        meas: &'a LinearMeasurement,
        cond: &Condition,
        ab: f64,
    ) -> impl Fn(&DVector<f64>) -> f64 + 'a {
        let cond = cond.clone();
        move |x| {
            0.5 * meas
                .residual(&model.posterior_mean(x, &cond, ab).unwrap())
                .norm_squared()
        }
    }

    #[test]
    fn dps_gradient_matches_finite_differences() {
        let mut r = StreamRng::seed_from_u64(4);
        let a = random_matrix(&mut r, 4, 6);
        let meas = LinearMeasurement::new(a, normal_vector(&mut r, 4), 0.0).unwrap();
        let chol = random_matrix(&mut r, 6, 6).lower_triangle() + DMatrix::identity(6, 6) * 2.0;
        let gauss = AnalyticModel::new(vec![GaussianComponent::from_cholesky(
            1.0,
            normal_vector(&mut r, 6),
            &chol,
        )
        .unwrap()])
        .unwrap();
        let fam = PairFamily {
            dim: 6,
            ..PairFamily::default()
        };
        let mixture = AnalyticModel::random_pair(&mut r, &fam).unwrap();
        for model in [&gauss, &mixture] {
            for ab in [0.9, 0.5, 0.05] {
                let x = normal_vector(&mut r, 6);
                let c = Condition::Unconditional;
                let g = dps_gradient(&x, &meas, model, &c, ab).unwrap();
                let fd = central_difference(loss(model, &meas, &c, ab), &x, 1e-5);
                assert!((&g - &fd).norm() <= 1e-7 * g.norm().max(1e-3), "{g} vs {fd}");
            }
        }
    }

    #[test]
    fn dps_gradient_trivial_cases() {
        let mut r = StreamRng::seed_from_u64(5);
        let fam = PairFamily {
            dim: 6,
            ..PairFamily::default()
        };
        let model = AnalyticModel::random_pair(&mut r, &fam).unwrap();
        let x = normal_vector(&mut r, 6);
        let c = Condition::Component(1);
        let a = random_matrix(&mut r, 3, 6);
        let y = &a * model.posterior_mean(&x, &c, 0.4).unwrap();
        let meas = LinearMeasurement::new(a, y, 0.0).unwrap();
        assert!(dps_gradient(&x, &meas, &model, &c, 0.4).unwrap().amax() < 1e-12);
        let zero = LinearMeasurement::new(DMatrix::zeros(3, 6), normal_vector(&mut r, 3), 0.0).unwrap();
        assert_eq!(dps_gradient(&x, &zero, &model, &c, 0.4).unwrap().amax(), 0.0);
    }

    fn problem_fixture(seed: u64, task: RestoreTask) -> (AnalyticModel, DVector<f64>, LinearMeasurement) {
        let fam = PairFamily {
            dim: 192,
            ..PairFamily::default()
        };
        let model = AnalyticModel::random_pair(&mut rng::stream(seed, Stream::Model), &fam).unwrap();
        let truth = model
            .sample(&mut rng::stream(seed, Stream::CleanSample), &Condition::Component(0))
            .unwrap();
        let meas = LinearMeasurement::observe(
            task.operator(SHAPE).unwrap(),
            &truth,
            0.0,
            &mut rng::stream(seed, Stream::Measurement),
        )
        .unwrap();
        (model, truth, meas)
    }

    #[test]
    fn ddnm_identity_recovers_exactly() {
        let fam = PairFamily {
            dim: 192,
            ..PairFamily::default()
        };
        let model = AnalyticModel::random_pair(&mut StreamRng::seed_from_u64(6), &fam).unwrap();
        let truth = model
            .sample(&mut StreamRng::seed_from_u64(7), &Condition::Component(0))
            .unwrap();
        let meas = LinearMeasurement::new(DMatrix::identity(192, 192), truth.clone(), 0.0).unwrap();
        let sched = NoiseSchedule::default_linear();
        let map = sched.subsample(10).unwrap();
        let cond = Condition::Component(0);
        let p = RestoreProblem {
            meas: &meas,
            model: &model,
            cond: &cond,
            truth: &truth,
            shape: SHAPE,
        };
        let out = run_restoration(
            &p,
            &RestoreConfig::new(RestoreMethod::Ddnm),
            &ScalePolicy::Fixed(1.0),
            &sched,
            &map,
            1,
        )
        .unwrap();
        assert!((out.restored - truth).amax() < 1e-6);
    }

    #[test]
    fn every_method_emits_the_same_schema() {
        let (model, truth, meas) = problem_fixture(8, RestoreTask::CenterMask);
        let sched = NoiseSchedule::default_linear();
        let map = sched.subsample(10).unwrap();
        let cond = Condition::Component(0);
        let p = RestoreProblem {
            meas: &meas,
            model: &model,
            cond: &cond,
            truth: &truth,
            shape: SHAPE,
        };
        for method in RestoreMethod::ALL {
            for policy in [ScalePolicy::Fixed(1.0), ScalePolicy::polaris()] {
                let out = run_restoration(&p, &RestoreConfig::new(method), &policy, &sched, &map, 3).unwrap();
                assert_eq!(out.restored.len(), 192);
                assert_eq!(out.omegas.len(), 10);
                assert!(out.quality.mse.is_finite() && !out.diverged);
                if method == RestoreMethod::Ddnm {
                    assert!(meas.residual(&out.restored).norm() <= 1e-8 * meas.y().norm());
                }
            }
        }
    }
}

//! Classifier-free guidance and guidance-scale policies.

use std::io::{Read, Write};

use nalgebra::DVector;
use rand::distr::Open01;
use rand::Rng;

use crate::error::{Error, Result};
use crate::oracle::PredictionPair;
use crate::rng::{self, Stream, StreamRng};

pub const DEFAULT_GUARD: f64 = 1e-2;
pub const DEFAULT_OMEGA0: f64 = 1.0;
/// Magnitude at which the exact rule's update is clamped and the run flagged as diverged.
pub const DELTA_OMEGA_CLAMP: f64 = 1e6;
/// `|b|^2` below this is treated as an ill-posed exact update.
pub const ILL_POSED_NORM_SQ: f64 = f64::MIN_POSITIVE;

/// `(1 - omega) eps_uncond + omega eps_cond`.
pub fn cfg_combine(pair: &PredictionPair, omega: f64) -> DVector<f64> {
    &pair.eps_uncond * (1.0 - omega) + &pair.eps_cond * omega
}

/// Change of both predictions between two consecutive states.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDelta {
    pub d_uncond: DVector<f64>,
    pub d_cond: DVector<f64>,
}

impl PredictionDelta {
    pub fn new(d_uncond: DVector<f64>, d_cond: DVector<f64>) -> Result<Self> {
        if d_uncond.len() != d_cond.len() {
            return Err(Error::DimensionMismatch {
                expected: d_uncond.len(),
                got: d_cond.len(),
            });
        }
        Ok(Self { d_uncond, d_cond })
    }

    /// `current - previous` for both predictions.
    pub fn between(current: &PredictionPair, previous: &PredictionPair) -> Self {
        Self {
            d_uncond: &current.eps_uncond - &previous.eps_uncond,
            d_cond: &current.eps_cond - &previous.eps_cond,
        }
    }
}

/// Closed-form minimizer of `|(1 - w) d_uncond + w d_cond|^2` with a guarded denominator.
///
/// `guard = 0` gives the unguarded projection; a vanishing denominator then yields 0.
pub fn polaris_robust_scale(delta: &PredictionDelta, guard: f64) -> f64 {
    let du = &delta.d_uncond;
    let diff = du - &delta.d_cond;
    let num = du.norm_squared() - du.dot(&delta.d_cond);
    let den = diff.norm_squared() + guard;
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// `(1 - omega) d_uncond + omega d_cond`.
pub fn tau_approx(omega: f64, delta: &PredictionDelta) -> DVector<f64> {
    &delta.d_uncond * (1.0 - omega) + &delta.d_cond * omega
}

/// Inputs to one step of the exact (history-aware) rule.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactSolverState {
    /// `(1 - omega_prev) d_uncond + omega_prev d_cond`.
    pub a: DVector<f64>,
    /// Guidance direction at the previous state, `eps_cond - eps_uncond`.
    pub b: DVector<f64>,
    pub omega_prev: f64,
}

impl ExactSolverState {
    pub fn new(a: DVector<f64>, b: DVector<f64>, omega_prev: f64) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                got: b.len(),
            });
        }
        Ok(Self { a, b, omega_prev })
    }

    pub fn from_step(omega_prev: f64, delta: &PredictionDelta, previous: &PredictionPair) -> Self {
        Self {
            a: tau_approx(omega_prev, delta),
            b: previous.guidance_direction(),
            omega_prev,
        }
    }
}

/// `-a.b / |b|^2`, the minimizer of `|a + b dw|^2`.
pub fn polaris_exact_delta(state: &ExactSolverState) -> Result<f64> {
    let nb = state.b.norm_squared();
    if !(nb >= ILL_POSED_NORM_SQ) {
        return Err(Error::IllPosed { norm_sq: nb });
    }
    Ok(-state.a.dot(&state.b) / nb)
}

/// Recorded per-step guidance scales; entry 0 is the initial scale.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScaleSchedule {
    omegas: Vec<f64>,
}

/// How a recorded schedule is mapped onto sampling timesteps `t = T..1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayOrder {
    /// Timestep `t` uses `omegas[T - t]`: the first sampling step replays the first recorded scale.
    Reverse,
    /// Timestep `t` uses `omegas[t - 1]`: each scale returns to the timestep it was recorded at.
    Forward,
}

impl ScaleSchedule {
    pub fn new(omegas: Vec<f64>) -> Result<Self> {
        if let Some(i) = omegas.iter().position(|w| !w.is_finite()) {
            return Err(Error::Precondition(format!("non-finite scale at step {i}")));
        }
        Ok(Self { omegas })
    }

    pub(crate) fn push(&mut self, omega: f64) {
        self.omegas.push(omega);
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    pub fn len(&self) -> usize {
        self.omegas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omegas.is_empty()
    }

    /// Index into the list used at sampling iteration `iter` (timestep `T - iter`).
    pub fn replay_index(order: ReplayOrder, total_steps: usize, iter: usize) -> usize {
        match order {
            ReplayOrder::Reverse => iter,
            ReplayOrder::Forward => total_steps - 1 - iter,
        }
    }

    /// Scales indexed by timestep: element `t - 1` is the scale applied at timestep `t`.
    pub fn by_timestep(&self, order: ReplayOrder) -> Vec<f64> {
        let n = self.len();
        (1..=n)
            .map(|t| self.omegas[Self::replay_index(order, n, n - t)])
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["step", "omega"])?;
        for (i, o) in self.omegas.iter().enumerate() {
            wr.write_record([i.to_string(), format!("{o:.16e}")])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut omegas = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let step: usize = rec
                .get(0)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::config("step", format!("bad step on row {}", i + 1)))?;
            if step != i {
                return Err(Error::config("step", format!("expected step {i}, found {step}")));
            }
            let omega: f64 = rec
                .get(1)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::config("omega", format!("bad omega on row {}", i + 1)))?;
            omegas.push(omega);
        }
        Self::new(omegas)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScalePolicy {
    Fixed(f64),
    PolarisRobust {
        omega0: f64,
        guard: f64,
    },
    PolarisExact {
        omega0: f64,
    },
    Replay {
        schedule: ScaleSchedule,
        order: ReplayOrder,
    },
    RandomUniform {
        lo: f64,
        hi: f64,
        seed: u64,
    },
    CosineDecay {
        start: f64,
        end: f64,
    },
}

impl ScalePolicy {
    pub fn polaris() -> Self {
        ScalePolicy::PolarisRobust {
            omega0: DEFAULT_OMEGA0,
            guard: DEFAULT_GUARD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |key: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be finite, got {v}")))
            }
        };
        match self {
            ScalePolicy::Fixed(w) => finite("policy.omega", *w),
            ScalePolicy::PolarisRobust { omega0, guard } => {
                finite("policy.omega0", *omega0)?;
                if !(guard.is_finite() && *guard > 0.0) {
                    return Err(Error::config("policy.guard", format!("must be > 0, got {guard}")));
                }
                Ok(())
            }
            ScalePolicy::PolarisExact { omega0 } => finite("policy.omega0", *omega0),
            ScalePolicy::Replay { .. } => Ok(()),
            ScalePolicy::RandomUniform { lo, hi, .. } => {
                finite("policy.lo", *lo)?;
                finite("policy.hi", *hi)?;
                if lo >= hi {
                    return Err(Error::config("policy.hi", format!("need lo < hi, got {lo} >= {hi}")));
                }
                Ok(())
            }
            ScalePolicy::CosineDecay { start, end } => {
                finite("policy.start", *start)?;
                finite("policy.end", *end)
            }
        }
    }

    /// Whether the policy reads prediction deltas.
    pub fn is_adaptive(&self) -> bool {
        matches!(
            self,
            ScalePolicy::PolarisRobust { .. } | ScalePolicy::PolarisExact { .. }
        )
    }

    pub fn selector(&self, total_steps: usize) -> Result<ScaleSelector<'_>> {
        ScaleSelector::new(self, total_steps)
    }
}

/// Per-trajectory state of a policy: replay cursor, random stream and exact recursion.
#[derive(Debug)]
pub struct ScaleSelector<'p> {
    policy: &'p ScalePolicy,
    total_steps: usize,
    rng: Option<StreamRng>,
    omega_prev: f64,
    diverged: bool,
}

impl<'p> ScaleSelector<'p> {
    pub fn new(policy: &'p ScalePolicy, total_steps: usize) -> Result<Self> {
        policy.validate()?;
        if total_steps == 0 {
            return Err(Error::config("steps", "need at least one step"));
        }
        let rng = match policy {
            ScalePolicy::RandomUniform { seed, .. } => Some(rng::stream(*seed, Stream::RandomScale)),
            _ => None,
        };
        Ok(Self {
            policy,
            total_steps,
            rng,
            omega_prev: f64::NAN,
            diverged: false,
        })
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    /// Scale used at the previous call (NaN before the first call).
    pub fn omega_prev(&self) -> f64 {
        self.omega_prev
    }

    /// Scale for loop iteration `step`. Step 0 of an adaptive policy returns `omega0`.
    pub fn next_scale(
        &mut self,
        step: usize,
        delta: Option<&PredictionDelta>,
        state: Option<&ExactSolverState>,
    ) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::ScheduleLength {
                step,
                len: self.total_steps,
            });
        }
        let omega = match self.policy {
            ScalePolicy::Fixed(w) => *w,
            ScalePolicy::PolarisRobust { omega0, guard } => match (step, delta) {
                (0, _) => *omega0,
                (_, Some(d)) => polaris_robust_scale(d, *guard),
                (_, None) => {
                    return Err(Error::Precondition(format!(
                        "robust policy needs a delta at step {step}"
                    )))
                }
            },
            ScalePolicy::PolarisExact { omega0 } => match (step, state) {
                (0, _) => *omega0,
                (_, Some(s)) => s.omega_prev + self.exact_update(s),
                (_, None) => {
                    return Err(Error::Precondition(format!(
                        "exact policy needs solver state at step {step}"
                    )))
                }
            },
            ScalePolicy::Replay { schedule, order } => {
                let idx = ScaleSchedule::replay_index(*order, self.total_steps, step);
                *schedule.omegas().get(idx).ok_or(Error::ScheduleLength {
                    step: idx,
                    len: schedule.len(),
                })?
            }
            ScalePolicy::RandomUniform { lo, hi, .. } => {
                let u: f64 = self.rng.as_mut().expect("random policy owns a stream").sample(Open01);
                lo + (hi - lo) * u
            }
            ScalePolicy::CosineDecay { start, end } => {
                if self.total_steps == 1 {
                    *start
                } else {
                    let phase = std::f64::consts::PI * step as f64 / (self.total_steps - 1) as f64;
                    end + (start - end) * 0.5 * (1.0 + phase.cos())
                }
            }
        };
        self.omega_prev = omega;
        Ok(omega)
    }

    fn exact_update(&mut self, state: &ExactSolverState) -> f64 {
        match polaris_exact_delta(state) {
            Ok(dw) if dw.abs() <= DELTA_OMEGA_CLAMP => dw,
            Ok(dw) if dw.is_finite() => {
                self.diverged = true;
                DELTA_OMEGA_CLAMP.copysign(dw)
            }
            _ => {
                self.diverged = true;
                0.0
            }
        }
    }
}

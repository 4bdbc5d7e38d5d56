//! Noise schedule and inference timestep subsampling.

use crate::error::{Error, Result};

pub const DEFAULT_T_TRAIN: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linear beta schedule with its cumulative products `alpha_bar[t] = prod_{i<=t} (1 - beta_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas over `t_train` steps.
    ///
    /// `beta_start = 0` is accepted (it yields a noiseless prefix, handy in tests); every
    /// other bound is strict.
    pub fn linear(t_train: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_train < 2 {
            return Err(Error::config(
                "schedule.t_train",
                format!("must be >= 2, got {t_train}"),
            ));
        }
        if !(beta_start.is_finite() && beta_start >= 0.0) {
            return Err(Error::config(
                "schedule.beta_start",
                format!("must be >= 0, got {beta_start}"),
            ));
        }
        if !(beta_end.is_finite() && beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::config(
                "schedule.beta_end",
                format!("must satisfy beta_start <= beta_end < 1, got {beta_end}"),
            ));
        }
        let step = (beta_end - beta_start) / (t_train - 1) as f64;
        let betas: Vec<f64> = (0..t_train).map(|i| beta_start + step * i as f64).collect();
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_T_TRAIN, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn t_train(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, train_index: usize) -> f64 {
        self.alpha_bars[train_index]
    }

    /// Uniformly spaced inference indices `floor(i * t_train / t_infer)`.
    pub fn subsample(&self, t_infer: usize) -> Result<TimestepMap> {
        let t_train = self.t_train();
        if t_infer == 0 || t_infer > t_train {
            return Err(Error::config(
                "steps",
                format!("inference steps must lie in [1, {t_train}], got {t_infer}"),
            ));
        }
        let mut indices: Vec<usize> = (0..t_infer).map(|i| i * t_train / t_infer).collect();
        indices.dedup();
        Ok(TimestepMap { indices, t_train })
    }
}

/// Training-grid indices visited by an inference run.
///
/// A trajectory with `T = steps()` steps has states at positions `0..=T`. Position
/// `k < T` sits on training index `indices[k]` (so position 0 is training index 0, the
/// clean end); position `T` sits on the last training index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepMap {
    indices: Vec<usize>,
    t_train: usize,
}

impl TimestepMap {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn steps(&self) -> usize {
        self.indices.len()
    }

    pub fn train_index(&self, position: usize) -> usize {
        assert!(position <= self.steps(), "position {position} beyond {}", self.steps());
        if position < self.steps() {
            self.indices[position]
        } else {
            self.t_train - 1
        }
    }

    pub fn alpha_bar(&self, schedule: &NoiseSchedule, position: usize) -> f64 {
        schedule.alpha_bar(self.train_index(position))
    }
}

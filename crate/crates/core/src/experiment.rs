//! Seeded reconstruction instances and the paired runs the sweeps are built from.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::guidance::{ReplayOrder, ScalePolicy};
use crate::metrics::Quality;
use crate::oracle::{AnalyticModel, Condition, PairFamily};
use crate::pipeline::{roundtrip_ordered, RoundTrip};
use crate::rng::{self, Stream};
use crate::schedule::NoiseSchedule;

/// A model and a clean sample drawn from its conditioned component, both fixed by `seed`.
#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub model: AnalyticModel,
    pub x0: DVector<f64>,
}

/// The conditioning used by every reconstruction sweep: the prompt selects component 0.
pub fn source_condition() -> Condition {
    Condition::Component(0)
}

impl Instance {
    pub fn draw(seed: u64, family: &PairFamily) -> Result<Self> {
        let model = AnalyticModel::random_pair(&mut rng::stream(seed, Stream::Model), family)?;
        Self::from_model(seed, model)
    }

    /// Keeps `model` and draws only the clean sample from `seed`.
    pub fn from_model(seed: u64, model: AnalyticModel) -> Result<Self> {
        let x0 = model.sample(&mut rng::stream(seed, Stream::CleanSample), &source_condition())?;
        Ok(Self { seed, model, x0 })
    }

    pub fn reconstruct(
        &self,
        policy: &ScalePolicy,
        order: ReplayOrder,
        steps: usize,
        schedule: &NoiseSchedule,
    ) -> Result<RoundTrip> {
        let map = schedule.subsample(steps)?;
        let c = source_condition();
        roundtrip_ordered(&self.x0, &self.model, &c, &c, policy, order, schedule, &map)
    }

    pub fn quality(&self, estimate: &DVector<f64>) -> Result<Quality> {
        Quality::latent(self.x0.as_slice(), estimate.as_slice(), latent_shape(self.x0.len())?)
    }
}

/// Latents are scored as one square channel.
pub fn latent_shape(dim: usize) -> Result<(usize, usize, usize)> {
    let side = (dim as f64).sqrt().round() as usize;
    if side * side != dim || side < crate::metrics::SSIM_WINDOW {
        return Err(Error::config(
            "model.dim",
            format!("must be a perfect square of at least 49 for grid metrics, got {dim}"),
        ));
    }
    Ok((1, side, side))
}

/// Named policy used in sweep outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Method {
    pub name: String,
    pub policy: ScalePolicy,
    pub order: ReplayOrder,
}

impl Method {
    pub fn new(name: impl Into<String>, policy: ScalePolicy) -> Self {
        Self {
            name: name.into(),
            policy,
            order: ReplayOrder::Reverse,
        }
    }

    pub fn with_order(mut self, order: ReplayOrder) -> Self {
        self.order = order;
        self
    }

    /// Random policies draw from a stream keyed by the instance seed.
    pub fn policy_for(&self, seed: u64) -> ScalePolicy {
        match &self.policy {
            ScalePolicy::RandomUniform { lo, hi, seed: base } => ScalePolicy::RandomUniform {
                lo: *lo,
                hi: *hi,
                seed: rng::stream_key(*base, seed),
            },
            p => p.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconRow {
    pub method: String,
    pub steps: usize,
    pub seed: u64,
    pub quality: Quality,
    pub diverged: bool,
}

pub fn run_reconstruction(
    instance: &Instance,
    method: &Method,
    steps: usize,
    schedule: &NoiseSchedule,
) -> Result<ReconRow> {
    let rt = instance.reconstruct(&method.policy_for(instance.seed), method.order, steps, schedule)?;
    Ok(ReconRow {
        method: method.name.clone(),
        steps,
        seed: instance.seed,
        quality: instance.quality(&rt.reconstruction)?,
        diverged: rt.diverged(),
    })
}

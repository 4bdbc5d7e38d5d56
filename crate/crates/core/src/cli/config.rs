//! Experiment configuration, read from a sectioned TOML file.
//!
//! Every key is optional; missing keys take the defaults below and unknown keys are
//! rejected. `configs/default.toml` lists every key with its default.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::guidance::{ScalePolicy, DEFAULT_GUARD, DEFAULT_OMEGA0};
use crate::oracle::{AnalyticModel, GaussianComponent, PairFamily};
use crate::param::FieldSpace;
use crate::restore::{RestoreInit, RestoreMethod, RestoreTask, DEFAULT_ETA, DEFAULT_LAMBDA};
use crate::schedule::{NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T_TRAIN};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base seed; instance `i` uses `seed + i`.
    pub seed: u64,
    /// Instances per grid point.
    pub seeds: usize,
    /// Inference step counts swept by `roundtrip` and `schedulers`.
    pub steps: Vec<usize>,
    pub out: PathBuf,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub policy: PolicySection,
    pub ablation: AblationSection,
    pub theorems: TheoremSection,
    pub restore: RestoreSection,
    pub invariance: InvarianceSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 50,
            steps: (1..=10).map(|i| i * 10).collect(),
            out: PathBuf::from("polaris-out"),
            schedule: ScheduleSection::default(),
            model: ModelSection::default(),
            policy: PolicySection::default(),
            ablation: AblationSection::default(),
            theorems: TheoremSection::default(),
            restore: RestoreSection::default(),
            invariance: InvarianceSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            t_train: DEFAULT_T_TRAIN,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Random two-component family parameters, redrawn per instance seed.
    pub dim: usize,
    pub separation: f64,
    pub var_lo: f64,
    pub var_hi: f64,
    pub cov_ratio: f64,
    pub weight: f64,
    /// Fixed mixture; when present it replaces the random family.
    pub components: Vec<ComponentSpec>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let f = PairFamily::default();
        Self {
            dim: f.dim,
            separation: f.separation,
            var_lo: f.var_lo,
            var_hi: f.var_hi,
            cov_ratio: f.cov_ratio,
            weight: f.weight,
            components: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Rows of the lower Cholesky factor of the covariance.
    pub cholesky: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub omega0: f64,
    pub guard: f64,
    /// Scale of the fixed-guidance baseline.
    pub fixed: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            omega0: DEFAULT_OMEGA0,
            guard: DEFAULT_GUARD,
            fixed: 7.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub steps: usize,
    pub seeds: usize,
    pub omega0_grid: Vec<f64>,
    pub random_lo: f64,
    pub random_hi: f64,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            steps: 50,
            seeds: 100,
            omega0_grid: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 7.5, 9.0, 10.0],
            random_lo: 0.0,
            random_hi: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremSection {
    pub dim: usize,
    /// Perturbation size of the exact-rule sweep.
    pub exact_noise: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub points: usize,
    pub eta: f64,
    pub separation: f64,
    pub noise_min: f64,
    pub noise_max: f64,
    /// Input noise at which the two rules are contrasted.
    pub contrast_noise: f64,
    pub trace_steps: usize,
    pub trace_seeds: usize,
}

impl Default for TheoremSection {
    fn default() -> Self {
        Self {
            dim: 16,
            exact_noise: 0.1,
            t_min: 1e-6,
            t_max: 1e-2,
            points: 40,
            eta: 0.5,
            separation: 1.0,
            noise_min: 1e-8,
            noise_max: 1e-3,
            contrast_noise: 1e-4,
            trace_steps: 50,
            trace_seeds: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestoreSection {
    pub tasks: Vec<String>,
    pub methods: Vec<String>,
    pub steps: usize,
    pub seeds: usize,
    pub eta: f64,
    pub lambda: f64,
    pub noise_sigma: f64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub init: String,
}

impl Default for RestoreSection {
    fn default() -> Self {
        Self {
            tasks: ["blur", "downsample2", "mask", "colorize"].map(String::from).to_vec(),
            methods: ["ddnm", "dps", "ddrm"].map(String::from).to_vec(),
            steps: 50,
            seeds: 20,
            eta: DEFAULT_ETA,
            lambda: DEFAULT_LAMBDA,
            noise_sigma: 0.0,
            channels: 3,
            height: 8,
            width: 8,
            init: RestoreInit::Inversion.name().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvarianceSection {
    pub omega: f64,
    pub steps: usize,
    pub seeds: usize,
    pub spaces: Vec<String>,
}

impl Default for InvarianceSection {
    fn default() -> Self {
        Self {
            omega: 7.5,
            steps: 20,
            seeds: 100,
            spaces: FieldSpace::ALL.iter().map(|s| s.name().to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Dump per-step trajectory CSV and binary files for the first seed of each run.
    pub trajectories: bool,
}

/// Model source resolved from the config.
#[derive(Debug, Clone)]
pub enum ModelSource {
    Family(PairFamily),
    Fixed(AnalyticModel),
}

fn positive(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::config(key, "must be at least 1"))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(toml_key(&e, text), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        positive("seeds", self.seeds)?;
        if self.steps.is_empty() {
            return Err(Error::config("steps", "needs at least one step count"));
        }
        let sched = self.noise_schedule()?;
        for &t in &self.steps {
            sched.subsample(t)?;
        }
        self.model_source()?;
        self.polaris_policy().validate()?;
        ScalePolicy::Fixed(self.policy.fixed).validate()?;
        positive("ablation.seeds", self.ablation.seeds)?;
        sched
            .subsample(self.ablation.steps)
            .map_err(|_| Error::config("ablation.steps", "out of range"))?;
        if self.ablation.omega0_grid.is_empty() {
            return Err(Error::config("ablation.omega0_grid", "needs at least one value"));
        }
        ScalePolicy::RandomUniform {
            lo: self.ablation.random_lo,
            hi: self.ablation.random_hi,
            seed: 0,
        }
        .validate()
        .map_err(|_| Error::config("ablation.random_hi", "need random_lo < random_hi"))?;
        self.validate_theorems()?;
        self.restore_tasks()?;
        self.restore_methods()?;
        self.restore_init()?;
        positive("restore.seeds", self.restore.seeds)?;
        sched
            .subsample(self.restore.steps)
            .map_err(|_| Error::config("restore.steps", "out of range"))?;
        positive("invariance.seeds", self.invariance.seeds)?;
        sched
            .subsample(self.invariance.steps)
            .map_err(|_| Error::config("invariance.steps", "out of range"))?;
        self.invariance_spaces()?;
        Ok(())
    }

    fn validate_theorems(&self) -> Result<()> {
        let t = &self.theorems;
        positive("theorems.dim", t.dim)?;
        if t.points < 2 {
            return Err(Error::config("theorems.points", "needs at least 2"));
        }
        if !(t.t_min > 0.0 && t.t_max > t.t_min) {
            return Err(Error::config("theorems.t_max", "need 0 < t_min < t_max"));
        }
        if !(t.exact_noise >= 0.0) {
            return Err(Error::config("theorems.exact_noise", "must be >= 0"));
        }
        if !(t.eta > 0.0) {
            return Err(Error::config("theorems.eta", "must be > 0"));
        }
        if t.separation < t.eta {
            return Err(Error::config("theorems.separation", "must be >= eta"));
        }
        if !(t.noise_min > 0.0 && t.noise_max > t.noise_min && t.noise_max <= t.eta / 2.0) {
            return Err(Error::config(
                "theorems.noise_max",
                "need 0 < noise_min < noise_max <= eta/2",
            ));
        }
        if !(t.contrast_noise > 0.0 && t.contrast_noise <= t.eta / 2.0) {
            return Err(Error::config(
                "theorems.contrast_noise",
                "need 0 < contrast_noise <= eta/2",
            ));
        }
        positive("theorems.trace_seeds", t.trace_seeds)?;
        self.noise_schedule()?
            .subsample(t.trace_steps)
            .map_err(|_| Error::config("theorems.trace_steps", "out of range"))?;
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule.t_train, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn family(&self) -> PairFamily {
        let m = &self.model;
        PairFamily {
            dim: m.dim,
            separation: m.separation,
            var_lo: m.var_lo,
            var_hi: m.var_hi,
            cov_ratio: m.cov_ratio,
            weight: m.weight,
        }
    }

    pub fn model_source(&self) -> Result<ModelSource> {
        if self.model.components.is_empty() {
            let fam = self.family();
            AnalyticModel::random_pair(&mut crate::rng::keyed(0, 0), &fam)?;
            crate::experiment::latent_shape(fam.dim)?;
            return Ok(ModelSource::Family(fam));
        }
        let comps = self
            .model
            .components
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let d = c.mean.len();
                if c.cholesky.len() != d || c.cholesky.iter().any(|r| r.len() != d) {
                    return Err(Error::config(
                        format!("model.components[{i}].cholesky"),
                        format!("must be {d} rows of {d} entries"),
                    ));
                }
                let chol = DMatrix::from_fn(d, d, |r, q| c.cholesky[r][q]);
                GaussianComponent::from_cholesky(c.weight, DVector::from_column_slice(&c.mean), &chol)
                    .map_err(|e| Error::config(format!("model.components[{i}]"), e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let model = AnalyticModel::new(comps).map_err(|e| Error::config("model.components", e.to_string()))?;
        crate::experiment::latent_shape(crate::oracle::NoisePredictor::dim(&model))?;
        Ok(ModelSource::Fixed(model))
    }

    pub fn polaris_policy(&self) -> ScalePolicy {
        ScalePolicy::PolarisRobust {
            omega0: self.policy.omega0,
            guard: self.policy.guard,
        }
    }

    pub fn restore_tasks(&self) -> Result<Vec<RestoreTask>> {
        self.restore
            .tasks
            .iter()
            .map(|t| RestoreTask::parse(t).ok_or_else(|| Error::config("restore.tasks", format!("unknown task `{t}`"))))
            .collect()
    }

    pub fn restore_methods(&self) -> Result<Vec<RestoreMethod>> {
        self.restore
            .methods
            .iter()
            .map(|m| {
                RestoreMethod::parse(m).ok_or_else(|| Error::config("restore.methods", format!("unknown method `{m}`")))
            })
            .collect()
    }

    pub fn restore_init(&self) -> Result<RestoreInit> {
        RestoreInit::parse(&self.restore.init)
            .ok_or_else(|| Error::config("restore.init", format!("unknown init `{}`", self.restore.init)))
    }

    pub fn invariance_spaces(&self) -> Result<Vec<FieldSpace>> {
        if self.invariance.spaces.is_empty() {
            return Err(Error::config("invariance.spaces", "needs at least one space"));
        }
        self.invariance
            .spaces
            .iter()
            .map(|s| {
                FieldSpace::parse(s).ok_or_else(|| Error::config("invariance.spaces", format!("unknown space `{s}`")))
            })
            .collect()
    }
}

/// Best-effort name of the key an error points at: the text left of `=` on its line.
fn toml_key(err: &toml::de::Error, text: &str) -> String {
    err.span()
        .and_then(|span| {
            let start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
            let line = text[start..].lines().next()?;
            line.split_once('=').map(|(k, _)| k.trim().to_string())
        })
        .filter(|k| !k.is_empty())
        .unwrap_or_else(|| "config".to_string())
}

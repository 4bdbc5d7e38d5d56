//! The sweep commands. Each fans its (seed, grid point) units out with
//! [`map_collect`](crate::parallel::map_collect) and writes CSVs in unit order.

use std::path::{Path, PathBuf};

use super::config::{ExperimentConfig, ModelSource};
use super::output::{mean_std, quality_cells, real, summarize, CsvTable, Report, QUALITY_COLUMNS};
use super::svg::{Chart, Series};
use crate::error::{Error, Result};
use crate::experiment::{latent_shape, source_condition, Instance, Method};
use crate::guidance::{ReplayOrder, ScalePolicy};
use crate::metrics::Quality;
use crate::oracle::{AnalyticModel, NoisePredictor};
use crate::parallel::map_collect;
use crate::param::{check_fixed_scale_invariance, compare_polaris_spaces};
use crate::pipeline::{invert, LatentState, RoundTrip};
use crate::restore::{run_restoration, LinearMeasurement, RestoreConfig, RestoreProblem};
use crate::rng::{self, Stream};
use crate::schedule::NoiseSchedule;
use crate::theoremlab::{
    exact_error_curve, log_space, loglog_slope, magnitude_ratio_trace, robust_error_curve, robust_error_vs_separation,
    ExactTemplate, RobustTemplate,
};

/// A validated config bound to an output directory.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub svg: bool,
    schedule: NoiseSchedule,
    source: ModelSource,
}

impl Context {
    pub fn new(config: ExperimentConfig, svg: bool) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            schedule: config.noise_schedule()?,
            source: config.model_source()?,
            out: config.out.clone(),
            svg,
            config,
        })
    }

    fn seeds(&self, count: usize) -> Vec<u64> {
        (0..count as u64).map(|i| self.config.seed.wrapping_add(i)).collect()
    }

    fn instance(&self, seed: u64) -> Result<Instance> {
        match &self.source {
            ModelSource::Family(f) => Instance::draw(seed, f),
            ModelSource::Fixed(m) => Instance::from_model(seed, m.clone()),
        }
    }

    fn prepare(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }

    fn chart(&self, report: &mut Report, name: &str, chart: Chart) -> Result<()> {
        if self.svg {
            report.write_text(&self.out, name, &chart.render())?;
        }
        Ok(())
    }

    fn polaris(&self) -> Method {
        Method::new("polaris", self.config.polaris_policy())
    }
}

fn collect<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

struct Run {
    quality: Quality,
    trip: RoundTrip,
}

fn reconstruct(ctx: &Context, inst: &Instance, method: &Method, steps: usize) -> Result<Run> {
    let trip = inst.reconstruct(&method.policy_for(inst.seed), method.order, steps, &ctx.schedule)?;
    Ok(Run {
        quality: inst.quality(&trip.reconstruction)?,
        trip,
    })
}

/// Mean MSE per key, keyed by the string in column `series` and plotted against column `x`.
fn series_of(summary: &CsvTable, series: usize, x: usize) -> Vec<Series> {
    let mse = summary
        .header
        .iter()
        .position(|h| h == "mse_mean")
        .expect("summary table");
    let mut out: Vec<Series> = Vec::new();
    for row in &summary.rows {
        let point = (row[x].parse().unwrap_or(f64::NAN), row[mse].parse().unwrap_or(f64::NAN));
        match out.iter_mut().find(|s| s.name == row[series]) {
            Some(s) => s.points.push(point),
            None => out.push(Series::new(row[series].clone(), vec![point])),
        }
    }
    out
}

fn mse_chart(title: &str, x_label: &str, log_x: bool, series: Vec<Series>) -> Chart {
    Chart {
        title: title.into(),
        x_label: x_label.into(),
        y_label: "mean MSE".into(),
        log_x,
        log_y: true,
        series,
    }
}

/// Runs `methods` over the `steps x seeds` grid. Rows come back method-major.
fn method_grid(
    ctx: &Context,
    methods: &[Method],
    steps: &[usize],
    seeds: &[u64],
    report: &mut Report,
) -> Result<Vec<(String, usize, u64, Quality)>> {
    let units: Vec<(usize, u64)> = steps.iter().flat_map(|&t| seeds.iter().map(move |&s| (t, s))).collect();
    let runs = collect(map_collect(&units, |&(t, seed)| {
        let inst = ctx.instance(seed)?;
        methods
            .iter()
            .map(|m| {
                let r = reconstruct(ctx, &inst, m, t)?;
                Ok((r.quality, r.trip.diverged()))
            })
            .collect::<Result<Vec<_>>>()
    }))?;
    let mut rows = Vec::with_capacity(units.len() * methods.len());
    for (mi, m) in methods.iter().enumerate() {
        for (&(t, seed), per_unit) in units.iter().zip(&runs) {
            let (q, diverged) = per_unit[mi];
            if diverged {
                report.diverged.push(format!("{} T={t} seed={seed}", m.name));
            }
            rows.push((m.name.clone(), t, seed, q));
        }
    }
    Ok(rows)
}

fn grid_tables(rows: &[(String, usize, u64, Quality)], first: &str) -> (CsvTable, CsvTable) {
    let mut header = vec![first, "steps", "seed"];
    header.extend(QUALITY_COLUMNS);
    let mut table = CsvTable::new(&header);
    let mut keyed = Vec::with_capacity(rows.len());
    for (name, t, seed, q) in rows {
        let mut row = vec![name.clone(), t.to_string(), seed.to_string()];
        row.extend(quality_cells(q));
        table.push(row);
        keyed.push((vec![name.clone(), t.to_string()], *q));
    }
    (table, summarize(&[first, "steps"], &keyed))
}

/// Paired wins of the first method over the second, per step count.
fn wins_table(rows: &[(String, usize, u64, Quality)], a: &str, b: &str, steps: &[usize]) -> CsvTable {
    let mut table = CsvTable::new(&[
        "steps",
        "n",
        &format!("{a}_wins"),
        &format!("{a}_mse_mean"),
        &format!("{b}_mse_mean"),
    ]);
    for &t in steps {
        let pick = |name: &str| -> Vec<f64> {
            rows.iter()
                .filter(|r| r.0 == name && r.1 == t)
                .map(|r| r.3.mse)
                .collect()
        };
        let (xa, xb) = (pick(a), pick(b));
        let wins = xa.iter().zip(&xb).filter(|(p, q)| p < q).count();
        table.push(vec![
            t.to_string(),
            xa.len().to_string(),
            wins.to_string(),
            real(mean_std(&xa).0),
            real(mean_std(&xb).0),
        ]);
    }
    table
}

/// POLARIS against the fixed-scale baseline over the step grid.
///
/// Writes `roundtrip.csv` (method, steps, seed, mse, psnr, ssim), `roundtrip_summary.csv`
/// and `roundtrip_wins.csv`.
pub fn cmd_roundtrip(ctx: &Context) -> Result<Report> {
    let out = ctx.prepare()?;
    let cfg = &ctx.config;
    let methods = [
        ctx.polaris(),
        Method::new("fixed", ScalePolicy::Fixed(cfg.policy.fixed)),
    ];
    let seeds = ctx.seeds(cfg.seeds);
    let mut report = Report::default();
    let rows = method_grid(ctx, &methods, &cfg.steps, &seeds, &mut report)?;
    let (table, summary) = grid_tables(&rows, "method");
    report.write(out, "roundtrip.csv", &table)?;
    report.write(out, "roundtrip_summary.csv", &summary)?;
    report.write(
        out,
        "roundtrip_wins.csv",
        &wins_table(&rows, "polaris", "fixed", &cfg.steps),
    )?;
    ctx.chart(
        &mut report,
        "roundtrip.svg",
        mse_chart("Round-trip reconstruction", "steps", false, series_of(&summary, 0, 1)),
    )?;
    if cfg.output.trajectories {
        dump_trajectories(ctx, &methods, &mut report)?;
    }
    Ok(report)
}

/// Inversion and sampling trajectories of the first seed, as CSV and binary dumps.
fn dump_trajectories(ctx: &Context, methods: &[Method], report: &mut Report) -> Result<()> {
    let dir = ctx.out.join("trajectories");
    std::fs::create_dir_all(&dir)?;
    let inst = ctx.instance(ctx.config.seed)?;
    for &t in &ctx.config.steps {
        let map = ctx.schedule.subsample(t)?;
        for m in methods {
            let run = reconstruct(ctx, &inst, m, t)?;
            for (stage, traj) in [("inversion", &run.trip.inversion), ("sampling", &run.trip.sampling)] {
                let stem = format!("{}_T{t}_{stage}", m.name);
                let csv_path = dir.join(format!("{stem}.csv"));
                traj.write_csv(std::fs::File::create(&csv_path)?, &map)?;
                let bin_path = dir.join(format!("{stem}.bin"));
                traj.write_binary(std::io::BufWriter::new(std::fs::File::create(&bin_path)?))?;
                report.files.extend([csv_path, bin_path]);
            }
        }
    }
    Ok(())
}

/// Initial-scale ablation: POLARIS with each `omega0` of the grid.
///
/// Writes `ablate_omega0.csv` (omega0, seed, mse, psnr, ssim), `ablate_omega0_summary.csv`
/// and `ablate_omega0_spread.csv` (statistic, value).
pub fn cmd_ablate_omega0(ctx: &Context) -> Result<Report> {
    let out = ctx.prepare()?;
    let ab = &ctx.config.ablation;
    let seeds = ctx.seeds(ab.seeds);
    let runs = collect(map_collect(&seeds, |&seed| {
        let inst = ctx.instance(seed)?;
        ab.omega0_grid
            .iter()
            .map(|&omega0| {
                let m = Method::new(
                    "polaris",
                    ScalePolicy::PolarisRobust {
                        omega0,
                        guard: ctx.config.policy.guard,
                    },
                );
                let r = reconstruct(ctx, &inst, &m, ab.steps)?;
                Ok((r.quality, r.trip.diverged()))
            })
            .collect::<Result<Vec<_>>>()
    }))?;
    let mut report = Report::default();
    let mut header = vec!["omega0", "seed"];
    header.extend(QUALITY_COLUMNS);
    let mut table = CsvTable::new(&header);
    let mut keyed = Vec::new();
    for (gi, &omega0) in ab.omega0_grid.iter().enumerate() {
        for (&seed, per_seed) in seeds.iter().zip(&runs) {
            let (q, diverged) = per_seed[gi];
            if diverged {
                report.diverged.push(format!("omega0={omega0} seed={seed}"));
            }
            let mut row = vec![real(omega0), seed.to_string()];
            row.extend(quality_cells(&q));
            table.push(row);
            keyed.push((vec![real(omega0)], q));
        }
    }
    let summary = summarize(&["omega0"], &keyed);
    let col = |name: &str| -> Vec<f64> {
        let i = summary.header.iter().position(|h| h == name).expect("summary column");
        summary.rows.iter().map(|r| r[i].parse().unwrap_or(f64::NAN)).collect()
    };
    let mut spread = CsvTable::new(&["statistic", "value"]);
    for (metric, values) in [("mse", col("mse_mean")), ("ssim", col("ssim_mean"))] {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let grand = mean_std(&values).0;
        spread.push(vec![format!("{metric}_min_mean"), real(lo)]);
        spread.push(vec![format!("{metric}_max_mean"), real(hi)]);
        spread.push(vec![format!("{metric}_grand_mean"), real(grand)]);
        spread.push(vec![format!("{metric}_relative_spread"), real((hi - lo) / grand)]);
    }
    report.write(out, "ablate_omega0.csv", &table)?;
    report.write(out, "ablate_omega0_summary.csv", &summary)?;
    report.write(out, "ablate_omega0_spread.csv", &spread)?;
    let points: Vec<(f64, f64)> = ab.omega0_grid.iter().copied().zip(col("mse_mean")).collect();
    ctx.chart(
        &mut report,
        "ablate_omega0.svg",
        mse_chart(
            "Initial scale ablation",
            "omega0",
            false,
            vec![Series::new("polaris", points)],
        ),
    )?;
    Ok(report)
}

/// POLARIS against scales drawn uniformly at random.
///
/// Writes `random_omega.csv` (method, seed, mse, psnr, ssim), `random_omega_summary.csv`
/// and `random_omega_scales.csv` (seed, step, omega) with every drawn scale.
pub fn cmd_random_omega(ctx: &Context) -> Result<Report> {
    let out = ctx.prepare()?;
    let ab = &ctx.config.ablation;
    let seeds = ctx.seeds(ab.seeds);
    let methods = [
        ctx.polaris(),
        Method::new(
            "random",
            ScalePolicy::RandomUniform {
                lo: ab.random_lo,
                hi: ab.random_hi,
                seed: rng::stream_key(ctx.config.seed, Stream::RandomScale as u64),
            },
        ),
    ];
    let runs = collect(map_collect(&seeds, |&seed| {
        let inst = ctx.instance(seed)?;
        methods
            .iter()
            .map(|m| reconstruct(ctx, &inst, m, ab.steps))
            .collect::<Result<Vec<_>>>()
    }))?;
    let mut report = Report::default();
    let mut header = vec!["method", "seed"];
    header.extend(QUALITY_COLUMNS);
    let mut table = CsvTable::new(&header);
    let mut keyed = Vec::new();
    for (mi, m) in methods.iter().enumerate() {
        for (&seed, per_seed) in seeds.iter().zip(&runs) {
            let r = &per_seed[mi];
            if r.trip.diverged() {
                report.diverged.push(format!("{} seed={seed}", m.name));
            }
            let mut row = vec![m.name.clone(), seed.to_string()];
            row.extend(quality_cells(&r.quality));
            table.push(row);
            keyed.push((vec![m.name.clone()], r.quality));
        }
    }
    let mut scales = CsvTable::new(&["seed", "step", "omega"]);
    for (&seed, per_seed) in seeds.iter().zip(&runs) {
        for (step, &w) in per_seed[1].trip.inversion.omegas.omegas().iter().enumerate() {
            scales.push(vec![seed.to_string(), step.to_string(), real(w)]);
        }
    }
    let wins = seeds
        .iter()
        .zip(&runs)
        .filter(|(_, r)| r[0].quality.mse < r[1].quality.mse)
        .count();
    let mut paired = CsvTable::new(&["n", "polaris_wins"]);
    paired.push(vec![seeds.len().to_string(), wins.to_string()]);
    report.write(out, "random_omega.csv", &table)?;
    report.write(out, "random_omega_summary.csv", &summarize(&["method"], &keyed))?;
    report.write(out, "random_omega_wins.csv", &paired)?;
    report.write(out, "random_omega_scales.csv", &scales)?;
    Ok(report)
}

/// Scale schedulers over the step grid: POLARIS replayed forward and reversed, cosine
/// decay from 1 to 0, and a fixed scale of 1.
///
/// Writes `schedulers.csv` (schedule, steps, seed, mse, psnr, ssim) and
/// `schedulers_summary.csv`.
pub fn cmd_schedulers(ctx: &Context) -> Result<Report> {
    let out = ctx.prepare()?;
    let cfg = &ctx.config;
    let methods = [
        Method::new("forward", cfg.polaris_policy()).with_order(ReplayOrder::Forward),
        Method::new("reverse", cfg.polaris_policy()),
        Method::new("cosine", ScalePolicy::CosineDecay { start: 1.0, end: 0.0 }),
        Method::new("fixed", ScalePolicy::Fixed(1.0)),
    ];
    let seeds = ctx.seeds(cfg.seeds);
    let mut report = Report::default();
    let rows = method_grid(ctx, &methods, &cfg.steps, &seeds, &mut report)?;
    let (table, summary) = grid_tables(&rows, "schedule");
    report.write(out, "schedulers.csv", &table)?;
    report.write(out, "schedulers_summary.csv", &summary)?;
    ctx.chart(
        &mut report,
        "schedulers.svg",
        mse_chart("Scale schedulers", "steps", false, series_of(&summary, 0, 1)),
    )?;
    Ok(report)
}

/// Perturbation studies of the exact and robust rules plus the magnitude-ratio trace.
///
/// Writes `theorem1.csv` (seed, t, error), `theorem2.csv` (seed, noise,
/// perturbation_norm, error), `theorem2_separation.csv` (seed, separation, error),
/// `magnitude_ratio.csv` (seed, step, a_norm, hist_norm, ratio2) and
/// `theorems_summary.csv` (statistic, value). The contrast ratio divides the smallest
/// per-seed worst case of the exact rule by the largest robust-rule error, both at
/// `contrast_noise`.
pub fn cmd_theorems(ctx: &Context) -> Result<Report> {
    let out = ctx.prepare()?;
    let th = &ctx.config.theorems;
    let seeds = ctx.seeds(ctx.config.seeds);
    let exact = ExactTemplate {
        dim: th.dim,
        noise: th.exact_noise,
        orthogonal: false,
    };
    let robust = RobustTemplate {
        dim: th.dim,
        eta: th.eta,
        separation: th.separation,
        guard: 0.0,
    };
    // Both rules see the same input noise in the contrast.
    let contrast_exact = ExactTemplate {
        noise: th.contrast_noise,
        ..exact
    };
    let ts = log_space(th.t_min, th.t_max, th.points);
    let noises = log_space(th.noise_min, th.noise_max, th.points);
    let seps = log_space(th.eta, 10.0 * th.eta, th.points);

    let curves = collect(map_collect(&seeds, |&seed| {
        let e = exact_error_curve(&exact, &ts, seed)?;
        let r = robust_error_curve(&robust, &noises, seed)?;
        let s = robust_error_vs_separation(&robust, &seps, th.contrast_noise, seed)?;
        let c = robust_error_curve(&robust, &[th.contrast_noise], seed)?[0].1;
        let ce = exact_error_curve(&contrast_exact, &ts, seed)?;
        Ok((e, r, s, (c, ce.iter().map(|p| p.1).fold(0.0, f64::max))))
    }))?;

    let mut t1 = CsvTable::new(&["seed", "t", "error"]);
    let mut t2 = CsvTable::new(&["seed", "noise", "perturbation_norm", "error"]);
    let mut t3 = CsvTable::new(&["seed", "separation", "error"]);
    let (mut s1, mut s2, mut worst, mut contrast) = (Vec::new(), Vec::new(), f64::INFINITY, 0.0f64);
    for (&seed, (e, r, s, c)) in seeds.iter().zip(&curves) {
        for &(t, err) in e {
            t1.push(vec![seed.to_string(), real(t), real(err)]);
        }
        for (&noise, &(norm, err)) in noises.iter().zip(r) {
            t2.push(vec![seed.to_string(), real(noise), real(norm), real(err)]);
        }
        for &(sep, err) in s {
            t3.push(vec![seed.to_string(), real(sep), real(err)]);
        }
        s1.push(loglog_slope(e)?);
        s2.push(loglog_slope(r)?);
        worst = worst.min(c.1);
        contrast = contrast.max(c.0);
    }

    let trace_seeds = ctx.seeds(th.trace_seeds);
    let map = ctx.schedule.subsample(th.trace_steps)?;
    let policy = ctx.config.polaris_policy();
    let traces = collect(map_collect(&trace_seeds, |&seed| {
        let inst = ctx.instance(seed)?;
        let traj = invert(
            &LatentState::new(inst.x0.clone(), 0),
            &inst.model,
            &source_condition(),
            &policy,
            &ctx.schedule,
            &map,
        )?;
        Ok(magnitude_ratio_trace(&traj))
    }))?;
    let mut t4 = CsvTable::new(&["seed", "step", "a_norm", "hist_norm", "ratio2"]);
    let mut ratios = Vec::new();
    for (&seed, rows) in trace_seeds.iter().zip(&traces) {
        for r in rows {
            t4.push(vec![
                seed.to_string(),
                r.step.to_string(),
                real(r.a_norm),
                real(r.hist_norm),
                real(r.ratio2),
            ]);
            ratios.push(r.ratio2);
        }
    }
    ratios.sort_by(f64::total_cmp);

    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (s1_lo, s1_hi) = (
        s1.iter().copied().fold(f64::INFINITY, f64::min),
        s1.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let (s2_lo, s2_hi) = (
        s2.iter().copied().fold(f64::INFINITY, f64::min),
        s2.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let mut summary = CsvTable::new(&["statistic", "value"]);
    for (k, v) in [
        ("exact_slope_median", median(&mut s1)),
        ("exact_slope_min", s1_lo),
        ("exact_slope_max", s1_hi),
        ("robust_slope_median", median(&mut s2)),
        ("robust_slope_min", s2_lo),
        ("robust_slope_max", s2_hi),
        ("exact_worst_error_at_contrast_noise", worst),
        ("robust_error_at_contrast_noise", contrast),
        ("contrast_ratio", worst / contrast),
        (
            "ratio2_median",
            ratios.get(ratios.len() / 2).copied().unwrap_or(f64::NAN),
        ),
        (
            "ratio2_fraction_above_1",
            ratios.iter().filter(|&&r| r > 1.0).count() as f64 / ratios.len().max(1) as f64,
        ),
    ] {
        summary.push(vec![k.to_string(), real(v)]);
    }

    let mut report = Report::default();
    report.write(out, "theorem1.csv", &t1)?;
    report.write(out, "theorem2.csv", &t2)?;
    report.write(out, "theorem2_separation.csv", &t3)?;
    report.write(out, "magnitude_ratio.csv", &t4)?;
    report.write(out, "theorems_summary.csv", &summary)?;
    if ctx.svg {
        let first = &curves[0];
        ctx.chart(
            &mut report,
            "theorem1.svg",
            Chart {
                title: "Exact rule error".into(),
                x_label: "|b*|".into(),
                y_label: "|E|".into(),
                log_x: true,
                log_y: true,
                series: vec![Series::new(format!("seed {}", seeds[0]), first.0.clone())],
            },
        )?;
        ctx.chart(
            &mut report,
            "theorem2.svg",
            Chart {
                title: "Robust rule error".into(),
                x_label: "|perturbation|".into(),
                y_label: "|E|".into(),
                log_x: true,
                log_y: true,
                series: vec![Series::new(format!("seed {}", seeds[0]), first.1.clone())],
            },
        )?;
        let mean_ratio: Vec<(f64, f64)> = (0..traces[0].len())
            .map(|k| {
                let v: Vec<f64> = traces.iter().filter_map(|t| t.get(k)).map(|r| r.ratio2).collect();
                (traces[0][k].step as f64, mean_std(&v).0)
            })
            .collect();
        ctx.chart(
            &mut report,
            "magnitude_ratio.svg",
            Chart {
                title: "Current-step to history magnitude".into(),
                x_label: "step".into(),
                y_label: "mean ratio^2".into(),
                log_x: false,
                log_y: true,
                series: vec![Series::new("ratio2", mean_ratio)],
            },
        )?;
    }
    Ok(report)
}

fn restore_model(ctx: &Context, seed: u64, dim: usize) -> Result<AnalyticModel> {
    match &ctx.source {
        ModelSource::Family(f) => {
            let fam = crate::oracle::PairFamily { dim, ..*f };
            AnalyticModel::random_pair(&mut rng::stream(seed, Stream::Model), &fam)
        }
        ModelSource::Fixed(m) if m.dim() == dim => Ok(m.clone()),
        ModelSource::Fixed(m) => Err(Error::config(
            "restore.channels",
            format!("grid has {dim} entries but the fixed model has dimension {}", m.dim()),
        )),
    }
}

/// Restoration tasks under each correction method, with a fixed scale of 1 and POLARIS.
///
/// Writes `restore.csv` (task, method, policy, seed, mse, psnr, ssim) and
/// `restore_summary.csv`.
pub fn cmd_restore(ctx: &Context) -> Result<Report> {
    let out = ctx.prepare()?;
    let rc = &ctx.config.restore;
    let tasks = ctx.config.restore_tasks()?;
    let methods = ctx.config.restore_methods()?;
    let init = ctx.config.restore_init()?;
    let shape = (rc.channels, rc.height, rc.width);
    let dim = rc.channels * rc.height * rc.width;
    let policies = [
        ("fixed", ScalePolicy::Fixed(1.0)),
        ("polaris", ctx.config.polaris_policy()),
    ];
    let map = ctx.schedule.subsample(rc.steps)?;
    let operators = tasks
        .iter()
        .map(|t| {
            t.operator(shape)
                .map_err(|e| Error::config("restore.tasks", format!("{t}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let seeds = ctx.seeds(rc.seeds);
    let cond = source_condition();
    let runs = collect(map_collect(&seeds, |&seed| {
        let model = restore_model(ctx, seed, dim)?;
        let truth = model.sample(&mut rng::stream(seed, Stream::CleanSample), &cond)?;
        let mut rows = Vec::new();
        for op in &operators {
            let meas = LinearMeasurement::observe(
                op.clone(),
                &truth,
                rc.noise_sigma,
                &mut rng::stream(seed, Stream::Measurement),
            )?;
            let problem = RestoreProblem {
                meas: &meas,
                model: &model,
                cond: &cond,
                truth: &truth,
                shape,
            };
            for &method in &methods {
                let config = RestoreConfig {
                    eta: rc.eta,
                    lambda: rc.lambda,
                    ..RestoreConfig::new(method).with_init(init)
                };
                for (_, policy) in &policies {
                    let o = run_restoration(&problem, &config, policy, &ctx.schedule, &map, seed)?;
                    rows.push((o.quality, o.diverged));
                }
            }
        }
        Ok(rows)
    }))?;
    let mut report = Report::default();
    let mut header = vec!["task", "method", "policy", "seed"];
    header.extend(QUALITY_COLUMNS);
    let mut table = CsvTable::new(&header);
    let mut keyed = Vec::new();
    let mut k = 0;
    for task in &tasks {
        for method in &methods {
            for (pname, _) in &policies {
                for (&seed, per_seed) in seeds.iter().zip(&runs) {
                    let (q, diverged) = per_seed[k];
                    if diverged {
                        report
                            .diverged
                            .push(format!("{task} {} {pname} seed={seed}", method.name()));
                    }
                    let mut row = vec![
                        task.to_string(),
                        method.name().to_string(),
                        pname.to_string(),
                        seed.to_string(),
                    ];
                    row.extend(quality_cells(&q));
                    table.push(row);
                    keyed.push((vec![task.to_string(), method.name().to_string(), pname.to_string()], q));
                }
                k += 1;
            }
        }
    }
    report.write(out, "restore.csv", &table)?;
    report.write(
        out,
        "restore_summary.csv",
        &summarize(&["task", "method", "policy"], &keyed),
    )?;
    Ok(report)
}

/// Fixed-scale invariance across field spaces, and the per-space POLARIS comparison.
///
/// Writes `invariance.csv` (seed, omega, max_deviation), `invariance_spaces.csv`
/// (seed, space, step, omega, deviation) and `invariance_summary.csv`.
pub fn cmd_invariance(ctx: &Context) -> Result<Report> {
    let out = ctx.prepare()?;
    let inv = &ctx.config.invariance;
    let spaces = ctx.config.invariance_spaces()?;
    let seeds = ctx.seeds(inv.seeds);
    let map = ctx.schedule.subsample(inv.steps)?;
    let policy = ctx.config.polaris_policy();
    let cond = source_condition();
    let runs = collect(map_collect(&seeds, |&seed| {
        let inst = ctx.instance(seed)?;
        let fixed = check_fixed_scale_invariance(&inst.model, &inst.x0, &cond, inv.omega, &ctx.schedule, &map)?;
        let comps = compare_polaris_spaces(&inst.model, &inst.x0, &cond, &policy, &ctx.schedule, &map)?;
        let shape = latent_shape(inst.x0.len())?;
        let comps = comps
            .into_iter()
            .filter(|c| spaces.contains(&c.space))
            .map(|c| {
                let q = Quality::latent(inst.x0.as_slice(), c.reconstruction.as_slice(), shape)?;
                Ok((c, q))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((fixed, comps))
    }))?;
    let mut fixed = CsvTable::new(&["seed", "omega", "max_deviation"]);
    let mut per_step = CsvTable::new(&["seed", "space", "step", "omega", "deviation"]);
    for (&seed, (dev, comps)) in seeds.iter().zip(&runs) {
        fixed.push(vec![seed.to_string(), real(inv.omega), real(*dev)]);
        for (c, _) in comps {
            for (step, (w, d)) in c.omegas.iter().zip(&c.deviations).enumerate() {
                per_step.push(vec![
                    seed.to_string(),
                    c.space.name().into(),
                    step.to_string(),
                    real(*w),
                    real(*d),
                ]);
            }
        }
    }
    let mut summary = CsvTable::new(&["space", "n", "final_deviation_mean", "max_deviation", "mse_mean"]);
    for space in &spaces {
        let picked: Vec<_> = runs
            .iter()
            .flat_map(|(_, comps)| comps.iter().filter(|(c, _)| c.space == *space))
            .collect();
        let finals: Vec<f64> = picked
            .iter()
            .map(|(c, _)| c.deviations.last().copied().unwrap_or(0.0))
            .collect();
        let worst = picked
            .iter()
            .flat_map(|(c, _)| c.deviations.iter().copied())
            .fold(0.0, f64::max);
        let mses: Vec<f64> = picked.iter().map(|(_, q)| q.mse).collect();
        summary.push(vec![
            space.name().into(),
            finals.len().to_string(),
            real(mean_std(&finals).0),
            real(worst),
            real(mean_std(&mses).0),
        ]);
    }
    let worst_fixed = runs.iter().map(|r| r.0).fold(0.0, f64::max);
    summary.push(vec![
        format!("fixed{}", inv.omega),
        seeds.len().to_string(),
        real(worst_fixed),
        real(worst_fixed),
        String::new(),
    ]);
    let mut report = Report::default();
    report.write(out, "invariance.csv", &fixed)?;
    report.write(out, "invariance_spaces.csv", &per_step)?;
    report.write(out, "invariance_summary.csv", &summary)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Roundtrip,
    AblateOmega0,
    RandomOmega,
    Schedulers,
    Theorems,
    Restore,
    Invariance,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Roundtrip,
        Command::AblateOmega0,
        Command::RandomOmega,
        Command::Schedulers,
        Command::Theorems,
        Command::Restore,
        Command::Invariance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Roundtrip => "roundtrip",
            Command::AblateOmega0 => "ablate-omega0",
            Command::RandomOmega => "random-omega",
            Command::Schedulers => "schedulers",
            Command::Theorems => "theorems",
            Command::Restore => "restore",
            Command::Invariance => "invariance",
        }
    }

    pub fn run(self, ctx: &Context) -> Result<Report> {
        match self {
            Command::Roundtrip => cmd_roundtrip(ctx),
            Command::AblateOmega0 => cmd_ablate_omega0(ctx),
            Command::RandomOmega => cmd_random_omega(ctx),
            Command::Schedulers => cmd_schedulers(ctx),
            Command::Theorems => cmd_theorems(ctx),
            Command::Restore => cmd_restore(ctx),
            Command::Invariance => cmd_invariance(ctx),
        }
    }
}

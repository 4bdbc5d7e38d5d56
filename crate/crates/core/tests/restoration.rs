//! Paired restoration comparisons on the two-component family.

use polaris::experiment::source_condition;
use polaris::guidance::ScalePolicy;
use polaris::oracle::{AnalyticModel, PairFamily};
use polaris::parallel::map_collect;
use polaris::restore::{run_restoration, LinearMeasurement, RestoreConfig, RestoreMethod, RestoreProblem, RestoreTask};
use polaris::rng::{self, Stream};
use polaris::schedule::NoiseSchedule;

const SHAPE: (usize, usize, usize) = (3, 8, 8);
const TASKS: [RestoreTask; 4] = [
    RestoreTask::Blur,
    RestoreTask::Downsample(2),
    RestoreTask::CenterMask,
    RestoreTask::Colorize,
];

/// MSE for each `(method, policy)` on one seeded instance of `task`.
fn restore_mse(task: RestoreTask, seed: u64, steps: usize, runs: &[(RestoreMethod, ScalePolicy)]) -> Vec<f64> {
    let sched = NoiseSchedule::default_linear();
    let map = sched.subsample(steps).unwrap();
    let fam = PairFamily {
        dim: SHAPE.0 * SHAPE.1 * SHAPE.2,
        ..PairFamily::default()
    };
    let cond = source_condition();
    let model = AnalyticModel::random_pair(&mut rng::stream(seed, Stream::Model), &fam).unwrap();
    let truth = model
        .sample(&mut rng::stream(seed, Stream::CleanSample), &cond)
        .unwrap();
    let meas = LinearMeasurement::observe(
        task.operator(SHAPE).unwrap(),
        &truth,
        0.0,
        &mut rng::stream(seed, Stream::Measurement),
    )
    .unwrap();
    let problem = RestoreProblem {
        meas: &meas,
        model: &model,
        cond: &cond,
        truth: &truth,
        shape: SHAPE,
    };
    runs.iter()
        .map(|(method, policy)| {
            let out = run_restoration(&problem, &RestoreConfig::new(*method), policy, &sched, &map, seed).unwrap();
            assert!(!out.diverged);
            out.quality.mse
        })
        .collect()
}

#[test]
fn ddnm_beats_dps_on_center_mask() {
    let seeds: Vec<u64> = (0..100).collect();
    let runs = [
        (RestoreMethod::Ddnm, ScalePolicy::Fixed(1.0)),
        (RestoreMethod::Dps, ScalePolicy::Fixed(1.0)),
    ];
    let wins = map_collect(&seeds, |&s| {
        let m = restore_mse(RestoreTask::CenterMask, s, 20, &runs);
        m[0] < m[1]
    })
    .into_iter()
    .filter(|&w| w)
    .count();
    assert!(wins >= 80, "DDNM better on {wins}/100 seeds");
}

#[test]
fn restoration_is_seed_deterministic() {
    let runs = [(RestoreMethod::Ddrm, ScalePolicy::polaris())];
    for task in TASKS {
        assert_eq!(restore_mse(task, 3, 5, &runs), restore_mse(task, 3, 5, &runs));
    }
}

/// POLARIS mean MSE at or below the fixed-scale mean for every task and method.
///
/// Does not hold on these models: with exact oracles a fixed scale of 1 samples the exact
/// conditional prior, while POLARIS drifts toward the unconditional prior and the null-space
/// content of the restoration follows the prior. Kept unweakened; run with `--ignored`.
#[test]
#[ignore = "direction not reproduced on analytic models"]
fn polaris_restoration_not_worse_than_fixed() {
    let seeds: Vec<u64> = (0..20).collect();
    let mut failures = Vec::new();
    for task in TASKS {
        for method in RestoreMethod::ALL {
            let runs = [(method, ScalePolicy::Fixed(1.0)), (method, ScalePolicy::polaris())];
            let per_seed = map_collect(&seeds, |&s| restore_mse(task, s, 20, &runs));
            let mean = |i: usize| per_seed.iter().map(|m| m[i]).sum::<f64>() / seeds.len() as f64;
            if mean(1) > mean(0) {
                failures.push(format!(
                    "{task} {}: polaris {:.4e} vs fixed {:.4e}",
                    method.name(),
                    mean(1),
                    mean(0)
                ));
            }
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

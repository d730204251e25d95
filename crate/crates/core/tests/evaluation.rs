//! Exhaustive Pareto-frontier oracle and calibration statistics.

use supernet_core::arch::{ArchSpace, HeadSpec, StageSpec, StemSpec};
use supernet_core::data::{load_dataset, Dataset, DatasetSpec, SyntheticDatasetSpec};
use supernet_core::eval::{
    bn_calibrate, build_frontier, evaluate_subnet, mean_pareto_accuracy, EvalRecord,
};
use supernet_core::schedule::LrSchedule;
use supernet_core::supernet::{count_macs, Supernet};
use supernet_core::train::{run_training, RunnerCfg, ShrinkingPlan, Silent, Strategy};

fn small_space() -> ArchSpace {
    ArchSpace {
        input_channels: 1,
        num_classes: 4,
        stem: StemSpec {
            out_channels: 3,
            kernel: 3,
            stride: 1,
        },
        stages: vec![
            StageSpec {
                max_depth: 2,
                depth_choices: vec![1, 2],
                max_width: 6,
                width_fraction_choices: vec![0.5, 1.0],
                kernel_choices: vec![3],
                stride: 2,
            },
            StageSpec {
                max_depth: 1,
                depth_choices: vec![1],
                max_width: 8,
                width_fraction_choices: vec![0.5, 1.0],
                kernel_choices: vec![3, 5],
                stride: 1,
            },
        ],
        head: HeadSpec { dropout: 0.0 },
        resolution_choices: vec![8],
    }
}

fn dataset() -> Dataset {
    load_dataset(&DatasetSpec::Synthetic(SyntheticDatasetSpec {
        num_classes: 4,
        resolution: 8,
        channels: 1,
        train_samples: 96,
        test_samples: 48,
        noise_sigma: 0.7,
        seed: 21,
    }))
    .unwrap()
}

/// Brute-force frontier: evaluate every config, assign buckets, take the
/// max-accuracy record per bucket. Reimplemented here independently of the
/// library's selection code.
fn brute_force_best(
    records: &[EvalRecord],
    macs_min: u64,
    macs_max: u64,
    buckets: usize,
) -> Vec<Option<EvalRecord>> {
    let width = (macs_max - macs_min) as f64 / buckets as f64;
    let mut best: Vec<Option<EvalRecord>> = vec![None; buckets];
    for r in records {
        let mut b = (((r.macs - macs_min) as f64) / width) as usize;
        if b >= buckets {
            b = buckets - 1;
        }
        let replace = match &best[b] {
            None => true,
            Some(cur) => {
                r.top1 > cur.top1
                    || (r.top1 == cur.top1 && r.macs < cur.macs)
                    || (r.top1 == cur.top1
                        && r.macs == cur.macs
                        && r.config_digest < cur.config_digest)
            }
        };
        if replace {
            best[b] = Some(r.clone());
        }
    }
    best
}

#[test]
fn exhaustive_frontier_matches_brute_force() {
    let d = dataset();
    let space = small_space();
    // A briefly trained net so accuracies are not all-equal chance.
    let mut plan = ShrinkingPlan::new(Strategy::EarlyShrink, 2);
    plan.k = 4;
    let steps = d.steps_per_epoch(16);
    let lr = LrSchedule::cosine_constant_ending(0.1, 2 * steps, 0.05);
    let (state, _) =
        run_training(&space, &d, &plan, &lr, 29, &RunnerCfg { batch_size: 16, ..Default::default() }, &mut Silent)
            .unwrap();
    let mut net = state.net;

    let all = net.space.enumerate_all(64).unwrap();
    let mut records = Vec::new();
    for config in &all {
        bn_calibrate(&mut net, config, &d.train, 16, 3, 4).unwrap();
        records.push(evaluate_subnet(&net, config, &d.test, "test", 16, 4).unwrap());
    }
    let macs_min = count_macs(&net.space, &net.space.a_min()).unwrap();
    let macs_max = count_macs(&net.space, &net.space.a_full()).unwrap();

    let buckets = 4;
    let frontier = build_frontier(records.clone(), macs_min, macs_max, buckets).unwrap();
    let oracle = brute_force_best(&records, macs_min, macs_max, buckets);
    for (a, b) in frontier.selected.iter().zip(&oracle) {
        assert_eq!(
            a.as_ref().map(|r| (&r.config_digest, r.macs)),
            b.as_ref().map(|r| (&r.config_digest, r.macs))
        );
    }

    // The AUC summary matches a hand trapezoid in f64 to 1e-9.
    let pts: Vec<(u64, f64)> = frontier
        .selected
        .iter()
        .flatten()
        .map(|r| (r.macs, r.top1))
        .collect();
    let mut xs: Vec<(f64, f64)> = pts
        .iter()
        .map(|&(m, a)| {
            (
                (m - macs_min) as f64 / (macs_max - macs_min) as f64,
                a,
            )
        })
        .collect();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let mut area = 0.0;
    for w in xs.windows(2) {
        area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    let hand = area / (xs.last().unwrap().0 - xs[0].0);
    assert!((frontier.mean_pareto_accuracy - hand).abs() < 1e-9);
    assert!(
        (mean_pareto_accuracy(&pts, macs_min, macs_max).unwrap() - hand).abs() < 1e-9
    );
}

#[test]
fn calibrating_full_model_reproduces_training_stats() {
    let d = dataset();
    let space = small_space();
    let plan = ShrinkingPlan::new(Strategy::NoShrink, 8);
    let steps = d.steps_per_epoch(16);
    let lr = LrSchedule::cosine(0.05, 8 * steps);
    let (state, _) = run_training(
        &space,
        &d,
        &plan,
        &lr,
        31,
        &RunnerCfg { batch_size: 16, ..Default::default() },
        &mut Silent,
    )
    .unwrap();
    let mut net = state.net;
    let full = net.space.a_full();
    let digest = full.digest();
    let running = net.bn_stats.get(&digest).unwrap().clone();

    bn_calibrate(&mut net, &full, &d.train, 16, 6, 4).unwrap();
    let calibrated = net.bn_stats.get(&digest).unwrap().clone();

    // Same order of magnitude criterion as a statistical check: calibrated
    // means within 0.05 * std of the running means, per channel.
    for (layer, (run, cal)) in running.iter().zip(&calibrated).enumerate() {
        for c in 0..run.mean.len() {
            let std = f64::from(run.var[c]).sqrt().max(1e-3);
            let delta = (f64::from(run.mean[c]) - f64::from(cal.mean[c])).abs();
            assert!(
                delta <= 0.05 * std,
                "layer {layer} channel {c}: |dmean| {delta} > 0.05 * std {std}"
            );
        }
    }
}

#[test]
fn frontier_csv_shape() {
    let rec = |d: &str, macs: u64, top1: f64| EvalRecord {
        config_digest: d.into(),
        macs,
        top1,
        split: "test".into(),
        calibrated: true,
    };
    let records = vec![rec("a", 100, 0.4), rec("b", 160, 0.6), rec("c", 200, 0.7)];
    let f = build_frontier(records, 100, 200, 6).unwrap();
    let csv = f.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    // Header + 6 bucket rows + summary.
    assert_eq!(lines.len(), 8);
    assert!(lines[7].starts_with("# mean_pareto_accuracy="));
    // Empty buckets are flagged with empty fields.
    assert!(lines.iter().any(|l| l.ends_with(",,,,")));
}

use std::time::Instant;
use supernet_core::arch::demo_space;
use supernet_core::data::{load_dataset, DatasetSpec, SyntheticDatasetSpec};
use supernet_core::eval::pareto_frontier;
use supernet_core::rng::stream;
use supernet_core::schedule::LrSchedule;
use supernet_core::train::{run_training, RunnerCfg, ShrinkingPlan, Silent, Strategy};

fn main() {
    let sigma: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1.4);
    let d = load_dataset(&DatasetSpec::Synthetic(SyntheticDatasetSpec {
        num_classes: 10, resolution: 16, channels: 1,
        train_samples: 256, test_samples: 128, noise_sigma: sigma, seed: 1,
    })).unwrap();
    let space = demo_space();
    let steps = d.steps_per_epoch(32);
    let t0 = Instant::now();
    for seed in [1u64, 2, 3] {
        let mut line = format!("seed {seed}:");
        for pfm in [0.25f64, 0.5, 0.75] {
            let mut plan = ShrinkingPlan::new(Strategy::DelayedEpsShrink, 40);
            plan.fm_warmup_fraction = pfm;
            plan.epsilon_warmup_steps = Some(80);
            let lr = LrSchedule::cosine(0.1, 40 * steps);
            let (state, _) = run_training(&space, &d, &plan, &lr, seed, &RunnerCfg::default(), &mut Silent).unwrap();
            let mut net = state.net;
            let mut rng = stream(seed, "pareto");
            let f = pareto_frontier(&mut net, &d.test, &d.train, 6, 24, &mut rng, 32, 2).unwrap();
            line.push_str(&format!("  P={pfm} -> {:.4}", f.mean_pareto_accuracy));
        }
        println!("{line}");
    }
    println!("elapsed {:?}", t0.elapsed());
}

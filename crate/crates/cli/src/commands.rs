//! Subcommand implementations. Every file this module writes lands under
//! the resolved output directory.

use crate::config::RunConfig;
use crate::ArchSelect;
use std::path::{Path, PathBuf};
use supernet_core::checkpoint;
use supernet_core::diag;
use supernet_core::error::{Error, Result};
use supernet_core::eval;
use supernet_core::rng::stream;
use supernet_core::supernet::Supernet;
use supernet_core::train::{
    run_training, run_training_from, DistillMode, EpochRecord, MetricsLog, ShrinkingPlan,
    Strategy, TrainObserver,
};

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Relative output paths are placed under the output directory.
fn out_path(dir: &Path, flag: Option<&Path>, default_name: &str) -> PathBuf {
    match flag {
        Some(p) if p.is_absolute() => p.to_path_buf(),
        Some(p) => dir.join(p),
        None => dir.join(default_name),
    }
}

struct CheckpointWriter {
    dir: PathBuf,
    quiet: bool,
}

impl TrainObserver for CheckpointWriter {
    fn on_epoch(&mut self, record: &EpochRecord, _net: &Supernet) {
        if !self.quiet {
            eprintln!(
                "epoch {:>4}  loss_full {:>9.5}  acc_full {:.4}  eta {:.5}  eps {:.6}  fwd {}",
                record.epoch,
                record.loss_full,
                record.acc_full,
                record.eta,
                record.epsilon,
                record.forward_count
            );
        }
    }

    fn on_checkpoint(&mut self, net: &Supernet, epoch: u64, tag: &str) -> Result<()> {
        let name = match tag {
            "onset" => "ckpt-onset.bin".to_string(),
            _ => format!("ckpt-e{epoch:04}.bin"),
        };
        checkpoint::save_supernet(net, epoch, &self.dir.join(name))
    }
}

pub fn train(config_path: &Path, output_dir: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let dir = cfg.resolve_output_dir(output_dir);
    ensure_dir(&dir)?;
    let dataset = cfg.load_data()?;
    let lr = cfg.lr_schedule(&dataset);
    let mut observer = CheckpointWriter {
        dir: dir.clone(),
        quiet: false,
    };
    let (state, log) = run_training(
        &cfg.space,
        &dataset,
        &cfg.plan,
        &lr,
        cfg.seed,
        &cfg.runner(),
        &mut observer,
    )?;
    checkpoint::save_supernet(&state.net, cfg.plan.total_epochs, &dir.join("ckpt-final.bin"))?;
    std::fs::write(dir.join("metrics.csv"), log.to_csv())?;
    std::fs::write(dir.join("metrics.jsonl"), log.to_jsonl())?;
    let echo = toml::to_string(&cfg)
        .map_err(|e| Error::Validation(format!("config echo failed: {e}")))?;
    std::fs::write(dir.join("config.toml"), echo)?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}

pub fn eval(
    config_path: &Path,
    checkpoint_path: &Path,
    arch: &ArchSelect,
    calib_batches: Option<usize>,
) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let dataset = cfg.load_data()?;
    let (mut net, _) = checkpoint::load_supernet(checkpoint_path)?;
    let config = arch.resolve(&net.space)?;
    eval::bn_calibrate(
        &mut net,
        &config,
        &dataset.train,
        cfg.batch_size,
        calib_batches.unwrap_or(cfg.eval.calib_batches),
        dataset.num_classes,
    )?;
    let record = eval::evaluate_subnet(
        &net,
        &config,
        &dataset.test,
        "test",
        cfg.batch_size,
        dataset.num_classes,
    )?;
    println!(
        "{}",
        serde_json::to_string(&record)
            .map_err(|e| Error::Validation(format!("record serialization: {e}")))?
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn pareto(
    config_path: &Path,
    checkpoint_path: &Path,
    buckets: Option<usize>,
    samples: Option<usize>,
    exhaustive: bool,
    out: Option<&Path>,
    output_dir: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let dir = cfg.resolve_output_dir(output_dir);
    ensure_dir(&dir)?;
    let dataset = cfg.load_data()?;
    let (mut net, _) = checkpoint::load_supernet(checkpoint_path)?;
    let buckets = buckets.unwrap_or(cfg.eval.num_buckets);
    let frontier = if exhaustive {
        eval::pareto_frontier_exhaustive(
            &mut net,
            &dataset.test,
            &dataset.train,
            buckets,
            cfg.batch_size,
            cfg.eval.calib_batches,
            512,
        )?
    } else {
        let mut rng = stream(cfg.seed, "pareto");
        eval::pareto_frontier(
            &mut net,
            &dataset.test,
            &dataset.train,
            buckets,
            samples.unwrap_or(cfg.eval.num_samples),
            &mut rng,
            cfg.batch_size,
            cfg.eval.calib_batches,
        )?
    };
    let path = out_path(&dir, out, "pareto.csv");
    std::fs::write(&path, frontier.to_csv())?;
    println!("mean_pareto_accuracy={}", frontier.mean_pareto_accuracy);
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn diagnose_grads(
    config_path: &Path,
    checkpoint_path: &Path,
    epsilon: Option<f64>,
    k: Option<usize>,
    out: Option<&Path>,
    output_dir: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let dir = cfg.resolve_output_dir(output_dir);
    ensure_dir(&dir)?;
    let dataset = cfg.load_data()?;
    let (net, _) = checkpoint::load_supernet(checkpoint_path)?;
    let indices = &dataset.train_batches(cfg.seed, 0, cfg.batch_size)[0];
    let batch = dataset.train.minibatch(indices, dataset.num_classes)?;
    let mut rng = stream(cfg.seed, "diag/grads");
    let cmp = diag::grad_compare(
        &net,
        &batch,
        epsilon.unwrap_or(cfg.plan.epsilon0),
        k.unwrap_or(cfg.plan.k),
        cfg.plan.label_smoothing,
        cfg.plan.distill,
        &mut rng,
    )?;
    let path = out_path(&dir, out, "gradients.csv");
    std::fs::write(&path, diag::gradients_to_csv(&cmp.per_layer))?;
    println!(
        "no_shrink={} shrink={} eps_shrink={}",
        cmp.global_no_shrink, cmp.global_shrink, cmp.global_eps_shrink
    );
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn diagnose_trace(
    config_path: &Path,
    every: u64,
    limit: u64,
    out: Option<&Path>,
    output_dir: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let dir = cfg.resolve_output_dir(output_dir);
    ensure_dir(&dir)?;
    let dataset = cfg.load_data()?;
    let lr = cfg.lr_schedule(&dataset);
    let mut observer = diag::TraceObserver::new(cfg.seed, cfg.plan.label_smoothing, cfg.plan.distill);
    observer.every = every.max(1);
    observer.limit = limit;
    run_training(
        &cfg.space,
        &dataset,
        &cfg.plan,
        &lr,
        cfg.seed,
        &cfg.runner(),
        &mut observer,
    )?;
    let path = out_path(&dir, out, "trace.csv");
    std::fs::write(&path, diag::trace_to_csv(&observer.records))?;
    eprintln!("wrote {} ({} records)", path.display(), observer.records.len());
    Ok(())
}

pub fn diagnose_onset(metrics_path: &Path, onset: u64) -> Result<()> {
    let text = std::fs::read_to_string(metrics_path)?;
    let log = MetricsLog::from_csv(&text)?;
    let drop = diag::onset_drop(&log, onset)?;
    println!("onset_drop={drop}");
    Ok(())
}

pub fn diagnose_heatmap(
    config_path: &Path,
    checkpoint_path: &Path,
    arch: &ArchSelect,
    out: Option<&Path>,
    output_dir: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let dir = cfg.resolve_output_dir(output_dir);
    ensure_dir(&dir)?;
    let dataset = cfg.load_data()?;
    let (mut net, _) = checkpoint::load_supernet(checkpoint_path)?;
    let config = arch.resolve(&net.space)?;
    eval::bn_calibrate(
        &mut net,
        &config,
        &dataset.train,
        cfg.batch_size,
        cfg.eval.calib_batches,
        dataset.num_classes,
    )?;
    let record = diag::class_correlation_heatmap(&net, &config, &dataset.test, cfg.batch_size)?;
    if record.degenerate {
        eprintln!("warning: degenerate heatmap (all predictions in one class)");
    }
    let path = out_path(&dir, out, "heatmap.csv");
    std::fs::write(&path, record.to_csv())?;
    println!("mean_abs_off_diagonal={}", record.mean_abs_off_diagonal());
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn extract(
    config_path: &Path,
    checkpoint_path: &Path,
    arch: &ArchSelect,
    out: Option<&Path>,
    output_dir: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let dir = cfg.resolve_output_dir(output_dir);
    ensure_dir(&dir)?;
    let dataset = cfg.load_data()?;
    let (mut net, _) = checkpoint::load_supernet(checkpoint_path)?;
    let config = arch.resolve(&net.space)?;
    eval::bn_calibrate(
        &mut net,
        &config,
        &dataset.train,
        cfg.batch_size,
        cfg.eval.calib_batches,
        dataset.num_classes,
    )?;
    let model = net.extract_standalone(&config)?;
    let path = out_path(&dir, out, "model.bin");
    checkpoint::save_standalone(&model, &path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn init_compare(
    config_path: &Path,
    checkpoint_a: &Path,
    checkpoint_b: &Path,
    tune_epochs: u64,
    samples: usize,
    out: Option<&Path>,
    output_dir: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let dir = cfg.resolve_output_dir(output_dir);
    ensure_dir(&dir)?;
    let dataset = cfg.load_data()?;

    // Identical shrink-training recipe for both initializations.
    let mut plan = ShrinkingPlan::new(Strategy::EarlyShrink, tune_epochs);
    plan.distill = DistillMode::InplaceKd;
    plan.label_smoothing = cfg.plan.label_smoothing;
    plan.momentum = cfg.plan.momentum;
    plan.weight_decay = cfg.plan.weight_decay;
    let total_steps = tune_epochs * dataset.steps_per_epoch(cfg.batch_size);
    let lr = supernet_core::schedule::LrSchedule::cosine_constant_ending(
        cfg.lr.eta0,
        total_steps,
        cfg.lr.floor_fraction,
    );

    let mut tuned = Vec::new();
    for path in [checkpoint_a, checkpoint_b] {
        let (net, _) = checkpoint::load_supernet(path)?;
        if net.space != cfg.space {
            return Err(Error::Validation(format!(
                "checkpoint {} was trained on a different space",
                path.display()
            )));
        }
        let mut silent = supernet_core::train::Silent;
        let (state, _) = run_training_from(
            net,
            &dataset,
            &plan,
            &lr,
            cfg.seed,
            &cfg.runner(),
            &mut silent,
        )?;
        tuned.push(state.net);
    }

    // The same sampled subnets are scored against both initializations.
    let mut rng = stream(cfg.seed, "init-compare/sample");
    let mut configs = vec![cfg.space.a_min(), cfg.space.a_full()];
    configs.extend(cfg.space.sample_uniform(samples, &mut rng));
    let mut seen = std::collections::BTreeSet::new();
    configs.retain(|c| seen.insert(c.digest()));

    let mut rows = Vec::new();
    for config in &configs {
        let mut pair = Vec::new();
        for net in tuned.iter_mut() {
            eval::bn_calibrate(
                net,
                config,
                &dataset.train,
                cfg.batch_size,
                cfg.eval.calib_batches,
                dataset.num_classes,
            )?;
            let rec = eval::evaluate_subnet(
                net,
                config,
                &dataset.test,
                "test",
                cfg.batch_size,
                dataset.num_classes,
            )?;
            pair.push(rec);
        }
        rows.push((config.digest(), pair[0].macs, pair[0].top1, pair[1].top1));
    }
    rows.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));

    let mut csv = String::from("config_digest,macs,top1_a,top1_b\n");
    for (digest, macs, a, b) in &rows {
        csv.push_str(&format!("\"{digest}\",{macs},{a},{b}\n"));
    }
    let path = out_path(&dir, out, "init-compare.csv");
    std::fs::write(&path, csv)?;
    let mean = |idx: usize| -> f64 {
        rows.iter()
            .map(|r| if idx == 0 { r.2 } else { r.3 })
            .sum::<f64>()
            / rows.len() as f64
    };
    println!("mean_top1_a={} mean_top1_b={}", mean(0), mean(1));
    eprintln!("wrote {}", path.display());
    Ok(())
}

//! Subnet evaluation: batch-norm calibration, top-1 accuracy, MAC
//! bucketing, and the Pareto frontier with its area-under-curve summary.

use crate::arch::ArchConfig;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::supernet::{count_macs, ForwardMode, Supernet};
use crate::tape::BnRunningStats;
use crate::tensor::{Minibatch, Tensor};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// One evaluated subnet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub config_digest: String,
    pub macs: u64,
    /// Top-1 accuracy in [0, 1].
    pub top1: f64,
    pub split: String,
    /// True when the stats bucket came from an explicit calibration pass.
    pub calibrated: bool,
}

/// Recompute a config's batch-norm running statistics from training data:
/// forward `num_batches` batches in stats-collection mode and store the
/// equally weighted average of the per-batch statistics (unbiased variance).
/// Conv weights and the affine BN parameters are untouched.
pub fn bn_calibrate(
    net: &mut Supernet,
    config: &ArchConfig,
    calibration_split: &Split,
    batch_size: usize,
    num_batches: usize,
    num_classes: usize,
) -> Result<()> {
    if num_batches == 0 {
        return Err(Error::Validation("num_batches must be >= 1".into()));
    }
    if calibration_split.n < batch_size {
        return Err(Error::Validation(format!(
            "calibration split has {} samples, need at least one batch of {batch_size}",
            calibration_split.n
        )));
    }
    let view = net.select_subnet(config)?;
    let batches: Vec<Vec<usize>> = (0..calibration_split.n)
        .collect::<Vec<usize>>()
        .chunks_exact(batch_size)
        .take(num_batches)
        .map(|c| c.to_vec())
        .collect();
    if batches.is_empty() {
        return Err(Error::Validation("calibration split yields no full batch".into()));
    }

    // Per-layer accumulators over batches.
    let mut sums: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; view.layers.len()];
    for indices in &batches {
        let batch = calibration_split.minibatch(indices, num_classes)?;
        let pass = net.forward_subnet(&view, &batch, ForwardMode::Collect, None)?;
        for (layer_idx, var) in &pass.bn_nodes {
            let stats = pass.tape.bn_batch_stats(*var).expect("collect-mode bn");
            let unbiased = stats.var_unbiased();
            let entry = sums[*layer_idx]
                .get_or_insert_with(|| (vec![0.0; stats.mean.len()], vec![0.0; stats.mean.len()]));
            for c in 0..stats.mean.len() {
                entry.0[c] += stats.mean[c];
                entry.1[c] += unbiased[c];
            }
        }
    }
    let nb = batches.len() as f64;
    let bucket: Vec<BnRunningStats> = sums
        .into_iter()
        .map(|entry| match entry {
            Some((mean, var)) => BnRunningStats {
                mean: mean.iter().map(|m| (m / nb) as f32).collect(),
                var: var.iter().map(|v| (v / nb) as f32).collect(),
            },
            None => BnRunningStats {
                mean: vec![],
                var: vec![],
            },
        })
        .collect();
    net.store_bn_bucket(&view, bucket);
    net.bn_stats.calibrated.insert(view.digest);
    Ok(())
}

/// Top-1 accuracy of arbitrary logits over a split; the model is injected as
/// a closure so test doubles can stand in for a real subnet.
pub fn top1_accuracy_with(
    mut logits_fn: impl FnMut(&Minibatch) -> Result<Tensor>,
    split: &Split,
    batch_size: usize,
    num_classes: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    for indices in Dataset::eval_batches(split, batch_size) {
        let batch = split.minibatch(&indices, num_classes)?;
        let logits = logits_fn(&batch)?;
        let c = logits.shape[1];
        for (row, &label) in batch.labels.iter().enumerate() {
            let pred = argmax(&logits.values[row * c..(row + 1) * c]);
            if pred == label as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / split.n as f64)
}

/// First index of the maximum (ties break toward the lower class).
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of a subnet through the supernet's eval path.
pub fn subnet_top1(
    net: &Supernet,
    view: &crate::supernet::SubnetView,
    split: &Split,
    batch_size: usize,
    num_classes: usize,
) -> Result<f64> {
    top1_accuracy_with(
        |batch| net.eval_logits(view, batch),
        split,
        batch_size,
        num_classes,
    )
}

/// Evaluate one subnet; requires stored or calibrated statistics.
pub fn evaluate_subnet(
    net: &Supernet,
    config: &ArchConfig,
    split: &Split,
    split_name: &str,
    batch_size: usize,
    num_classes: usize,
) -> Result<EvalRecord> {
    let view = net.select_subnet(config)?;
    let top1 = subnet_top1(net, &view, split, batch_size, num_classes)?;
    Ok(EvalRecord {
        macs: count_macs(&net.space, config)?,
        top1,
        calibrated: net.bn_stats.calibrated.contains(&view.digest),
        config_digest: view.digest,
        split: split_name.to_string(),
    })
}

/// Bucketed best subnets over the MAC range plus the AUC summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFrontier {
    pub macs_min: u64,
    pub macs_max: u64,
    /// `(lo, hi)` per bucket, uniform over `[macs_min, macs_max]`.
    pub bucket_bounds: Vec<(u64, u64)>,
    /// Best record per bucket; `None` flags an empty bucket.
    pub selected: Vec<Option<EvalRecord>>,
    /// Every evaluated record (selection input).
    pub records: Vec<EvalRecord>,
    pub mean_pareto_accuracy: f64,
}

/// Trapezoidal mean of accuracy over MACs normalized to [0, 1] by
/// `(macs - macs_min) / (macs_max - macs_min)`; expressed in accuracy units
/// (a flat curve of accuracy c yields exactly c).
pub fn mean_pareto_accuracy(points: &[(u64, f64)], macs_min: u64, macs_max: u64) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Validation(format!(
            "mean pareto accuracy needs >= 2 points, got {}",
            points.len()
        )));
    }
    if macs_max <= macs_min {
        return Err(Error::Validation("degenerate MAC range".into()));
    }
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .map(|&(m, a)| {
            (
                (m as f64 - macs_min as f64) / (macs_max as f64 - macs_min as f64),
                a,
            )
        })
        .collect();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let span = pts.last().unwrap().0 - pts[0].0;
    if span <= 0.0 {
        return Err(Error::Validation(
            "mean pareto accuracy needs >= 2 distinct MAC values".into(),
        ));
    }
    let mut area = 0.0f64;
    for w in pts.windows(2) {
        area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    Ok(area / span)
}

/// Sample, calibrate, and evaluate subnets, then pick the best per MAC
/// bucket. The smallest and largest architectures are always included.
#[allow(clippy::too_many_arguments)]
pub fn pareto_frontier(
    net: &mut Supernet,
    test_split: &Split,
    calib_split: &Split,
    num_buckets: usize,
    num_samples: usize,
    rng: &mut ChaCha20Rng,
    batch_size: usize,
    calib_batches: usize,
) -> Result<ParetoFrontier> {
    if num_buckets < 2 {
        return Err(Error::Validation("num_buckets must be >= 2".into()));
    }
    if num_samples < num_buckets {
        return Err(Error::Validation(
            "num_samples must be >= num_buckets".into(),
        ));
    }
    let num_classes = net.space.num_classes;
    let mut configs = vec![net.space.a_min(), net.space.a_full()];
    for c in net.space.sample_uniform(num_samples, rng) {
        configs.push(c);
    }
    let mut seen = std::collections::BTreeSet::new();
    configs.retain(|c| seen.insert(c.digest()));

    let mut records = Vec::with_capacity(configs.len());
    for config in &configs {
        bn_calibrate(net, config, calib_split, batch_size, calib_batches, num_classes)?;
        records.push(evaluate_subnet(
            net,
            config,
            test_split,
            "test",
            batch_size,
            num_classes,
        )?);
    }

    let macs_min = count_macs(&net.space, &net.space.a_min())?;
    let macs_max = count_macs(&net.space, &net.space.a_full())?;
    Ok(build_frontier(records, macs_min, macs_max, num_buckets)?)
}

/// As [`pareto_frontier`] but evaluating every config of the space
/// (spaces up to `limit` architectures).
pub fn pareto_frontier_exhaustive(
    net: &mut Supernet,
    test_split: &Split,
    calib_split: &Split,
    num_buckets: usize,
    batch_size: usize,
    calib_batches: usize,
    limit: usize,
) -> Result<ParetoFrontier> {
    let configs = net.space.enumerate_all(limit).ok_or_else(|| {
        Error::Validation(format!(
            "space has {} architectures; exhaustive evaluation is capped at {limit}",
            net.space.cardinality()
        ))
    })?;
    let num_classes = net.space.num_classes;
    let mut records = Vec::with_capacity(configs.len());
    for config in &configs {
        bn_calibrate(net, config, calib_split, batch_size, calib_batches, num_classes)?;
        records.push(evaluate_subnet(
            net,
            config,
            test_split,
            "test",
            batch_size,
            num_classes,
        )?);
    }
    let macs_min = count_macs(&net.space, &net.space.a_min())?;
    let macs_max = count_macs(&net.space, &net.space.a_full())?;
    build_frontier(records, macs_min, macs_max, num_buckets)
}

/// Bucket records and select the most accurate per bucket (ties: lower MACs,
/// then lexicographic digest).
pub fn build_frontier(
    records: Vec<EvalRecord>,
    macs_min: u64,
    macs_max: u64,
    num_buckets: usize,
) -> Result<ParetoFrontier> {
    let width = (macs_max - macs_min) as f64 / num_buckets as f64;
    let bucket_bounds: Vec<(u64, u64)> = (0..num_buckets)
        .map(|i| {
            (
                (macs_min as f64 + width * i as f64).round() as u64,
                (macs_min as f64 + width * (i + 1) as f64).round() as u64,
            )
        })
        .collect();
    let bucket_of = |macs: u64| -> usize {
        let idx = ((macs - macs_min) as f64 / width).floor() as usize;
        idx.min(num_buckets - 1)
    };
    let mut selected: Vec<Option<EvalRecord>> = vec![None; num_buckets];
    for r in &records {
        if r.macs < macs_min || r.macs > macs_max {
            return Err(Error::Validation(format!(
                "record {} has MACs {} outside [{macs_min}, {macs_max}]",
                r.config_digest, r.macs
            )));
        }
        let b = bucket_of(r.macs);
        let better = match &selected[b] {
            None => true,
            Some(cur) => {
                (r.top1, std::cmp::Reverse(r.macs), std::cmp::Reverse(r.config_digest.clone()))
                    > (
                        cur.top1,
                        std::cmp::Reverse(cur.macs),
                        std::cmp::Reverse(cur.config_digest.clone()),
                    )
            }
        };
        if better {
            selected[b] = Some(r.clone());
        }
    }
    let points: Vec<(u64, f64)> = selected
        .iter()
        .flatten()
        .map(|r| (r.macs, r.top1))
        .collect();
    let mean = mean_pareto_accuracy(&points, macs_min, macs_max)?;
    Ok(ParetoFrontier {
        macs_min,
        macs_max,
        bucket_bounds,
        selected,
        records,
        mean_pareto_accuracy: mean,
    })
}

impl ParetoFrontier {
    /// `pareto.csv`: one row per bucket (empty buckets flagged by empty
    /// fields) plus a trailing summary line.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record([
            "bucket_lo",
            "bucket_hi",
            "config_digest",
            "macs",
            "top1",
            "calibrated",
        ])
        .expect("csv header");
        for (i, (lo, hi)) in self.bucket_bounds.iter().enumerate() {
            match &self.selected[i] {
                Some(r) => w
                    .write_record([
                        lo.to_string(),
                        hi.to_string(),
                        r.config_digest.clone(),
                        r.macs.to_string(),
                        r.top1.to_string(),
                        r.calibrated.to_string(),
                    ])
                    .expect("csv row"),
                None => w
                    .write_record([
                        lo.to_string(),
                        hi.to_string(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                    ])
                    .expect("csv row"),
            }
        }
        let mut out = String::from_utf8(w.into_inner().expect("csv flush")).expect("utf8");
        out.push_str(&format!(
            "# mean_pareto_accuracy={}\n",
            self.mean_pareto_accuracy
        ));
        out
    }
}

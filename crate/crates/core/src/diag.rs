//! Gradient and prediction diagnostics.
//!
//! Every measurement here is pure: weights, optimizer state, and the
//! training RNG streams are never touched. Sampling inside a measurement
//! uses a forked stream.

use crate::arch::ArchConfig;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::eval::argmax;
use crate::reference::{cosine, l2_norm};
use crate::rng::stream;
use crate::supernet::{ForwardMode, Supernet};
use crate::tensor::{Minibatch, Tensor};
use crate::train::{sample_step_configs, DistillMode, MetricsLog, StepInfo, StepReport};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Per-layer comparison of the three gradients of one step: full-model only,
/// full plus subnets, and full plus eps-scaled subnets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRecord {
    pub layer: String,
    pub step: u64,
    pub norm_no_shrink: f64,
    pub norm_shrink: f64,
    pub norm_eps_shrink: f64,
    /// cosine(G_noShrink, G_Shrink); NaN when either norm is zero.
    pub cos_shrink: f64,
    /// cosine(G_noShrink, G_Shrink(eps)); NaN when either norm is zero.
    pub cos_eps_shrink: f64,
}

/// Per-layer records plus the concatenated-over-layers global norms.
#[derive(Debug, Clone, PartialEq)]
pub struct GradComparison {
    pub per_layer: Vec<GradientRecord>,
    pub global_no_shrink: f64,
    pub global_shrink: f64,
    pub global_eps_shrink: f64,
}

/// Measure the three step gradients on one batch without touching the
/// weights. The same sampled subnets back both the plain and the eps-scaled
/// sums, mirroring the training accumulation order (largest first).
pub fn grad_compare(
    net: &Supernet,
    batch: &Minibatch,
    epsilon: f64,
    k: usize,
    smoothing: f64,
    distill: DistillMode,
    rng: &mut ChaCha20Rng,
) -> Result<GradComparison> {
    let configs = sample_step_configs(&net.space, k, true, rng)?;
    grad_compare_with_configs(net, batch, epsilon, &configs, smoothing, distill)
}

fn subnet_grads(
    net: &Supernet,
    config: &ArchConfig,
    batch: &Minibatch,
    smoothing: f64,
    teacher: Option<&Tensor>,
) -> Result<(Vec<Vec<f32>>, Option<Tensor>)> {
    let view = net.select_subnet(config)?;
    let mut pass = net.forward_subnet(&view, batch, ForwardMode::Train, None)?;
    let mut teacher_out = None;
    let loss = match teacher {
        None => {
            teacher_out = Some(pass.tape.detach(pass.logits));
            pass.tape
                .loss_ce_smoothed(pass.logits, &batch.labels, smoothing)?
        }
        Some(t) => {
            let t_leaf = pass.tape.leaf(t)?;
            pass.tape.loss_kd_soft(pass.logits, t_leaf)?
        }
    };
    pass.tape.backward(loss)?;
    let mut buffers = net.zeroed_grad_buffers();
    net.scatter_grads(&pass, 1.0, &mut buffers);
    Ok((buffers, teacher_out))
}

/// As [`grad_compare`] with the subnet sample fixed by the caller; the first
/// config must be the full model.
pub fn grad_compare_with_configs(
    net: &Supernet,
    batch: &Minibatch,
    epsilon: f64,
    configs: &[ArchConfig],
    smoothing: f64,
    distill: DistillMode,
) -> Result<GradComparison> {
    if configs.first() != Some(&net.space.a_full()) {
        return Err(Error::Contract(
            "gradient comparison requires the full model first in the sample set".into(),
        ));
    }
    let (g_full, teacher) = subnet_grads(net, &configs[0], batch, smoothing, None)?;
    let teacher = teacher.expect("full model emits teacher logits");
    let mut per_subnet: Vec<Vec<Vec<f32>>> = Vec::with_capacity(configs.len() - 1);
    for config in &configs[1..] {
        let t = match distill {
            DistillMode::InplaceKd => Some(&teacher),
            _ => None,
        };
        let (g, _) = subnet_grads(net, config, batch, smoothing, t)?;
        per_subnet.push(g);
    }

    // Accumulate exactly as training does: full first, then each subnet in
    // sample order, scaled at scatter time.
    let fold = |scale: f64| -> Vec<Vec<f32>> {
        let mut acc = g_full.clone();
        for g in &per_subnet {
            for (dst, src) in acc.iter_mut().zip(g) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += (f64::from(*s) * scale) as f32;
                }
            }
        }
        acc
    };
    let g_shrink = fold(1.0);
    let g_eps = fold(epsilon);

    let mut per_layer = Vec::with_capacity(net.weights.params.len());
    let mut sq = (0.0f64, 0.0f64, 0.0f64);
    for (pi, param) in net.weights.params.iter().enumerate() {
        let n0 = l2_norm(&g_full[pi]);
        let n1 = l2_norm(&g_shrink[pi]);
        let n2 = l2_norm(&g_eps[pi]);
        sq.0 += n0 * n0;
        sq.1 += n1 * n1;
        sq.2 += n2 * n2;
        per_layer.push(GradientRecord {
            layer: param.name.clone(),
            step: 0,
            norm_no_shrink: n0,
            norm_shrink: n1,
            norm_eps_shrink: n2,
            cos_shrink: cosine(&g_full[pi], &g_shrink[pi]).unwrap_or(f64::NAN),
            cos_eps_shrink: cosine(&g_full[pi], &g_eps[pi]).unwrap_or(f64::NAN),
        });
    }
    Ok(GradComparison {
        per_layer,
        global_no_shrink: sq.0.sqrt(),
        global_shrink: sq.1.sqrt(),
        global_eps_shrink: sq.2.sqrt(),
    })
}

/// `gradients.csv` rendering.
pub fn gradients_to_csv(records: &[GradientRecord]) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record([
        "layer",
        "step",
        "norm_no_shrink",
        "norm_shrink",
        "norm_eps_shrink",
        "cos_shrink",
        "cos_eps_shrink",
    ])
    .expect("csv header");
    for r in records {
        w.write_record([
            r.layer.clone(),
            r.step.to_string(),
            r.norm_no_shrink.to_string(),
            r.norm_shrink.to_string(),
            r.norm_eps_shrink.to_string(),
            r.cos_shrink.to_string(),
            r.cos_eps_shrink.to_string(),
        ])
        .expect("csv row");
    }
    String::from_utf8(w.into_inner().expect("csv flush")).expect("utf8")
}

// ── Gradient magnitude trace ─────────────────────────────────────────

/// One recorded step of the normalized-magnitude trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Shrink-phase step index (global step outside the shrink phase).
    pub step: u64,
    /// `|G_Shrink(eps)| / |G_noShrink|`.
    pub ratio_eps: f64,
    /// `|G_Shrink| / |G_noShrink|`.
    pub ratio_shrink: f64,
    /// False when the denominator norm is zero; ratios are NaN then.
    pub defined: bool,
}

/// Observer that measures the gradient-magnitude ratios before training
/// steps execute. Measurement RNG is forked from the master seed per step,
/// leaving the training streams untouched.
pub struct TraceObserver {
    pub master_seed: u64,
    pub smoothing: f64,
    pub distill: DistillMode,
    /// Record every N measured steps.
    pub every: u64,
    /// Stop recording after this many records (0 = unlimited).
    pub limit: u64,
    pub records: Vec<TraceRecord>,
}

impl TraceObserver {
    pub fn new(master_seed: u64, smoothing: f64, distill: DistillMode) -> Self {
        TraceObserver {
            master_seed,
            smoothing,
            distill,
            every: 1,
            limit: 0,
            records: Vec::new(),
        }
    }
}

impl crate::train::TrainObserver for TraceObserver {
    fn before_step(&mut self, net: &Supernet, info: &StepInfo<'_>) -> Result<()> {
        if self.limit > 0 && self.records.len() as u64 >= self.limit {
            return Ok(());
        }
        let step = info.shrink_step.unwrap_or(info.global_step);
        if step % self.every != 0 {
            return Ok(());
        }
        // Outside the shrink phase the sample set degenerates to the full
        // model alone and both ratios are exactly 1.
        let (k, eps) = match info.shrink_step {
            Some(_) => (info.k, info.epsilon.unwrap_or(1.0)),
            None => (1, 1.0),
        };
        let mut rng = stream(
            self.master_seed,
            &format!("diag/trace/{}", info.global_step),
        );
        let cmp = grad_compare(
            net,
            info.batch,
            eps,
            k,
            self.smoothing,
            self.distill,
            &mut rng,
        )?;
        let defined = cmp.global_no_shrink != 0.0;
        self.records.push(TraceRecord {
            step,
            ratio_eps: if defined {
                cmp.global_eps_shrink / cmp.global_no_shrink
            } else {
                f64::NAN
            },
            ratio_shrink: if defined {
                cmp.global_shrink / cmp.global_no_shrink
            } else {
                f64::NAN
            },
            defined,
        });
        Ok(())
    }

    fn after_step(&mut self, _report: &StepReport) {}
}

/// `trace.csv` rendering.
pub fn trace_to_csv(records: &[TraceRecord]) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(["step", "ratio_eps", "ratio_shrink", "defined"])
        .expect("csv header");
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.ratio_eps.to_string(),
            r.ratio_shrink.to_string(),
            r.defined.to_string(),
        ])
        .expect("csv row");
    }
    String::from_utf8(w.into_inner().expect("csv flush")).expect("utf8")
}

// ── Onset drop ───────────────────────────────────────────────────────

/// Largest single-epoch drop of the full-model eval accuracy at or after
/// `onset_epoch`, clipped below at zero.
pub fn onset_drop(log: &MetricsLog, onset_epoch: u64) -> Result<f64> {
    let accs: Vec<f64> = log.epochs.iter().map(|e| e.acc_full).collect();
    if accs.is_empty() || onset_epoch as usize >= accs.len() {
        return Err(Error::Validation(format!(
            "onset epoch {onset_epoch} outside the {}-epoch log",
            accs.len()
        )));
    }
    let mut worst = 0.0f64;
    for e in (onset_epoch as usize).max(1)..accs.len() {
        worst = worst.max(accs[e - 1] - accs[e]);
    }
    Ok(worst)
}

// ── Class-correlation heatmap ────────────────────────────────────────

/// Cosine similarities between per-class mean logits, grouped by predicted
/// class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRecord {
    /// `C x C`; NaN where either class has no predictions.
    pub matrix: Vec<Vec<f64>>,
    /// Predictions per class.
    pub counts: Vec<usize>,
    /// All predictions landed in a single class.
    pub degenerate: bool,
}

/// Build the heatmap from injected logits (test doubles welcome).
pub fn class_correlation_heatmap_with(
    mut logits_fn: impl FnMut(&Minibatch) -> Result<Tensor>,
    split: &Split,
    batch_size: usize,
    num_classes: usize,
) -> Result<HeatmapRecord> {
    if split.n == 0 {
        return Err(Error::Validation("heatmap needs a non-empty split".into()));
    }
    let mut sums = vec![vec![0.0f64; num_classes]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for indices in crate::data::Dataset::eval_batches(split, batch_size) {
        let batch = split.minibatch(&indices, num_classes)?;
        let logits = logits_fn(&batch)?;
        for row in 0..batch.batch_size {
            let r = &logits.values[row * num_classes..(row + 1) * num_classes];
            let pred = argmax(r);
            counts[pred] += 1;
            for (c, &v) in r.iter().enumerate() {
                sums[pred][c] += f64::from(v);
            }
        }
    }
    let means: Vec<Option<Vec<f32>>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| {
            (n > 0).then(|| s.iter().map(|v| (v / n as f64) as f32).collect::<Vec<f32>>())
        })
        .collect();
    let mut matrix = vec![vec![f64::NAN; num_classes]; num_classes];
    for i in 0..num_classes {
        for j in 0..num_classes {
            if let (Some(a), Some(b)) = (&means[i], &means[j]) {
                matrix[i][j] = cosine(a, b).unwrap_or(f64::NAN);
            }
        }
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    Ok(HeatmapRecord {
        matrix,
        counts,
        degenerate: present <= 1,
    })
}

/// Heatmap of a subnet through the supernet's eval path.
pub fn class_correlation_heatmap(
    net: &Supernet,
    config: &ArchConfig,
    split: &Split,
    batch_size: usize,
) -> Result<HeatmapRecord> {
    let view = net.select_subnet(config)?;
    class_correlation_heatmap_with(
        |batch| net.eval_logits(&view, batch),
        split,
        batch_size,
        net.space.num_classes,
    )
}

impl HeatmapRecord {
    /// Mean |A_ij| over defined off-diagonal entries.
    pub fn mean_abs_off_diagonal(&self) -> f64 {
        let mut total = 0.0f64;
        let mut n = 0usize;
        for (i, row) in self.matrix.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i != j && v.is_finite() {
                    total += v.abs();
                    n += 1;
                }
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            total / n as f64
        }
    }

    /// `heatmap.csv`: the C x C matrix, `NaN` for absent classes.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.matrix {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::demo_space;
    use crate::data::{load_dataset, DatasetSpec, SyntheticDatasetSpec};
    use crate::tensor::Tensor;

    fn tiny_dataset() -> crate::data::Dataset {
        load_dataset(&DatasetSpec::Synthetic(SyntheticDatasetSpec {
            num_classes: 4,
            resolution: 16,
            channels: 1,
            train_samples: 32,
            test_samples: 20,
            noise_sigma: 0.4,
            seed: 6,
        }))
        .unwrap()
    }

    fn tiny_net() -> Supernet {
        let mut space = demo_space();
        space.num_classes = 4;
        Supernet::new(space, 9).unwrap()
    }

    #[test]
    fn grad_compare_is_pure_and_eps1_matches_shrink() {
        let d = tiny_dataset();
        let net = tiny_net();
        let batch = d.train.minibatch(&[0, 1, 2, 3, 4, 5, 6, 7], 4).unwrap();
        let before = net.clone();
        let mut rng = stream(1, "diag");
        let cmp = grad_compare(&net, &batch, 1.0, 4, 0.1, DistillMode::InplaceKd, &mut rng)
            .unwrap();
        assert_eq!(before, net);
        for r in &cmp.per_layer {
            assert_eq!(r.norm_shrink, r.norm_eps_shrink);
            if r.cos_shrink.is_finite() {
                assert!((-1.0..=1.0).contains(&r.cos_shrink));
            }
        }
        assert_eq!(cmp.global_shrink, cmp.global_eps_shrink);
    }

    #[test]
    fn grad_compare_small_eps_stays_near_full_gradient() {
        let d = tiny_dataset();
        let net = tiny_net();
        let batch = d.train.minibatch(&[0, 1, 2, 3, 4, 5, 6, 7], 4).unwrap();
        let mut rng = stream(2, "diag");
        let eps = 1e-4;
        let cmp = grad_compare(&net, &batch, eps, 4, 0.1, DistillMode::InplaceKd, &mut rng)
            .unwrap();
        // |G(eps)| within eps-scaled distance of |G_noShrink| per layer
        // (triangle inequality on the subnet sum).
        for r in &cmp.per_layer {
            let slack = r.norm_shrink + r.norm_no_shrink; // >= |sum of subnet grads|
            assert!(
                (r.norm_eps_shrink - r.norm_no_shrink).abs() <= eps * slack + 1e-9,
                "layer {}",
                r.layer
            );
        }
    }

    #[test]
    fn onset_drop_cases() {
        use crate::train::EpochRecord;
        let rec = |epoch: u64, acc: f64| EpochRecord {
            epoch,
            step: 0,
            eta: 0.0,
            epsilon: 0.0,
            loss_full: 0.0,
            loss_subnets_mean: 0.0,
            acc_full: acc,
            forward_count: 0,
            configs_digest: String::new(),
        };
        let log = MetricsLog {
            epochs: vec![rec(0, 50.0), rec(1, 55.0), rec(2, 60.0)],
            steps: vec![],
        };
        assert_eq!(onset_drop(&log, 1).unwrap(), 0.0);
        let log = MetricsLog {
            epochs: vec![rec(0, 55.0), rec(1, 60.0), rec(2, 58.0), rec(3, 59.0)],
            steps: vec![],
        };
        assert_eq!(onset_drop(&log, 2).unwrap(), 2.0);
        assert!(onset_drop(&log, 4).is_err());
    }

    #[test]
    fn heatmap_oracle_classifier_is_identity() {
        let d = tiny_dataset();
        let oracle = |batch: &Minibatch| {
            let mut values = vec![0.0f32; batch.batch_size * 4];
            for (i, &l) in batch.labels.iter().enumerate() {
                values[i * 4 + l as usize] = 1.0;
            }
            Tensor::new(vec![batch.batch_size, 4], values)
        };
        let h = class_correlation_heatmap_with(oracle, &d.test, 8, 4).unwrap();
        assert!(!h.degenerate);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (h.matrix[i][j] - expect).abs() < 1e-9,
                    "A[{i}][{j}] = {}",
                    h.matrix[i][j]
                );
                // Symmetry.
                assert_eq!(h.matrix[i][j].to_bits(), h.matrix[j][i].to_bits());
            }
        }
    }

    #[test]
    fn heatmap_degenerate_single_class() {
        let d = tiny_dataset();
        let constant = |batch: &Minibatch| {
            let mut values = vec![0.0f32; batch.batch_size * 4];
            for i in 0..batch.batch_size {
                values[i * 4 + 2] = 3.0;
            }
            Tensor::new(vec![batch.batch_size, 4], values)
        };
        let h = class_correlation_heatmap_with(constant, &d.test, 8, 4).unwrap();
        assert!(h.degenerate);
        assert!((h.matrix[2][2] - 1.0).abs() < 1e-12);
        assert!(h.matrix[0][1].is_nan());
        assert_eq!(h.counts[2], d.test.n);
    }
}

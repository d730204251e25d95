//! Training steps and end-to-end strategies.
//!
//! Three update rules over the shared store:
//!
//! * no-shrink: one full-model forward, hard-label loss;
//! * shrink: k sampled subnets per step, gradients summed in a fixed order
//!   (largest first under sandwich sampling);
//! * eps-shrink: the full model always sampled, subnet gradient
//!   contributions scaled by a warmed-up factor, so the effective subnet
//!   learning rate is `eta * eps` while the full model keeps `eta`.
//!
//! Strategies sequence the rules: train the full model only, forever
//! (no-shrink); shrink from step zero (early); shrink after a partial
//! full-model warmup with the eps ramp and in-place distillation from the
//! same-step full model (delayed); or train the full model to completion and
//! then widen the sampled space phase by phase with a frozen teacher
//! (progressive).

use crate::arch::{ArchConfig, ArchSpace};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval;
use crate::optim::{Optimizer, WeightDecayScope};
use crate::reference::l2_norm;
use crate::rng::{digest_f32, fnv1a64, stream};
use crate::schedule::{EpsilonSchedule, LrSchedule};
use crate::supernet::{ForwardMode, StandaloneModel, Supernet};
use crate::tensor::{Minibatch, Tensor};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

// ── Plan ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    NoShrink,
    DelayedEpsShrink,
    EarlyShrink,
    ProgressiveShrink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillMode {
    /// Soft targets from the same-step full-model logits, detached.
    InplaceKd,
    /// Soft targets from a frozen, fully trained teacher model.
    VanillaKdFrozenTeacher,
    /// Hard-label loss for every sampled subnet.
    None,
}

/// Strategy selector plus every knob the strategies share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkingPlan {
    pub strategy: Strategy,
    pub total_epochs: u64,
    /// Fraction of epochs training only the full model before shrinking.
    #[serde(default = "default_fm_warmup")]
    pub fm_warmup_fraction: f64,
    /// Subnets per step once shrinking is active.
    #[serde(default = "default_k", alias = "subnets_per_step")]
    pub k: usize,
    #[serde(default = "default_epsilon0")]
    pub epsilon0: f64,
    /// Eps warmup length in shrink-phase optimizer steps; defaults to one
    /// epoch's step count.
    #[serde(default)]
    pub epsilon_warmup_steps: Option<u64>,
    #[serde(default = "default_distill")]
    pub distill: DistillMode,
    /// Convex blend of hard-label loss into subnet KD losses (0 = pure soft).
    #[serde(default)]
    pub kd_blend: f64,
    /// `[full, depth, width]` epochs for the progressive strategy.
    #[serde(default)]
    pub progressive_phase_epochs: Option<Vec<u64>>,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(skip, default)]
    pub weight_decay_scope: WeightDecayScope,
}

fn default_fm_warmup() -> f64 {
    0.5
}
fn default_k() -> usize {
    4
}
fn default_epsilon0() -> f64 {
    1e-4
}
fn default_distill() -> DistillMode {
    DistillMode::InplaceKd
}
fn default_smoothing() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    3e-5
}

impl ShrinkingPlan {
    pub fn new(strategy: Strategy, total_epochs: u64) -> Self {
        ShrinkingPlan {
            strategy,
            total_epochs,
            fm_warmup_fraction: 0.5,
            k: 4,
            epsilon0: 1e-4,
            epsilon_warmup_steps: None,
            distill: match strategy {
                Strategy::ProgressiveShrink => DistillMode::VanillaKdFrozenTeacher,
                Strategy::NoShrink => DistillMode::None,
                _ => DistillMode::InplaceKd,
            },
            kd_blend: 0.0,
            progressive_phase_epochs: None,
            label_smoothing: 0.1,
            momentum: 0.9,
            weight_decay: 3e-5,
            weight_decay_scope: WeightDecayScope::All,
        }
    }

    /// First shrinking epoch under the delayed strategy.
    pub fn onset_epoch(&self) -> u64 {
        (self.fm_warmup_fraction * self.total_epochs as f64).round() as u64
    }

    /// `[full, depth, width]` phase lengths; defaults split the budget as
    /// half full-model training and an even depth/width split of the rest.
    pub fn progressive_phases(&self) -> Vec<u64> {
        if let Some(p) = &self.progressive_phase_epochs {
            return p.clone();
        }
        let full = self.total_epochs.div_ceil(2);
        let rest = self.total_epochs - full;
        let depth = rest.div_ceil(2);
        vec![full, depth, rest - depth]
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::Validation("total_epochs must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Validation("k must be >= 1".into()));
        }
        if !(self.epsilon0 > 0.0 && self.epsilon0 <= 1.0) {
            return Err(Error::Validation(format!(
                "epsilon0 must be in (0, 1], got {}",
                self.epsilon0
            )));
        }
        if let Some(w) = self.epsilon_warmup_steps {
            if w == 0 {
                return Err(Error::Validation("epsilon_warmup_steps must be >= 1".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.kd_blend) {
            return Err(Error::Validation("kd_blend must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Validation("label_smoothing must be in [0, 1)".into()));
        }
        match self.strategy {
            Strategy::DelayedEpsShrink => {
                if !(0.0..1.0).contains(&self.fm_warmup_fraction) {
                    return Err(Error::Validation(
                        "fm_warmup_fraction must be in [0, 1)".into(),
                    ));
                }
                let onset = self.fm_warmup_fraction * self.total_epochs as f64;
                if (onset - onset.round()).abs() > 1e-9 {
                    return Err(Error::Validation(format!(
                        "fm_warmup_fraction * total_epochs must be an integer, got {onset}"
                    )));
                }
                if self.k < 2 {
                    return Err(Error::Validation(
                        "delayed-eps-shrink needs k >= 2".into(),
                    ));
                }
                if self.distill == DistillMode::VanillaKdFrozenTeacher {
                    return Err(Error::Validation(
                        "delayed-eps-shrink distills in place; frozen-teacher KD conflicts".into(),
                    ));
                }
            }
            Strategy::EarlyShrink => {
                if self.distill == DistillMode::VanillaKdFrozenTeacher {
                    return Err(Error::Validation(
                        "early-shrink distills in place; frozen-teacher KD conflicts".into(),
                    ));
                }
            }
            Strategy::ProgressiveShrink => {
                if self.distill == DistillMode::InplaceKd {
                    return Err(Error::Validation(
                        "progressive-shrink uses a frozen teacher; in-place KD conflicts".into(),
                    ));
                }
                let phases = self.progressive_phases();
                if phases.len() != 3 || phases[0] == 0 {
                    return Err(Error::Validation(
                        "progressive phases must be [full, depth, width] with full >= 1".into(),
                    ));
                }
                if phases.iter().sum::<u64>() != self.total_epochs {
                    return Err(Error::Validation(format!(
                        "progressive phases {phases:?} must sum to total_epochs {}",
                        self.total_epochs
                    )));
                }
            }
            Strategy::NoShrink => {}
        }
        Ok(())
    }
}

// ── Step report ──────────────────────────────────────────────────────

/// What one optimizer step did.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    pub eta: f64,
    pub epsilon: Option<f64>,
    pub config_digests: Vec<String>,
    /// Loss per sampled config, in accumulation order.
    pub losses: Vec<f32>,
    pub forward_count: u64,
    /// L2 norm of the accumulated gradient over the whole store.
    pub grad_norm: f64,
    /// FNV digest of the in-place teacher logits, when one was produced.
    pub teacher_digest: Option<u64>,
}

/// Per-step sampling rule shared by the shrink and eps-shrink updates:
/// sandwich for k = 4, otherwise the forced full model plus `k - 1` uniform
/// non-full subnets (or k plain uniform draws when the full model is not
/// forced).
pub fn sample_step_configs(
    space: &ArchSpace,
    k: usize,
    force_full: bool,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<ArchConfig>> {
    if k == 4 {
        return Ok(space.sandwich_sample(rng));
    }
    if force_full {
        let mut configs = vec![space.a_full()];
        for _ in 1..k {
            configs.push(space.sample_one_excluding_full(rng)?);
        }
        Ok(configs)
    } else {
        Ok(space.sample_uniform(k, rng))
    }
}

// ── Train state ──────────────────────────────────────────────────────

enum TeacherSource<'a> {
    /// No distillation: every subnet trains on hard labels.
    HardLabels,
    /// Detached same-step full-model logits (must be produced first).
    Inplace,
    /// A frozen standalone teacher evaluated on the step's batch.
    Frozen(&'a StandaloneModel),
}

/// The mutable training state: shared weights plus optimizer buffers.
pub struct TrainState {
    pub net: Supernet,
    pub opt: Optimizer,
    pub label_smoothing: f64,
    pub kd_blend: f64,
}

impl TrainState {
    pub fn new(net: Supernet, plan: &ShrinkingPlan) -> Self {
        let opt = Optimizer::new(
            &net,
            plan.momentum,
            plan.weight_decay,
            plan.weight_decay_scope,
        );
        TrainState {
            net,
            opt,
            label_smoothing: plan.label_smoothing,
            kd_blend: plan.kd_blend,
        }
    }

    /// Full-model update: one forward/backward with the hard-label loss.
    pub fn step_no_shrink(
        &mut self,
        batch: &Minibatch,
        eta: f64,
        dropout_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<StepReport> {
        let view = self.net.select_subnet(&self.net.space.a_full())?;
        let mut pass = self
            .net
            .forward_subnet(&view, batch, ForwardMode::Train, dropout_rng)?;
        let loss = pass
            .tape
            .loss_ce_smoothed(pass.logits, &batch.labels, self.label_smoothing)?;
        pass.tape.backward(loss)?;
        let mut buffers = self.net.zeroed_grad_buffers();
        self.net.scatter_grads(&pass, 1.0, &mut buffers);
        self.net.apply_bn_updates(&view, &pass);
        let loss_value = pass.tape.values(loss)[0];
        let grad_norm = global_norm(&buffers);
        self.opt.step(&mut self.net, &buffers, eta)?;
        Ok(StepReport {
            step: 0,
            eta,
            epsilon: None,
            config_digests: vec![view.digest],
            losses: vec![loss_value],
            forward_count: 1,
            grad_norm,
            teacher_digest: None,
        })
    }

    /// Shrinking update: k sampled subnets, gradients summed at full scale.
    #[allow(clippy::too_many_arguments)]
    pub fn step_shrink(
        &mut self,
        batch: &Minibatch,
        eta: f64,
        k: usize,
        force_full: bool,
        distill: DistillMode,
        rng: &mut ChaCha20Rng,
        dropout_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<StepReport> {
        if k == 0 {
            return Err(Error::Validation("k must be >= 1".into()));
        }
        let configs = sample_step_configs(&self.net.space, k, force_full, rng)?;
        let teacher = match distill {
            DistillMode::InplaceKd => TeacherSource::Inplace,
            DistillMode::None | DistillMode::VanillaKdFrozenTeacher => TeacherSource::HardLabels,
        };
        self.step_configs_inner(batch, eta, &configs, 1.0, None, teacher, dropout_rng)
    }

    /// Eps-shrinking update: the full model always in the sample set at full
    /// gradient scale; subnet contributions scaled by `epsilon`.
    #[allow(clippy::too_many_arguments)]
    pub fn step_eps_shrink(
        &mut self,
        batch: &Minibatch,
        eta: f64,
        epsilon: f64,
        k: usize,
        distill: DistillMode,
        rng: &mut ChaCha20Rng,
        dropout_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<StepReport> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::Validation(format!(
                "epsilon must be in (0, 1], got {epsilon}"
            )));
        }
        if k < 2 {
            return Err(Error::Validation("eps-shrink needs k >= 2".into()));
        }
        let configs = sample_step_configs(&self.net.space, k, true, rng)?;
        let teacher = match distill {
            DistillMode::InplaceKd => TeacherSource::Inplace,
            DistillMode::None | DistillMode::VanillaKdFrozenTeacher => TeacherSource::HardLabels,
        };
        self.step_configs_inner(
            batch,
            eta,
            &configs,
            epsilon,
            Some(epsilon),
            teacher,
            dropout_rng,
        )
    }

    /// Phase-restricted update with a frozen teacher (progressive strategy).
    fn step_frozen_kd(
        &mut self,
        batch: &Minibatch,
        eta: f64,
        configs: &[ArchConfig],
        teacher: Option<&StandaloneModel>,
        dropout_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<StepReport> {
        let source = match teacher {
            Some(t) => TeacherSource::Frozen(t),
            None => TeacherSource::HardLabels,
        };
        self.step_configs_inner(batch, eta, configs, 1.0, None, source, dropout_rng)
    }

    /// One update over an explicit config list: hard labels for every
    /// config, gradients summed at full scale. Used by fine-tuning recipes
    /// and by tests that need a fixed sample set.
    pub fn step_with_configs(
        &mut self,
        batch: &Minibatch,
        eta: f64,
        configs: &[ArchConfig],
        distill: DistillMode,
        dropout_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<StepReport> {
        let teacher = match distill {
            DistillMode::InplaceKd => TeacherSource::Inplace,
            DistillMode::None | DistillMode::VanillaKdFrozenTeacher => TeacherSource::HardLabels,
        };
        self.step_configs_inner(batch, eta, configs, 1.0, None, teacher, dropout_rng)
    }

    /// Shared accumulation loop. The first config, when it is the full
    /// model, trains on hard labels and donates its detached logits as the
    /// in-place teacher; every later config's gradient is scaled by
    /// `subnet_scale` at scatter time.
    fn step_configs_inner(
        &mut self,
        batch: &Minibatch,
        eta: f64,
        configs: &[ArchConfig],
        subnet_scale: f64,
        epsilon: Option<f64>,
        teacher: TeacherSource<'_>,
        mut dropout_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<StepReport> {
        let a_full = self.net.space.a_full();
        let mut buffers = self.net.zeroed_grad_buffers();
        let mut losses = Vec::with_capacity(configs.len());
        let mut digests = Vec::with_capacity(configs.len());
        let mut inplace_teacher: Option<Tensor> = None;
        let frozen_logits: Option<Tensor> = match &teacher {
            TeacherSource::Frozen(model) => Some(model.eval_logits(batch)?),
            _ => None,
        };

        for (i, config) in configs.iter().enumerate() {
            let view = self.net.select_subnet(config)?;
            let mut pass = self.net.forward_subnet(
                &view,
                batch,
                ForwardMode::Train,
                dropout_rng.as_deref_mut(),
            )?;
            let first_is_full = i == 0 && *config == a_full;
            let loss = if first_is_full {
                if matches!(teacher, TeacherSource::Inplace) {
                    inplace_teacher = Some(pass.tape.detach(pass.logits));
                }
                pass.tape
                    .loss_ce_smoothed(pass.logits, &batch.labels, self.label_smoothing)?
            } else {
                match &teacher {
                    TeacherSource::HardLabels => pass.tape.loss_ce_smoothed(
                        pass.logits,
                        &batch.labels,
                        self.label_smoothing,
                    )?,
                    TeacherSource::Inplace => {
                        let t = inplace_teacher.as_ref().ok_or_else(|| {
                            Error::Contract(
                                "in-place distillation targets requested before any \
                                 full-model forward in this step"
                                    .into(),
                            )
                        })?;
                        let t_leaf = pass.tape.leaf(t)?;
                        self.kd_loss(&mut pass, t_leaf, batch)?
                    }
                    TeacherSource::Frozen(_) => {
                        let t = frozen_logits.as_ref().expect("computed above");
                        let t_leaf = pass.tape.leaf(t)?;
                        self.kd_loss(&mut pass, t_leaf, batch)?
                    }
                }
            };
            pass.tape.backward(loss)?;
            let scale = if first_is_full { 1.0 } else { subnet_scale };
            self.net.scatter_grads(&pass, scale, &mut buffers);
            self.net.apply_bn_updates(&view, &pass);
            losses.push(pass.tape.values(loss)[0]);
            digests.push(view.digest);
        }

        let grad_norm = global_norm(&buffers);
        self.opt.step(&mut self.net, &buffers, eta)?;
        Ok(StepReport {
            step: 0,
            eta,
            epsilon,
            config_digests: digests,
            losses,
            forward_count: configs.len() as u64,
            grad_norm,
            teacher_digest: inplace_teacher.as_ref().map(|t| digest_f32(&t.values)),
        })
    }

    /// Soft-target loss, optionally blended with the hard-label loss.
    fn kd_loss(
        &self,
        pass: &mut crate::supernet::ForwardPass,
        teacher: crate::tape::Var,
        batch: &Minibatch,
    ) -> Result<crate::tape::Var> {
        let kd = pass.tape.loss_kd_soft(pass.logits, teacher)?;
        if self.kd_blend == 0.0 {
            return Ok(kd);
        }
        let ce = pass
            .tape
            .loss_ce_smoothed(pass.logits, &batch.labels, self.label_smoothing)?;
        let wk = pass
            .tape
            .leaf_const(vec![], vec![(1.0 - self.kd_blend) as f32])?;
        let wc = pass.tape.leaf_const(vec![], vec![self.kd_blend as f32])?;
        let kd_scaled = pass.tape.mul(kd, wk)?;
        let ce_scaled = pass.tape.mul(ce, wc)?;
        pass.tape.add(kd_scaled, ce_scaled)
    }
}

fn global_norm(buffers: &[Vec<f32>]) -> f64 {
    buffers
        .iter()
        .map(|b| {
            let n = l2_norm(b);
            n * n
        })
        .sum::<f64>()
        .sqrt()
}

// ── Metrics log ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Global optimizer step at the end of the epoch.
    pub step: u64,
    pub eta: f64,
    pub epsilon: f64,
    pub loss_full: f32,
    pub loss_subnets_mean: f32,
    /// Full-model eval accuracy on the test split.
    pub acc_full: f64,
    pub forward_count: u64,
    /// FNV digest of the epoch's sampled-config digests.
    pub configs_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: u64,
    pub step: u64,
    pub eta: f64,
    pub epsilon: f64,
    pub loss_full: f32,
    pub loss_subnets: Vec<f32>,
    pub forward_count: u64,
}

/// Per-epoch records plus per-N-step records during the shrink phase.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl MetricsLog {
    pub fn total_forwards(&self) -> u64 {
        self.epochs.iter().map(|e| e.forward_count).sum()
    }

    /// Comma-separated rendering: one row per record, epoch and step rows
    /// interleaved in execution order.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record([
            "kind",
            "epoch",
            "step",
            "eta",
            "epsilon",
            "loss_full",
            "loss_subnets",
            "acc_full",
            "forward_count",
            "configs_digest",
        ])
        .expect("csv header");
        let mut si = 0usize;
        for e in &self.epochs {
            while si < self.steps.len() && self.steps[si].epoch <= e.epoch {
                let s = &self.steps[si];
                w.write_record([
                    "step".to_string(),
                    s.epoch.to_string(),
                    s.step.to_string(),
                    s.eta.to_string(),
                    s.epsilon.to_string(),
                    s.loss_full.to_string(),
                    join_losses(&s.loss_subnets),
                    String::new(),
                    s.forward_count.to_string(),
                    String::new(),
                ])
                .expect("csv row");
                si += 1;
            }
            w.write_record([
                "epoch".to_string(),
                e.epoch.to_string(),
                e.step.to_string(),
                e.eta.to_string(),
                e.epsilon.to_string(),
                e.loss_full.to_string(),
                e.loss_subnets_mean.to_string(),
                e.acc_full.to_string(),
                e.forward_count.to_string(),
                e.configs_digest.clone(),
            ])
            .expect("csv row");
        }
        String::from_utf8(w.into_inner().expect("csv flush")).expect("utf8")
    }

    /// Line-delimited JSON rendering, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut si = 0usize;
        for e in &self.epochs {
            while si < self.steps.len() && self.steps[si].epoch <= e.epoch {
                let mut v = serde_json::to_value(&self.steps[si]).expect("json");
                v["kind"] = "step".into();
                out.push_str(&serde_json::to_string(&v).expect("json"));
                out.push('\n');
                si += 1;
            }
            let mut v = serde_json::to_value(e).expect("json");
            v["kind"] = "epoch".into();
            out.push_str(&serde_json::to_string(&v).expect("json"));
            out.push('\n');
        }
        out
    }

    /// Parse the CSV rendering back (epoch records only need the accuracy
    /// series for onset analysis).
    pub fn from_csv(text: &str) -> Result<MetricsLog> {
        let mut log = MetricsLog::default();
        let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Validation(format!("bad metrics csv: {e}")))?;
            let kind = &rec[0];
            let f = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Validation(format!("bad metrics field {i}: {e}")))
            };
            let u = |i: usize| -> Result<u64> {
                rec[i]
                    .parse::<u64>()
                    .map_err(|e| Error::Validation(format!("bad metrics field {i}: {e}")))
            };
            match kind {
                "epoch" => log.epochs.push(EpochRecord {
                    epoch: u(1)?,
                    step: u(2)?,
                    eta: f(3)?,
                    epsilon: f(4)?,
                    loss_full: f(5)? as f32,
                    loss_subnets_mean: f(6)? as f32,
                    acc_full: f(7)?,
                    forward_count: u(8)?,
                    configs_digest: rec[9].to_string(),
                }),
                "step" => log.steps.push(StepRecord {
                    epoch: u(1)?,
                    step: u(2)?,
                    eta: f(3)?,
                    epsilon: f(4)?,
                    loss_full: f(5)? as f32,
                    loss_subnets: rec[6]
                        .split(';')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse::<f32>().unwrap_or(f32::NAN))
                        .collect(),
                    forward_count: u(8)?,
                }),
                other => {
                    return Err(Error::Validation(format!("unknown record kind {other}")))
                }
            }
        }
        Ok(log)
    }
}

fn join_losses(losses: &[f32]) -> String {
    losses
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

// ── Observer ─────────────────────────────────────────────────────────

/// Context handed to observers before each step executes.
pub struct StepInfo<'a> {
    pub epoch: u64,
    pub global_step: u64,
    /// Steps since shrink onset, when the shrink phase is active.
    pub shrink_step: Option<u64>,
    pub eta: f64,
    pub epsilon: Option<f64>,
    pub k: usize,
    pub batch: &'a Minibatch,
}

/// Hooks into a training run: pure measurement before a step, bookkeeping
/// after it, and checkpoint requests.
#[allow(unused_variables)]
pub trait TrainObserver {
    fn before_step(&mut self, net: &Supernet, info: &StepInfo<'_>) -> Result<()> {
        Ok(())
    }
    fn after_step(&mut self, report: &StepReport) {}
    fn on_epoch(&mut self, record: &EpochRecord, net: &Supernet) {}
    fn on_checkpoint(&mut self, net: &Supernet, epoch: u64, tag: &str) -> Result<()> {
        Ok(())
    }
}

/// No-op observer.
pub struct Silent;
impl TrainObserver for Silent {}

// ── Runner ───────────────────────────────────────────────────────────

/// Everything `run_training` needs beyond the plan and LR schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerCfg {
    pub batch_size: usize,
    /// Checkpoint every N epochs (0 disables periodic checkpoints; the
    /// shrink-onset checkpoint is always requested for the delayed strategy).
    pub checkpoint_interval: u64,
    /// Emit a step record every N shrink-phase steps (0 disables).
    pub metrics_every_steps: u64,
}

impl Default for RunnerCfg {
    fn default() -> Self {
        RunnerCfg {
            batch_size: 32,
            checkpoint_interval: 0,
            metrics_every_steps: 0,
        }
    }
}

/// Train a fresh supernet on `dataset` under `plan`, returning the final
/// state and the metrics log. Deterministic given `(inputs, seed)`.
pub fn run_training(
    space: &ArchSpace,
    dataset: &Dataset,
    plan: &ShrinkingPlan,
    lr: &LrSchedule,
    seed: u64,
    cfg: &RunnerCfg,
    observer: &mut dyn TrainObserver,
) -> Result<(TrainState, MetricsLog)> {
    let net = Supernet::new(space.clone(), seed)?;
    run_training_from(net, dataset, plan, lr, seed, cfg, observer)
}

/// As [`run_training`] but continuing from existing supernet weights
/// (e.g. a loaded checkpoint) with fresh optimizer state.
pub fn run_training_from(
    net: Supernet,
    dataset: &Dataset,
    plan: &ShrinkingPlan,
    lr: &LrSchedule,
    seed: u64,
    cfg: &RunnerCfg,
    observer: &mut dyn TrainObserver,
) -> Result<(TrainState, MetricsLog)> {
    let space = &net.space.clone();
    plan.validate()?;
    space.validate()?;
    if space.resolution_choices != vec![dataset.train.height]
        || dataset.train.height != dataset.train.width
    {
        return Err(Error::Validation(format!(
            "dataset resolution {}x{} does not match space resolutions {:?}",
            dataset.train.height, dataset.train.width, space.resolution_choices
        )));
    }
    if space.num_classes != dataset.num_classes {
        return Err(Error::Validation(format!(
            "space has {} classes, dataset has {}",
            space.num_classes, dataset.num_classes
        )));
    }
    if space.input_channels != dataset.train.channels {
        return Err(Error::Validation(format!(
            "space expects {} input channels, dataset has {}",
            space.input_channels, dataset.train.channels
        )));
    }
    let steps_per_epoch = dataset.steps_per_epoch(cfg.batch_size);
    if steps_per_epoch == 0 {
        return Err(Error::Validation(format!(
            "batch_size {} exceeds the training split ({} samples)",
            cfg.batch_size, dataset.train.n
        )));
    }

    let mut state = TrainState::new(net, plan);
    let mut sample_rng = stream(seed, "sample");
    let mut dropout_rng = stream(seed, "dropout");
    let eps_schedule = EpsilonSchedule::new(
        plan.epsilon0,
        plan.epsilon_warmup_steps.unwrap_or(steps_per_epoch),
    );
    let onset_epoch = plan.onset_epoch();
    let phases = plan.progressive_phases();
    let mut frozen_teacher: Option<StandaloneModel> = None;

    let mut log = MetricsLog::default();
    let mut global_step: u64 = 0;
    let mut shrink_step: u64 = 0;

    for epoch in 0..plan.total_epochs {
        // Progressive phase boundaries: freeze the teacher when the
        // full-model phase ends.
        let progressive_phase = if plan.strategy == Strategy::ProgressiveShrink {
            let p = if epoch < phases[0] {
                0
            } else if epoch < phases[0] + phases[1] {
                1
            } else {
                2
            };
            if p > 0 && frozen_teacher.is_none() {
                frozen_teacher = Some(state.net.extract_standalone(&space.a_full())?);
            }
            p
        } else {
            0
        };

        let mut epoch_loss_full: Vec<f32> = Vec::new();
        let mut epoch_loss_subnets: Vec<f32> = Vec::new();
        let mut epoch_forwards: u64 = 0;
        let mut epoch_digests = String::new();
        let mut last_eta = 0.0f64;
        let mut last_eps = 0.0f64;

        for indices in dataset.train_batches(seed, epoch, cfg.batch_size) {
            let batch = dataset.train.minibatch(&indices, dataset.num_classes)?;
            let eta = lr.eta_at(global_step);
            let shrink_active = match plan.strategy {
                Strategy::NoShrink => false,
                Strategy::DelayedEpsShrink => epoch >= onset_epoch,
                Strategy::EarlyShrink => true,
                Strategy::ProgressiveShrink => progressive_phase > 0,
            };
            let epsilon = if plan.strategy == Strategy::DelayedEpsShrink && shrink_active {
                Some(eps_schedule.epsilon_at(shrink_step))
            } else {
                None
            };
            observer.before_step(
                &state.net,
                &StepInfo {
                    epoch,
                    global_step,
                    shrink_step: shrink_active.then_some(shrink_step),
                    eta,
                    epsilon,
                    k: plan.k,
                    batch: &batch,
                },
            )?;

            let mut report = match plan.strategy {
                Strategy::NoShrink => state.step_no_shrink(&batch, eta, Some(&mut dropout_rng))?,
                Strategy::DelayedEpsShrink => {
                    if !shrink_active {
                        state.step_no_shrink(&batch, eta, Some(&mut dropout_rng))?
                    } else {
                        state.step_eps_shrink(
                            &batch,
                            eta,
                            epsilon.expect("shrink phase has epsilon"),
                            plan.k,
                            plan.distill,
                            &mut sample_rng,
                            Some(&mut dropout_rng),
                        )?
                    }
                }
                Strategy::EarlyShrink => state.step_shrink(
                    &batch,
                    eta,
                    plan.k,
                    false,
                    plan.distill,
                    &mut sample_rng,
                    Some(&mut dropout_rng),
                )?,
                Strategy::ProgressiveShrink => {
                    if progressive_phase == 0 {
                        state.step_no_shrink(&batch, eta, Some(&mut dropout_rng))?
                    } else {
                        let configs = sample_progressive_configs(
                            space,
                            plan.k,
                            progressive_phase,
                            &mut sample_rng,
                        );
                        state.step_frozen_kd(
                            &batch,
                            eta,
                            &configs,
                            frozen_teacher.as_ref().filter(|_| {
                                plan.distill == DistillMode::VanillaKdFrozenTeacher
                            }),
                            Some(&mut dropout_rng),
                        )?
                    }
                }
            };
            report.step = global_step;

            let full_digest = space.a_full().digest();
            let loss_full = report
                .config_digests
                .first()
                .filter(|d| **d == full_digest)
                .map(|_| report.losses[0])
                .unwrap_or(f32::NAN);
            if loss_full.is_finite() {
                epoch_loss_full.push(loss_full);
            }
            epoch_loss_subnets.extend(report.losses.iter().skip(1).copied());
            epoch_forwards += report.forward_count;
            for d in &report.config_digests {
                epoch_digests.push_str(d);
                epoch_digests.push('\n');
            }
            last_eta = eta;
            last_eps = epsilon.unwrap_or(if shrink_active { 1.0 } else { 0.0 });

            if shrink_active
                && cfg.metrics_every_steps > 0
                && shrink_step % cfg.metrics_every_steps == 0
            {
                log.steps.push(StepRecord {
                    epoch,
                    step: global_step,
                    eta,
                    epsilon: last_eps,
                    loss_full,
                    loss_subnets: report.losses.iter().skip(1).copied().collect(),
                    forward_count: report.forward_count,
                });
            }

            observer.after_step(&report);
            global_step += 1;
            if shrink_active {
                shrink_step += 1;
            }
        }

        // Per-epoch full-model eval accuracy on the test split.
        let full_view = state.net.select_subnet(&space.a_full())?;
        let acc_full = eval::subnet_top1(
            &state.net,
            &full_view,
            &dataset.test,
            cfg.batch_size,
            dataset.num_classes,
        )?;

        let record = EpochRecord {
            epoch,
            step: global_step,
            eta: last_eta,
            epsilon: last_eps,
            loss_full: mean_f32(&epoch_loss_full),
            loss_subnets_mean: mean_f32(&epoch_loss_subnets),
            acc_full,
            forward_count: epoch_forwards,
            configs_digest: format!("{:016x}", fnv1a64(epoch_digests.as_bytes())),
        };
        observer.on_epoch(&record, &state.net);
        log.epochs.push(record);

        let boundary = epoch + 1;
        if plan.strategy == Strategy::DelayedEpsShrink && boundary == onset_epoch {
            observer.on_checkpoint(&state.net, boundary, "onset")?;
        }
        if cfg.checkpoint_interval > 0 && boundary % cfg.checkpoint_interval == 0 {
            observer.on_checkpoint(&state.net, boundary, "epoch")?;
        }
    }

    Ok((state, log))
}

/// Progressive sampling: the depth phase keeps widths maximal, the width
/// phase frees every dimension.
fn sample_progressive_configs(
    space: &ArchSpace,
    k: usize,
    phase: usize,
    rng: &mut ChaCha20Rng,
) -> Vec<ArchConfig> {
    (0..k)
        .map(|_| {
            let mut c = space.sample_one(rng);
            if phase == 1 {
                for (si, st) in space.stages.iter().enumerate() {
                    for l in 0..st.max_depth {
                        c.width_frac[si][l] = *st.width_fraction_choices.last().unwrap();
                    }
                }
            }
            c
        })
        .collect()
}

fn mean_f32(xs: &[f32]) -> f32 {
    if xs.is_empty() {
        return f32::NAN;
    }
    (xs.iter().map(|&x| f64::from(x)).sum::<f64>() / xs.len() as f64) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::demo_space;
    use crate::data::{load_dataset, DatasetSpec, SyntheticDatasetSpec};

    fn tiny_dataset() -> Dataset {
        load_dataset(&DatasetSpec::Synthetic(SyntheticDatasetSpec {
            num_classes: 10,
            resolution: 16,
            channels: 1,
            train_samples: 64,
            test_samples: 32,
            noise_sigma: 0.6,
            seed: 5,
        }))
        .unwrap()
    }

    #[test]
    fn plan_validation_catches_conflicts() {
        let mut p = ShrinkingPlan::new(Strategy::DelayedEpsShrink, 20);
        p.validate().unwrap();
        p.fm_warmup_fraction = 0.33; // 6.6 epochs: not an integer
        assert!(p.validate().is_err());
        p.fm_warmup_fraction = 0.5;
        p.distill = DistillMode::VanillaKdFrozenTeacher;
        assert!(p.validate().is_err());

        let mut p = ShrinkingPlan::new(Strategy::ProgressiveShrink, 20);
        p.validate().unwrap();
        p.distill = DistillMode::InplaceKd;
        assert!(p.validate().is_err());
        p.distill = DistillMode::VanillaKdFrozenTeacher;
        p.progressive_phase_epochs = Some(vec![10, 5, 4]);
        assert!(p.validate().is_err());
    }

    #[test]
    fn onset_and_phase_arithmetic() {
        let mut p = ShrinkingPlan::new(Strategy::DelayedEpsShrink, 20);
        p.fm_warmup_fraction = 0.5;
        assert_eq!(p.onset_epoch(), 10);
        let p = ShrinkingPlan::new(Strategy::ProgressiveShrink, 20);
        assert_eq!(p.progressive_phases(), vec![10, 5, 5]);
    }

    #[test]
    fn deps_step_counts_one_then_k() {
        let dataset = tiny_dataset();
        let space = demo_space();
        let mut plan = ShrinkingPlan::new(Strategy::DelayedEpsShrink, 4);
        plan.fm_warmup_fraction = 0.5;
        let steps = dataset.steps_per_epoch(32); // 2
        let lr = LrSchedule::cosine(0.05, plan.total_epochs * steps);
        let (_, log) = run_training(
            &space,
            &dataset,
            &plan,
            &lr,
            7,
            &RunnerCfg::default(),
            &mut Silent,
        )
        .unwrap();
        assert_eq!(log.epochs.len(), 4);
        // Warm epochs: 1 forward per step; shrink epochs: k = 4 per step.
        assert_eq!(log.epochs[0].forward_count, steps);
        assert_eq!(log.epochs[1].forward_count, steps);
        assert_eq!(log.epochs[2].forward_count, steps * 4);
        assert_eq!(log.epochs[3].forward_count, steps * 4);
    }

    #[test]
    fn early_emits_k_forwards_from_step_zero() {
        let dataset = tiny_dataset();
        let space = demo_space();
        let plan = ShrinkingPlan::new(Strategy::EarlyShrink, 2);
        let steps = dataset.steps_per_epoch(32);
        let lr = LrSchedule::cosine_constant_ending(0.05, plan.total_epochs * steps, 0.05);
        let (_, log) = run_training(
            &space,
            &dataset,
            &plan,
            &lr,
            7,
            &RunnerCfg::default(),
            &mut Silent,
        )
        .unwrap();
        assert!(log.epochs.iter().all(|e| e.forward_count == steps * 4));
    }

    #[test]
    fn identical_seeds_identical_logs() {
        let dataset = tiny_dataset();
        let space = demo_space();
        let mut plan = ShrinkingPlan::new(Strategy::DelayedEpsShrink, 2);
        plan.fm_warmup_fraction = 0.5;
        let lr = LrSchedule::cosine(0.05, 4);
        let run = || {
            run_training(
                &space,
                &dataset,
                &plan,
                &lr,
                11,
                &RunnerCfg::default(),
                &mut Silent,
            )
            .unwrap()
        };
        let (state_a, log_a) = run();
        let (state_b, log_b) = run();
        assert_eq!(state_a.net.weights, state_b.net.weights);
        assert_eq!(log_a.to_csv(), log_b.to_csv());
        assert_eq!(log_a.to_jsonl(), log_b.to_jsonl());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dataset = tiny_dataset();
        let space = demo_space();
        let mut plan = ShrinkingPlan::new(Strategy::DelayedEpsShrink, 2);
        plan.fm_warmup_fraction = 0.5;
        let lr = LrSchedule::cosine(0.05, 4);
        let cfg = RunnerCfg {
            metrics_every_steps: 1,
            ..RunnerCfg::default()
        };
        let (_, log) = run_training(&space, &dataset, &plan, &lr, 3, &cfg, &mut Silent).unwrap();
        assert!(!log.steps.is_empty());
        let parsed = MetricsLog::from_csv(&log.to_csv()).unwrap();
        assert_eq!(parsed.epochs.len(), log.epochs.len());
        assert_eq!(parsed.steps.len(), log.steps.len());
        assert_eq!(parsed.epochs.last(), log.epochs.last());
    }
}

//! Shared weight store and subnet selection by slicing.
//!
//! Every subnet reads its parameters from the same maximal tensors: output
//! channels are a leading prefix, kernels a centered window, stage depth the
//! first d blocks. Nothing is copied at selection time; forwards gather the
//! active slices into dense buffers and gradient scatter adds straight back
//! into the shared store, so an update through one subnet is immediately
//! visible to every overlapping subnet.

use crate::arch::{ArchConfig, ArchSpace};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tape::{BnMode, BnRunningStats, Tape, Var, BN_MOMENTUM};
use crate::tensor::{Minibatch, Tensor};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

// ── Parameter store ──────────────────────────────────────────────────

/// One named maximal tensor of the shared store.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// The shared parameter store: maximal-shape tensors in a stable order.
/// The total parameter count never changes after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SupernetWeights {
    pub params: Vec<Param>,
}

impl SupernetWeights {
    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }
}

/// Structural metadata for one conv+bn unit (stem or stage block).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvBnLayer {
    pub name: String,
    /// `None` for the stem, `Some((stage, block))` otherwise.
    pub position: Option<(usize, usize)>,
    pub max_in: usize,
    pub max_out: usize,
    pub max_kernel: usize,
    pub stride: usize,
    pub conv_param: usize,
    pub gamma_param: usize,
    pub beta_param: usize,
}

// ── Slices ───────────────────────────────────────────────────────────

/// How a dense sub-tensor maps into a maximal parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceSpec {
    /// From `[max_out, max_in, k_max, k_max]`: leading `out_ch` filters,
    /// leading `in_ch` input channels, centered `k x k` window at `k_off`.
    Conv {
        max_in: usize,
        max_k: usize,
        out_ch: usize,
        in_ch: usize,
        k: usize,
        k_off: usize,
    },
    /// Leading contiguous prefix of `len` elements.
    Prefix { len: usize },
    /// The whole tensor.
    Full { len: usize },
}

impl SliceSpec {
    pub fn dense_len(&self) -> usize {
        match *self {
            SliceSpec::Conv {
                out_ch, in_ch, k, ..
            } => out_ch * in_ch * k * k,
            SliceSpec::Prefix { len } | SliceSpec::Full { len } => len,
        }
    }

    /// Visit the flat indices of the maximal tensor this slice touches, in
    /// dense-order.
    fn for_each_index(&self, mut f: impl FnMut(usize)) {
        match *self {
            SliceSpec::Conv {
                max_in,
                max_k,
                out_ch,
                in_ch,
                k,
                k_off,
            } => {
                for o in 0..out_ch {
                    for i in 0..in_ch {
                        for ky in 0..k {
                            for kx in 0..k {
                                f(((o * max_in + i) * max_k + k_off + ky) * max_k
                                    + k_off
                                    + kx);
                            }
                        }
                    }
                }
            }
            SliceSpec::Prefix { len } | SliceSpec::Full { len } => {
                for i in 0..len {
                    f(i);
                }
            }
        }
    }
}

/// Copy the sliced elements out of a maximal tensor.
pub fn gather(values: &[f32], spec: &SliceSpec) -> Vec<f32> {
    let mut out = Vec::with_capacity(spec.dense_len());
    spec.for_each_index(|i| out.push(values[i]));
    out
}

/// Add `scale * src` into the sliced positions of `dst`.
pub fn scatter_add(dst: &mut [f32], spec: &SliceSpec, src: &[f32], scale: f64) {
    debug_assert_eq!(src.len(), spec.dense_len());
    let mut j = 0usize;
    spec.for_each_index(|i| {
        dst[i] += (f64::from(src[j]) * scale) as f32;
        j += 1;
    });
}

/// Mark the covered positions of a maximal tensor.
pub fn coverage_mask(len: usize, spec: &SliceSpec) -> Vec<bool> {
    let mut mask = vec![false; len];
    spec.for_each_index(|i| mask[i] = true);
    mask
}

// ── Subnet view ──────────────────────────────────────────────────────

/// Resolved slice of one conv+bn layer under a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlice {
    /// False when depth selection skips this block (identity pass-through).
    pub active: bool,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// Centered window offset inside the maximal kernel.
    pub k_off: usize,
    pub stride: usize,
    /// Identity shortcut applies (stride 1 and matching channel counts).
    pub residual: bool,
}

/// A subnet's resolved index ranges into the shared store. Holds no
/// parameter data; reads and writes go through the supernet at call time.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetView {
    pub config: ArchConfig,
    pub digest: String,
    /// One entry per supernet conv layer, in layer order (stem first).
    pub layers: Vec<LayerSlice>,
    /// Active classifier input features.
    pub feat_in: usize,
}

impl SubnetView {
    /// Resolve a config against a space: prefixes for channels, centered
    /// windows for kernels, first-d blocks for depth.
    pub fn resolve(space: &ArchSpace, config: &ArchConfig) -> Result<Self> {
        space.validate_config(config)?;
        let mut layers = Vec::new();
        // Stem is fixed.
        layers.push(LayerSlice {
            active: true,
            in_ch: space.input_channels,
            out_ch: space.stem.out_channels,
            kernel: space.stem.kernel,
            k_off: 0,
            stride: space.stem.stride,
            residual: false,
        });
        let mut cur = space.stem.out_channels;
        for (si, st) in space.stages.iter().enumerate() {
            for b in 0..st.max_depth {
                let active = b < config.depth[si];
                let out_ch = ((config.width_frac[si][b] * st.max_width as f64).ceil() as usize)
                    .clamp(1, st.max_width);
                let k = config.kernel[si][b];
                let k_max = *st.kernel_choices.last().unwrap();
                let stride = if b == 0 { st.stride } else { 1 };
                let slice = LayerSlice {
                    active,
                    in_ch: cur,
                    out_ch,
                    kernel: k,
                    k_off: (k_max - k) / 2,
                    stride,
                    residual: active && stride == 1 && cur == out_ch,
                };
                layers.push(slice);
                if active {
                    cur = out_ch;
                }
            }
        }
        Ok(SubnetView {
            config: config.clone(),
            digest: config.digest(),
            layers,
            feat_in: cur,
        })
    }

    /// Slice specs for the parameters of layer `idx` (conv, gamma, beta).
    fn layer_specs(&self, layer: &ConvBnLayer, idx: usize) -> (SliceSpec, SliceSpec, SliceSpec) {
        let s = &self.layers[idx];
        (
            SliceSpec::Conv {
                max_in: layer.max_in,
                max_k: layer.max_kernel,
                out_ch: s.out_ch,
                in_ch: s.in_ch,
                k: s.kernel,
                k_off: s.k_off,
            },
            SliceSpec::Prefix { len: s.out_ch },
            SliceSpec::Prefix { len: s.out_ch },
        )
    }
}

// ── Batch-norm statistics buckets ────────────────────────────────────

/// Per-config running statistics: one `BnRunningStats` per conv layer at the
/// config's active widths (empty for skipped blocks).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BnStatsStore {
    pub buckets: BTreeMap<String, Vec<BnRunningStats>>,
    /// Digests whose buckets are refreshed by training-mode forwards.
    pub auto_update: Vec<String>,
    /// Digests whose buckets came from an explicit calibration pass.
    pub calibrated: std::collections::BTreeSet<String>,
}

impl BnStatsStore {
    pub fn get(&self, digest: &str) -> Option<&Vec<BnRunningStats>> {
        self.buckets.get(digest)
    }
}

fn identity_bucket(view: &SubnetView) -> Vec<BnRunningStats> {
    view.layers
        .iter()
        .map(|s| {
            if s.active {
                BnRunningStats::identity(s.out_ch)
            } else {
                BnRunningStats {
                    mean: vec![],
                    var: vec![],
                }
            }
        })
        .collect()
}

// ── Forward pass ─────────────────────────────────────────────────────

/// A recorded forward: the tape, the logits node, the parameter leaves with
/// their slice specs (for gradient scatter), and the batch-norm nodes (for
/// running-stat updates and calibration).
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    /// `(param index, slice spec, leaf var)` for every gathered parameter.
    pub leaves: Vec<(usize, SliceSpec, Var)>,
    /// `(layer index, bn node var)` for every active batch-norm.
    pub bn_nodes: Vec<(usize, Var)>,
}

/// Execution mode of a subnet forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch-statistics normalization, parameters gradient-tracked.
    Train,
    /// Batch-statistics normalization, no gradients (calibration pass).
    Collect,
    /// Running-statistics normalization from the config's stats bucket.
    Eval,
}

// ── Supernet ─────────────────────────────────────────────────────────

/// The shared store plus its structural metadata and stats buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct Supernet {
    pub space: ArchSpace,
    pub layers: Vec<ConvBnLayer>,
    pub weights: SupernetWeights,
    pub bn_stats: BnStatsStore,
    fc_w_param: usize,
    fc_b_param: usize,
}

impl Supernet {
    /// Fresh supernet with seeded He-normal conv init.
    pub fn new(space: ArchSpace, master_seed: u64) -> Result<Self> {
        space.validate()?;
        let mut params: Vec<Param> = Vec::new();
        let mut layers: Vec<ConvBnLayer> = Vec::new();

        let mut push_param = |name: String, shape: Vec<usize>, values: Vec<f32>| -> usize {
            params.push(Param {
                name,
                tensor: Tensor::new(shape, values).expect("init shapes").with_grad(),
            });
            params.len() - 1
        };
        let normal_init = |name: &str, n: usize, std: f64| -> Vec<f32> {
            let mut rng = stream(master_seed, &format!("init/{name}"));
            let dist = Normal::new(0.0f64, std).expect("std > 0");
            (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
        };

        let mut add_conv_bn = |name: String,
                               position: Option<(usize, usize)>,
                               max_in: usize,
                               max_out: usize,
                               max_kernel: usize,
                               stride: usize| {
            let fan_in = max_in * max_kernel * max_kernel;
            let n = max_out * fan_in;
            let conv_param = push_param(
                format!("{name}.conv"),
                vec![max_out, max_in, max_kernel, max_kernel],
                normal_init(&format!("{name}.conv"), n, (2.0 / fan_in as f64).sqrt()),
            );
            let gamma_param = push_param(
                format!("{name}.bn.gamma"),
                vec![max_out],
                vec![1.0; max_out],
            );
            let beta_param =
                push_param(format!("{name}.bn.beta"), vec![max_out], vec![0.0; max_out]);
            layers.push(ConvBnLayer {
                name,
                position,
                max_in,
                max_out,
                max_kernel,
                stride,
                conv_param,
                gamma_param,
                beta_param,
            });
        };

        add_conv_bn(
            "stem".into(),
            None,
            space.input_channels,
            space.stem.out_channels,
            space.stem.kernel,
            space.stem.stride,
        );
        let mut cur = space.stem.out_channels;
        for (si, st) in space.stages.iter().enumerate() {
            let k_max = *st.kernel_choices.last().unwrap();
            for b in 0..st.max_depth {
                let stride = if b == 0 { st.stride } else { 1 };
                add_conv_bn(
                    format!("s{si}.b{b}"),
                    Some((si, b)),
                    cur,
                    st.max_width,
                    k_max,
                    stride,
                );
                cur = st.max_width;
            }
        }
        let feat_max = cur;
        let fc_w_param = push_param(
            "head.fc.w".into(),
            vec![feat_max, space.num_classes],
            normal_init(
                "head.fc.w",
                feat_max * space.num_classes,
                (1.0 / feat_max as f64).sqrt(),
            ),
        );
        let fc_b_param = push_param(
            "head.fc.b".into(),
            vec![space.num_classes],
            vec![0.0; space.num_classes],
        );

        let mut net = Supernet {
            space,
            layers,
            weights: SupernetWeights { params },
            bn_stats: BnStatsStore::default(),
            fc_w_param,
            fc_b_param,
        };
        // Running-stat buckets tracked during training: smallest and largest.
        for config in [net.space.a_min(), net.space.a_full()] {
            let view = net.select_subnet(&config)?;
            net.bn_stats
                .buckets
                .insert(view.digest.clone(), identity_bucket(&view));
            net.bn_stats.auto_update.push(view.digest);
        }
        Ok(net)
    }

    /// Resolve a subnet view; errors name the offending config dimension.
    pub fn select_subnet(&self, config: &ArchConfig) -> Result<SubnetView> {
        SubnetView::resolve(&self.space, config)
    }

    /// Parameter slices `(param index, spec)` referenced by a view, in
    /// layer order.
    pub fn view_slices(&self, view: &SubnetView) -> Vec<(usize, SliceSpec)> {
        let mut out = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            if !view.layers[idx].active {
                continue;
            }
            let (conv, gamma, beta) = view.layer_specs(layer, idx);
            out.push((layer.conv_param, conv));
            out.push((layer.gamma_param, gamma));
            out.push((layer.beta_param, beta));
        }
        out.push((
            self.fc_w_param,
            SliceSpec::Prefix {
                len: view.feat_in * self.space.num_classes,
            },
        ));
        out.push((
            self.fc_b_param,
            SliceSpec::Full {
                len: self.space.num_classes,
            },
        ));
        out
    }

    /// Per-parameter coverage masks for a view.
    pub fn view_param_mask(&self, view: &SubnetView) -> Vec<Vec<bool>> {
        let mut masks: Vec<Vec<bool>> = self
            .weights
            .params
            .iter()
            .map(|p| vec![false; p.tensor.numel()])
            .collect();
        for (pi, spec) in self.view_slices(view) {
            let m = coverage_mask(self.weights.params[pi].tensor.numel(), &spec);
            for (dst, src) in masks[pi].iter_mut().zip(m) {
                *dst = *dst || src;
            }
        }
        masks
    }

    /// Record a subnet forward on a fresh tape.
    ///
    /// `dropout_rng` supplies the head dropout mask in train mode when the
    /// head has a nonzero dropout probability.
    pub fn forward_subnet(
        &self,
        view: &SubnetView,
        batch: &Minibatch,
        mode: ForwardMode,
        mut dropout_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<ForwardPass> {
        if batch.resolution() != view.config.resolution {
            return Err(Error::Contract(format!(
                "batch resolution {} does not match config resolution {}",
                batch.resolution(),
                view.config.resolution
            )));
        }
        if batch.inputs.shape[1] != self.space.input_channels {
            return Err(Error::shape(
                "forward_subnet",
                "inputs",
                format!("{} channels", self.space.input_channels),
                format!("{} channels", batch.inputs.shape[1]),
            ));
        }
        let eval_bucket = match mode {
            ForwardMode::Eval => Some(self.bn_stats.get(&view.digest).ok_or_else(|| {
                Error::CalibrationRequired {
                    digest: view.digest.clone(),
                }
            })?),
            _ => None,
        };
        let with_grad = matches!(mode, ForwardMode::Train);

        let mut tape = Tape::new();
        let mut leaves = Vec::new();
        let mut bn_nodes = Vec::new();
        let mut x = tape.leaf(&batch.inputs)?;

        let mut leaf_of = |tape: &mut Tape, pi: usize, spec: SliceSpec| -> Result<Var> {
            let dense = gather(&self.weights.params[pi].tensor.values, &spec);
            let shape = match spec {
                SliceSpec::Conv {
                    out_ch, in_ch, k, ..
                } => vec![out_ch, in_ch, k, k],
                SliceSpec::Prefix { len } | SliceSpec::Full { len } => vec![len],
            };
            let var = if with_grad {
                tape.leaf_param(shape, dense)?
            } else {
                tape.leaf_const(shape, dense)?
            };
            leaves.push((pi, spec, var));
            Ok(var)
        };

        for (idx, layer) in self.layers.iter().enumerate() {
            let slice = view.layers[idx];
            if !slice.active {
                continue;
            }
            let (conv_spec, gamma_spec, beta_spec) = view.layer_specs(layer, idx);
            let w = leaf_of(&mut tape, layer.conv_param, conv_spec)?;
            let gamma = leaf_of(&mut tape, layer.gamma_param, gamma_spec)?;
            let beta = leaf_of(&mut tape, layer.beta_param, beta_spec)?;
            let pad = (slice.kernel - 1) / 2;
            let conv = tape.conv2d(x, w, slice.stride, pad)?;
            let bn = match (mode, &eval_bucket) {
                (ForwardMode::Eval, Some(bucket)) => {
                    let stats = &bucket[idx];
                    if stats.mean.len() != slice.out_ch {
                        return Err(Error::CalibrationRequired {
                            digest: view.digest.clone(),
                        });
                    }
                    tape.batchnorm(
                        conv,
                        gamma,
                        beta,
                        BnMode::Eval {
                            mean: &stats.mean,
                            var: &stats.var,
                        },
                    )?
                }
                _ => tape.batchnorm(conv, gamma, beta, BnMode::Train)?,
            };
            bn_nodes.push((idx, bn));
            let act = if layer.position.is_none() {
                tape.hard_swish(bn)?
            } else {
                tape.relu(bn)?
            };
            x = if slice.residual { tape.add(act, x)? } else { act };
        }

        let mut features = tape.global_avg_pool(x)?;
        let p = self.space.head.dropout;
        if matches!(mode, ForwardMode::Train) && p > 0.0 {
            if let Some(rng) = dropout_rng.as_deref_mut() {
                let n = tape.values(features).len();
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f32> = (0..n)
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep as f32 })
                    .collect();
                features = tape.dropout(features, mask)?;
            }
        }
        let fc_w = leaf_of(
            &mut tape,
            self.fc_w_param,
            SliceSpec::Prefix {
                len: view.feat_in * self.space.num_classes,
            },
        )?;
        let fc_w = tape.reshape(fc_w, vec![view.feat_in, self.space.num_classes])?;
        let fc_b = leaf_of(
            &mut tape,
            self.fc_b_param,
            SliceSpec::Full {
                len: self.space.num_classes,
            },
        )?;
        let prod = tape.matmul(features, fc_w)?;
        let logits = tape.add(prod, fc_b)?;
        Ok(ForwardPass {
            tape,
            logits,
            leaves,
            bn_nodes,
        })
    }

    /// Eval-mode logits as a plain tensor.
    pub fn eval_logits(&self, view: &SubnetView, batch: &Minibatch) -> Result<Tensor> {
        let pass = self.forward_subnet(view, batch, ForwardMode::Eval, None)?;
        Ok(pass.tape.detach(pass.logits))
    }

    /// Fold the batch statistics recorded by a training forward into the
    /// view's stats bucket, when that bucket is tracked during training.
    pub fn apply_bn_updates(&mut self, view: &SubnetView, pass: &ForwardPass) {
        if !self.bn_stats.auto_update.iter().any(|d| d == &view.digest) {
            return;
        }
        let bucket = self
            .bn_stats
            .buckets
            .get_mut(&view.digest)
            .expect("auto-update bucket exists");
        for (layer_idx, var) in &pass.bn_nodes {
            let stats = pass.tape.bn_batch_stats(*var).expect("train-mode bn node");
            bucket[*layer_idx].update(stats, BN_MOMENTUM);
        }
    }

    /// Replace a config's stats bucket (calibration result).
    pub fn store_bn_bucket(&mut self, view: &SubnetView, bucket: Vec<BnRunningStats>) {
        self.bn_stats.buckets.insert(view.digest.clone(), bucket);
    }

    /// Scatter a forward's leaf gradients into per-parameter accumulation
    /// buffers, scaled by `scale`. Buffer layout parallels `weights.params`.
    pub fn scatter_grads(
        &self,
        pass: &ForwardPass,
        scale: f64,
        buffers: &mut [Vec<f32>],
    ) {
        for (pi, spec, var) in &pass.leaves {
            if let Some(g) = pass.tape.grad(*var) {
                scatter_add(&mut buffers[*pi], spec, g, scale);
            }
        }
    }

    pub fn zeroed_grad_buffers(&self) -> Vec<Vec<f32>> {
        self.weights
            .params
            .iter()
            .map(|p| vec![0.0f32; p.tensor.numel()])
            .collect()
    }

    /// Extract a self-contained dense copy of the sliced parameters and
    /// batch-norm statistics; requires stats for the config.
    pub fn extract_standalone(&self, config: &ArchConfig) -> Result<StandaloneModel> {
        let view = self.select_subnet(config)?;
        let bucket = self
            .bn_stats
            .get(&view.digest)
            .ok_or_else(|| Error::CalibrationRequired {
                digest: view.digest.clone(),
            })?;
        let mut layers = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            let slice = view.layers[idx];
            if !slice.active {
                continue;
            }
            let (conv_spec, gamma_spec, _) = view.layer_specs(layer, idx);
            layers.push(StandaloneLayer {
                name: layer.name.clone(),
                is_stem: layer.position.is_none(),
                in_ch: slice.in_ch,
                out_ch: slice.out_ch,
                kernel: slice.kernel,
                stride: slice.stride,
                residual: slice.residual,
                conv: gather(&self.weights.params[layer.conv_param].tensor.values, &conv_spec),
                gamma: gather(
                    &self.weights.params[layer.gamma_param].tensor.values,
                    &gamma_spec,
                ),
                beta: gather(
                    &self.weights.params[layer.beta_param].tensor.values,
                    &gamma_spec,
                ),
                bn_mean: bucket[idx].mean.clone(),
                bn_var: bucket[idx].var.clone(),
            });
        }
        Ok(StandaloneModel {
            config: config.clone(),
            input_channels: self.space.input_channels,
            num_classes: self.space.num_classes,
            feat_in: view.feat_in,
            layers,
            fc_w: gather(
                &self.weights.params[self.fc_w_param].tensor.values,
                &SliceSpec::Prefix {
                    len: view.feat_in * self.space.num_classes,
                },
            ),
            fc_b: self.weights.params[self.fc_b_param].tensor.values.clone(),
        })
    }
}

/// Exact multiply-accumulate count of one subnet forward, per sample:
/// `out_h*out_w*out_c*in_c*k*k` per active conv plus `in*out` for the
/// classifier.
pub fn count_macs(space: &ArchSpace, config: &ArchConfig) -> Result<u64> {
    let view = SubnetView::resolve(space, config)?;
    let mut h = config.resolution;
    let mut w = config.resolution;
    let mut macs: u64 = 0;
    for slice in &view.layers {
        if !slice.active {
            continue;
        }
        let pad = (slice.kernel - 1) / 2;
        let oh = (h + 2 * pad - slice.kernel) / slice.stride + 1;
        let ow = (w + 2 * pad - slice.kernel) / slice.stride + 1;
        macs += (oh * ow * slice.out_ch * slice.in_ch * slice.kernel * slice.kernel) as u64;
        h = oh;
        w = ow;
    }
    macs += (view.feat_in * space.num_classes) as u64;
    Ok(macs)
}

// ── Standalone model ─────────────────────────────────────────────────

/// Dense copy of one active conv+bn layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StandaloneLayer {
    pub name: String,
    pub is_stem: bool,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub residual: bool,
    pub conv: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub bn_mean: Vec<f32>,
    pub bn_var: Vec<f32>,
}

/// A self-contained subnet: dense parameters plus frozen batch-norm
/// statistics. Eval logits match the in-supernet eval path exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct StandaloneModel {
    pub config: ArchConfig,
    pub input_channels: usize,
    pub num_classes: usize,
    pub feat_in: usize,
    pub layers: Vec<StandaloneLayer>,
    pub fc_w: Vec<f32>,
    pub fc_b: Vec<f32>,
}

impl StandaloneModel {
    pub fn eval_logits(&self, batch: &Minibatch) -> Result<Tensor> {
        if batch.resolution() != self.config.resolution {
            return Err(Error::Contract(format!(
                "batch resolution {} does not match config resolution {}",
                batch.resolution(),
                self.config.resolution
            )));
        }
        let mut tape = Tape::new();
        let mut x = tape.leaf(&batch.inputs)?;
        for layer in &self.layers {
            let w = tape.leaf_const(
                vec![layer.out_ch, layer.in_ch, layer.kernel, layer.kernel],
                layer.conv.clone(),
            )?;
            let gamma = tape.leaf_const(vec![layer.out_ch], layer.gamma.clone())?;
            let beta = tape.leaf_const(vec![layer.out_ch], layer.beta.clone())?;
            let pad = (layer.kernel - 1) / 2;
            let conv = tape.conv2d(x, w, layer.stride, pad)?;
            let bn = tape.batchnorm(
                conv,
                gamma,
                beta,
                BnMode::Eval {
                    mean: &layer.bn_mean,
                    var: &layer.bn_var,
                },
            )?;
            let act = if layer.is_stem {
                tape.hard_swish(bn)?
            } else {
                tape.relu(bn)?
            };
            x = if layer.residual { tape.add(act, x)? } else { act };
        }
        let features = tape.global_avg_pool(x)?;
        let fc_w = tape.leaf_const(vec![self.feat_in, self.num_classes], self.fc_w.clone())?;
        let fc_b = tape.leaf_const(vec![self.num_classes], self.fc_b.clone())?;
        let prod = tape.matmul(features, fc_w)?;
        let logits = tape.add(prod, fc_b)?;
        Ok(tape.detach(logits))
    }
}

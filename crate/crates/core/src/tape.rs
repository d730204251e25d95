//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every op appends a node whose operands already live on the tape, so the
//! record is topological by construction and a backward pass is a single
//! reverse sweep with deterministic accumulation order. Gradients persist on
//! the tape across backward calls and accumulate additively.

use crate::error::{Error, Result};
use crate::kernels::{self, BnBatchStats, ConvDims};
use crate::tensor::{check_finite, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Batch-norm execution mode.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with batch statistics; the node saves them for backward
    /// and for running-stat updates by the caller.
    Train,
    /// Normalize with the given frozen running statistics.
    Eval { mean: &'a [f32], var: &'a [f32] },
}

/// Running mean/variance owned by a batch-norm layer (one per stats bucket).
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnRunningStats {
    /// Fresh stats: mean 0, variance 1.
    pub fn identity(channels: usize) -> Self {
        BnRunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running = (1 - momentum) * running + momentum * batch`, with the
    /// unbiased batch variance.
    pub fn update(&mut self, batch: &BnBatchStats, momentum: f64) {
        let unbiased = batch.var_unbiased();
        for c in 0..self.mean.len() {
            self.mean[c] =
                ((1.0 - momentum) * f64::from(self.mean[c]) + momentum * batch.mean[c]) as f32;
            self.var[c] =
                ((1.0 - momentum) * f64::from(self.var[c]) + momentum * unbiased[c]) as f32;
        }
    }
}

/// Default batch-norm momentum for running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Default batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        dims: ConvDims,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
        /// true when `b` is a vector broadcast over the rows of `a`.
        bias_rows: bool,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    HardSwish {
        x: Var,
    },
    BnTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnBatchStats,
    },
    BnEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        var: Vec<f32>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    CeSmoothed {
        logits: Var,
        grad_base: Vec<f64>,
    },
    KdSoft {
        student: Var,
        grad_base: Vec<f64>,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f32>,
    requires_grad: bool,
}

/// Linear record of executed primitives with persistent gradient buffers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].values
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Copy a tape value out as a detached tensor (no grad linkage).
    pub fn detach(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            values: self.nodes[v.0].values.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Batch statistics saved by a training-mode batch-norm node.
    pub fn bn_batch_stats(&self, v: Var) -> Option<&BnBatchStats> {
        match &self.nodes[v.0].op {
            Op::BnTrain { stats, .. } => Some(stats),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f32>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            values,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        op_name: &'static str,
        op: Op,
        shape: Vec<usize>,
        values: Vec<f32>,
        requires_grad: bool,
    ) -> Result<Var> {
        check_finite(&values, op_name)?;
        Ok(self.push(op, shape, values, requires_grad))
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Insert a tensor as a leaf; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        t.check_finite("leaf")?;
        Ok(self.push(
            Op::Leaf,
            t.shape.clone(),
            t.values.clone(),
            t.requires_grad,
        ))
    }

    /// Insert raw values as a gradient-tracked leaf.
    pub fn leaf_param(&mut self, shape: Vec<usize>, values: Vec<f32>) -> Result<Var> {
        check_finite(&values, "leaf")?;
        Ok(self.push(Op::Leaf, shape, values, true))
    }

    /// Insert raw values as a constant (no gradient).
    pub fn leaf_const(&mut self, shape: Vec<usize>, values: Vec<f32>) -> Result<Var> {
        check_finite(&values, "leaf")?;
        Ok(self.push(Op::Leaf, shape, values, false))
    }

    // ── Primitives ───────────────────────────────────────────────────

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let dims = ConvDims::resolve(self.shape(x), self.shape(w), stride, pad)?;
        let values = kernels::conv2d_forward(self.values(x), self.values(w), &dims);
        let rg = self.requires_grad(x) || self.requires_grad(w);
        self.push_checked("conv2d", Op::Conv2d { x, w, dims }, dims.out_shape(), values, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                "operands",
                "[m,k] x [k,n]",
                format!("{sa:?} x {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = kernels::gemm(self.values(a), self.values(b), m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("matmul", Op::MatMul { a, b, m, k, n }, vec![m, n], values, rg)
    }

    /// Elementwise add, or row-broadcast when `b` is a vector matching the
    /// trailing axis of a 2-D `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bias_rows = sa != sb;
        if bias_rows && !(sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1]) {
            return Err(Error::shape(
                "add",
                "rhs",
                format!("shape {sa:?} or bias [{}]", sa.last().copied().unwrap_or(0)),
                format!("{sb:?}"),
            ));
        }
        let (av, bv) = (self.values(a), self.values(b));
        let values: Vec<f32> = if bias_rows {
            let n = sb[0];
            av.iter()
                .enumerate()
                .map(|(i, &v)| v + bv[i % n])
                .collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| x + y).collect()
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("add", Op::Add { a, b, bias_rows }, sa, values, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                "rhs",
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        let values: Vec<f32> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("mul", Op::Mul { a, b }, shape, values, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let values = kernels::relu_forward(self.values(x));
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push_checked("relu", Op::Relu { x }, shape, values, rg)
    }

    pub fn hard_swish(&mut self, x: Var) -> Result<Var> {
        let values = kernels::hard_swish_forward(self.values(x));
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push_checked("hard_swish", Op::HardSwish { x }, shape, values, rg)
    }

    /// Batch normalization. In train mode the node saves the batch
    /// statistics (see [`Tape::bn_batch_stats`]); in eval mode the node
    /// captures the supplied running statistics by value.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        match mode {
            BnMode::Train => {
                let (values, batch_stats) = kernels::bn_train_forward(
                    self.values(x),
                    &shape,
                    self.values(gamma),
                    self.values(beta),
                    BN_EPS,
                )?;
                self.push_checked(
                    "batchnorm",
                    Op::BnTrain {
                        x,
                        gamma,
                        beta,
                        stats: batch_stats,
                    },
                    shape,
                    values,
                    rg,
                )
            }
            BnMode::Eval { mean, var } => {
                let values = kernels::bn_eval_forward(
                    self.values(x),
                    &shape,
                    self.values(gamma),
                    self.values(beta),
                    mean,
                    var,
                    BN_EPS,
                )?;
                self.push_checked(
                    "batchnorm",
                    Op::BnEval {
                        x,
                        gamma,
                        beta,
                        mean: mean.to_vec(),
                        var: var.to_vec(),
                    },
                    shape,
                    values,
                    rg,
                )
            }
        }
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let values = kernels::global_avg_pool_forward(self.values(x), self.shape(x))?;
        let shape = vec![self.shape(x)[0], self.shape(x)[1]];
        let rg = self.requires_grad(x);
        self.push_checked("global_avg_pool", Op::GlobalAvgPool { x }, shape, values, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.values(x).len() {
            return Err(Error::shape(
                "reshape",
                "target shape",
                format!("{} elements", self.values(x).len()),
                format!("{shape:?} ({numel} elements)"),
            ));
        }
        let values = self.values(x).to_vec();
        let rg = self.requires_grad(x);
        self.push_checked("reshape", Op::Reshape { x }, shape, values, rg)
    }

    /// Sum all elements to a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let values = vec![kernels::sum_all(self.values(x))];
        let rg = self.requires_grad(x);
        self.push_checked("sum", Op::Sum { x }, vec![], values, rg)
    }

    /// Inverted dropout with a precomputed mask of `{0, 1/(1-p)}` entries.
    pub fn dropout(&mut self, x: Var, mask: Vec<f32>) -> Result<Var> {
        if mask.len() != self.values(x).len() {
            return Err(Error::shape(
                "dropout",
                "mask",
                format!("{} elements", self.values(x).len()),
                format!("{} elements", mask.len()),
            ));
        }
        let values: Vec<f32> = self
            .values(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push_checked("dropout", Op::Dropout { x, mask }, shape, values, rg)
    }

    // ── Losses ───────────────────────────────────────────────────────

    /// Mean smoothed cross-entropy of `[B, C]` logits against integer labels.
    pub fn loss_ce_smoothed(&mut self, logits: Var, labels: &[u32], smoothing: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(
                "loss_ce_smoothed",
                "logits",
                "[batch, classes]",
                format!("{shape:?}"),
            ));
        }
        let (batch, classes) = (shape[0], shape[1]);
        if labels.len() != batch {
            return Err(Error::shape(
                "loss_ce_smoothed",
                "labels",
                format!("{batch} labels"),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= classes) {
            return Err(Error::Validation(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        let (loss, grad_base) =
            kernels::ce_smoothed(self.values(logits), labels, batch, classes, smoothing)?;
        let rg = self.requires_grad(logits);
        self.push_checked(
            "loss_ce_smoothed",
            Op::CeSmoothed { logits, grad_base },
            vec![],
            vec![loss],
            rg,
        )
    }

    /// Mean soft-target cross-entropy of student logits against the softmax
    /// of detached teacher logits. The teacher must not require grad.
    pub fn loss_kd_soft(&mut self, student: Var, teacher: Var) -> Result<Var> {
        if self.requires_grad(teacher) {
            return Err(Error::Contract(
                "kd teacher logits must be detached (stop-gradient invariant)".into(),
            ));
        }
        let shape = self.shape(student).to_vec();
        if shape.len() != 2 || self.shape(teacher) != shape.as_slice() {
            return Err(Error::shape(
                "loss_kd_soft",
                "teacher",
                format!("{shape:?}"),
                format!("{:?}", self.shape(teacher)),
            ));
        }
        let (batch, classes) = (shape[0], shape[1]);
        let (loss, grad_base) =
            kernels::kd_soft(self.values(student), self.values(teacher), batch, classes)?;
        let rg = self.requires_grad(student);
        self.push_checked(
            "loss_kd_soft",
            Op::KdSoft { student, grad_base },
            vec![],
            vec![loss],
            rg,
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of everything reachable
    /// accumulate additively into the tape's persistent buffers; unreachable
    /// nodes are untouched.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.shape
            )));
        }
        // Per-pass buffers; folded into the persistent grads at the end.
        let mut pass: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        pass[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let upstream = match pass[id].take() {
                Some(g) => g,
                None => continue,
            };
            check_finite(&upstream, "backward gradient")?;
            // Consumers all have higher ids, so `upstream` is complete here;
            // fold it into the persistent buffer before propagating.
            if self.nodes[id].requires_grad {
                match &mut self.grads[id] {
                    Some(buf) => {
                        for (acc, d) in buf.iter_mut().zip(&upstream) {
                            *acc += *d;
                        }
                    }
                    None => self.grads[id] = Some(upstream.clone()),
                }
            }
            let mut sends: Vec<(usize, Vec<f32>)> = Vec::new();
            {
                let node = &self.nodes[id];
                match &node.op {
                    Op::Leaf => {}
                    Op::Conv2d { x, w, dims } => {
                        let (dx, dw) = kernels::conv2d_backward(
                            &self.nodes[x.0].values,
                            &self.nodes[w.0].values,
                            dims,
                            &upstream,
                            self.nodes[x.0].requires_grad,
                            self.nodes[w.0].requires_grad,
                        );
                        if let Some(dx) = dx {
                            sends.push((x.0, dx));
                        }
                        if let Some(dw) = dw {
                            sends.push((w.0, dw));
                        }
                    }
                    Op::MatMul { a, b, m, k, n } => {
                        if self.nodes[a.0].requires_grad {
                            // dA = dY * B^T : [m,n] x [n,k] via abt with B as [k,n]
                            let bt_rows = &self.nodes[b.0].values;
                            let mut bt = vec![0.0f32; k * n];
                            for i in 0..*k {
                                for j in 0..*n {
                                    bt[j * k + i] = bt_rows[i * n + j];
                                }
                            }
                            sends.push((a.0, kernels::gemm(&upstream, &bt, *m, *n, *k)));
                        }
                        if self.nodes[b.0].requires_grad {
                            // dB = A^T * dY
                            sends.push((
                                b.0,
                                kernels::gemm_atb(
                                    &self.nodes[a.0].values,
                                    &upstream,
                                    *m,
                                    *k,
                                    *n,
                                ),
                            ));
                        }
                    }
                    Op::Add { a, b, bias_rows } => {
                        if self.nodes[a.0].requires_grad {
                            sends.push((a.0, upstream.clone()));
                        }
                        if self.nodes[b.0].requires_grad {
                            if *bias_rows {
                                let n = self.nodes[b.0].values.len();
                                let mut db = vec![0.0f64; n];
                                for (i, &g) in upstream.iter().enumerate() {
                                    db[i % n] += f64::from(g);
                                }
                                sends.push((b.0, db.into_iter().map(|v| v as f32).collect()));
                            } else {
                                sends.push((b.0, upstream.clone()));
                            }
                        }
                    }
                    Op::Mul { a, b } => {
                        if self.nodes[a.0].requires_grad {
                            let da: Vec<f32> = upstream
                                .iter()
                                .zip(&self.nodes[b.0].values)
                                .map(|(&g, &v)| g * v)
                                .collect();
                            sends.push((a.0, da));
                        }
                        if self.nodes[b.0].requires_grad {
                            let db: Vec<f32> = upstream
                                .iter()
                                .zip(&self.nodes[a.0].values)
                                .map(|(&g, &v)| g * v)
                                .collect();
                            sends.push((b.0, db));
                        }
                    }
                    Op::Relu { x } => {
                        if self.nodes[x.0].requires_grad {
                            sends.push((
                                x.0,
                                kernels::relu_backward(&self.nodes[x.0].values, &upstream),
                            ));
                        }
                    }
                    Op::HardSwish { x } => {
                        if self.nodes[x.0].requires_grad {
                            sends.push((
                                x.0,
                                kernels::hard_swish_backward(&self.nodes[x.0].values, &upstream),
                            ));
                        }
                    }
                    Op::BnTrain {
                        x,
                        gamma,
                        beta,
                        stats,
                    } => {
                        let (dx, dgamma, dbeta) = kernels::bn_train_backward(
                            &self.nodes[x.0].values,
                            &self.nodes[x.0].shape,
                            &self.nodes[gamma.0].values,
                            stats,
                            &upstream,
                        );
                        if self.nodes[x.0].requires_grad {
                            sends.push((x.0, dx));
                        }
                        if self.nodes[gamma.0].requires_grad {
                            sends.push((gamma.0, dgamma));
                        }
                        if self.nodes[beta.0].requires_grad {
                            sends.push((beta.0, dbeta));
                        }
                    }
                    Op::BnEval {
                        x,
                        gamma,
                        beta,
                        mean,
                        var,
                    } => {
                        let (dx, dgamma, dbeta) = kernels::bn_eval_backward(
                            &self.nodes[x.0].values,
                            &self.nodes[x.0].shape,
                            &self.nodes[gamma.0].values,
                            mean,
                            var,
                            BN_EPS,
                            &upstream,
                        );
                        if self.nodes[x.0].requires_grad {
                            sends.push((x.0, dx));
                        }
                        if self.nodes[gamma.0].requires_grad {
                            sends.push((gamma.0, dgamma));
                        }
                        if self.nodes[beta.0].requires_grad {
                            sends.push((beta.0, dbeta));
                        }
                    }
                    Op::GlobalAvgPool { x } => {
                        if self.nodes[x.0].requires_grad {
                            sends.push((
                                x.0,
                                kernels::global_avg_pool_backward(
                                    &self.nodes[x.0].shape,
                                    &upstream,
                                ),
                            ));
                        }
                    }
                    Op::Reshape { x } => {
                        if self.nodes[x.0].requires_grad {
                            sends.push((x.0, upstream.clone()));
                        }
                    }
                    Op::Sum { x } => {
                        if self.nodes[x.0].requires_grad {
                            let g = upstream[0];
                            sends.push((x.0, vec![g; self.nodes[x.0].values.len()]));
                        }
                    }
                    Op::Dropout { x, mask } => {
                        if self.nodes[x.0].requires_grad {
                            let dx: Vec<f32> = upstream
                                .iter()
                                .zip(mask)
                                .map(|(&g, &m)| g * m)
                                .collect();
                            sends.push((x.0, dx));
                        }
                    }
                    Op::CeSmoothed { logits, grad_base } => {
                        if self.nodes[logits.0].requires_grad {
                            let g = f64::from(upstream[0]);
                            let d: Vec<f32> =
                                grad_base.iter().map(|&b| (b * g) as f32).collect();
                            sends.push((logits.0, d));
                        }
                    }
                    Op::KdSoft { student, grad_base } => {
                        if self.nodes[student.0].requires_grad {
                            let g = f64::from(upstream[0]);
                            let d: Vec<f32> =
                                grad_base.iter().map(|&b| (b * g) as f32).collect();
                            sends.push((student.0, d));
                        }
                    }
                }
            }
            for (target, delta) in sends {
                debug_assert!(target < id, "tape must be topological");
                match &mut pass[target] {
                    Some(buf) => {
                        for (acc, d) in buf.iter_mut().zip(&delta) {
                            *acc += *d;
                        }
                    }
                    None => pass[target] = Some(delta),
                }
            }
        }

        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_gradient() {
        // loss = sum(w * x), grad(w) = x.
        let mut tape = Tape::new();
        let w = tape.leaf_param(vec![2], vec![1.0, 2.0]).unwrap();
        let x = tape.leaf_const(vec![2], vec![3.0, 4.0]).unwrap();
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w), Some(&[3.0f32, 4.0][..]));
        assert_eq!(tape.grad(x), None);
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let mut tape = Tape::new();
        let w = tape.leaf_param(vec![2], vec![1.0, 2.0]).unwrap();
        let x = tape.leaf_const(vec![2], vec![3.0, 4.0]).unwrap();
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w), Some(&[6.0f32, 8.0][..]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf_param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = tape.relu(w).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn kd_teacher_must_be_detached() {
        let mut tape = Tape::new();
        let student = tape.leaf_param(vec![1, 2], vec![0.0, 0.5]).unwrap();
        let live_teacher = tape.leaf_param(vec![1, 2], vec![0.1, 0.2]).unwrap();
        assert!(tape.loss_kd_soft(student, live_teacher).is_err());
        let detached = tape.leaf_const(vec![1, 2], vec![0.1, 0.2]).unwrap();
        assert!(tape.loss_kd_soft(student, detached).is_ok());
    }

    #[test]
    fn non_finite_forward_aborts() {
        let mut tape = Tape::new();
        let big = tape.leaf_param(vec![2], vec![3.0e38, 3.0e38]).unwrap();
        // 3e38 + 3e38 overflows f32.
        assert!(matches!(
            tape.add(big, big),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn unreachable_params_untouched() {
        let mut tape = Tape::new();
        let used = tape.leaf_param(vec![2], vec![1.0, 2.0]).unwrap();
        let unused = tape.leaf_param(vec![2], vec![5.0, 6.0]).unwrap();
        let loss = tape.sum(used).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(used).is_some());
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn running_stats_update_uses_unbiased_var() {
        let mut tape = Tape::new();
        let x = tape
            .leaf_const(vec![2, 1], vec![0.0, 2.0]) // mean 1, biased var 1, unbiased 2
            .unwrap();
        let g = tape.leaf_const(vec![1], vec![1.0]).unwrap();
        let b = tape.leaf_const(vec![1], vec![0.0]).unwrap();
        let mut stats = BnRunningStats::identity(1);
        let y = tape.batchnorm(x, g, b, BnMode::Train).unwrap();
        stats.update(tape.bn_batch_stats(y).unwrap(), BN_MOMENTUM);
        assert!((stats.mean[0] - 0.1).abs() < 1e-6); // 0.9*0 + 0.1*1
        assert!((stats.var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-6);
    }

    #[test]
    fn dropout_scales_and_masks() {
        let mut tape = Tape::new();
        let x = tape.leaf_param(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = tape.dropout(x, vec![0.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(tape.values(y), &[0.0, 4.0, 0.0, 8.0]);
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), Some(&[0.0f32, 2.0, 0.0, 2.0][..]));
    }
}

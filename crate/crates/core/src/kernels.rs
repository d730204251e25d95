//! Numeric kernels behind the tape ops.
//!
//! Storage is f32; every reduction (GEMM inner products, batch statistics,
//! loss log-sum-exp, pooling) accumulates in f64 before casting back. Loop
//! orders are fixed, so results are bit-identical across runs.

use crate::error::{Error, Result};

// ── GEMM variants ────────────────────────────────────────────────────

/// `a [m,k] * b [k,n] -> [m,n]`.
pub fn gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = f64::from(a[i * k + p]);
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += a_ip * f64::from(b_row[j]);
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// `a [m,k] * b^T` with `b [n,k]` -> `[m,n]`.
pub fn gemm_abt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += f64::from(a_row[p]) * f64::from(b_row[p]);
            }
            out[i * n + j] = acc as f32;
        }
    }
    out
}

/// `a^T * b` with `a [r,m]`, `b [r,n]` -> `[m,n]`.
pub fn gemm_atb(a: &[f32], b: &[f32], r: usize, m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f64; m * n];
    for row in 0..r {
        let b_row = &b[row * n..(row + 1) * n];
        for i in 0..m {
            let a_ri = f64::from(a[row * m + i]);
            let dst = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] += a_ri * f64::from(b_row[j]);
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

// ── Convolution (im2col) ─────────────────────────────────────────────

/// Resolved conv2d geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    pub fn resolve(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                "input",
                "[batch, in_c, h, w]",
                format!("{input_shape:?}"),
            ));
        }
        if kernel_shape.len() != 4 || kernel_shape[2] != kernel_shape[3] {
            return Err(Error::shape(
                "conv2d",
                "kernel",
                "[out_c, in_c, k, k]",
                format!("{kernel_shape:?}"),
            ));
        }
        if kernel_shape[1] != input_shape[1] {
            return Err(Error::shape(
                "conv2d",
                "kernel",
                format!("in_c = {}", input_shape[1]),
                format!("in_c = {}", kernel_shape[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::Validation("conv2d stride must be >= 1".into()));
        }
        let (in_h, in_w, k) = (input_shape[2], input_shape[3], kernel_shape[2]);
        if in_h + 2 * pad < k || in_w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                "input",
                format!("spatial extent >= kernel {k} (pad {pad})"),
                format!("{in_h}x{in_w}"),
            ));
        }
        Ok(ConvDims {
            batch: input_shape[0],
            in_c: input_shape[1],
            in_h,
            in_w,
            out_c: kernel_shape[0],
            k,
            stride,
            pad,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_c, self.out_h, self.out_w]
    }
}

/// Expand input into patch rows `[B*OH*OW, Cin*K*K]`; out-of-bounds taps are
/// explicit zeros.
pub fn im2col(input: &[f32], d: &ConvDims) -> Vec<f32> {
    let plen = d.patch_len();
    let mut patches = vec![0.0f32; d.out_positions() * plen];
    let mut row = 0usize;
    for b in 0..d.batch {
        let ibase = b * d.in_c * d.in_h * d.in_w;
        for oy in 0..d.out_h {
            for ox in 0..d.out_w {
                let dst = &mut patches[row * plen..(row + 1) * plen];
                let mut col = 0usize;
                for c in 0..d.in_c {
                    let cbase = ibase + c * d.in_h * d.in_w;
                    for ky in 0..d.k {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        for kx in 0..d.k {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if iy >= 0 && iy < d.in_h as isize && ix >= 0 && ix < d.in_w as isize {
                                dst[col] = input[cbase + iy as usize * d.in_w + ix as usize];
                            }
                            col += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    patches
}

/// Patch-rows layout `[rows, Cin*K*K]` back to `[B, Cin, H, W]`,
/// accumulating overlapping taps in f64.
fn col2im(dpatches: &[f32], d: &ConvDims) -> Vec<f32> {
    let plen = d.patch_len();
    let mut dinput = vec![0.0f64; d.batch * d.in_c * d.in_h * d.in_w];
    let mut row = 0usize;
    for b in 0..d.batch {
        let ibase = b * d.in_c * d.in_h * d.in_w;
        for oy in 0..d.out_h {
            for ox in 0..d.out_w {
                let src = &dpatches[row * plen..(row + 1) * plen];
                let mut col = 0usize;
                for c in 0..d.in_c {
                    let cbase = ibase + c * d.in_h * d.in_w;
                    for ky in 0..d.k {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        for kx in 0..d.k {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if iy >= 0 && iy < d.in_h as isize && ix >= 0 && ix < d.in_w as isize {
                                dinput[cbase + iy as usize * d.in_w + ix as usize] +=
                                    f64::from(src[col]);
                            }
                            col += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dinput.into_iter().map(|v| v as f32).collect()
}

/// Forward conv. Output layout is `[B, Cout, OH, OW]`.
pub fn conv2d_forward(input: &[f32], kernel: &[f32], d: &ConvDims) -> Vec<f32> {
    let patches = im2col(input, d);
    // rows x out_c, with kernel rows as [out_c, plen]
    let flat = gemm_abt(&patches, kernel, d.out_positions(), d.patch_len(), d.out_c);
    // [B*OH*OW, Cout] -> [B, Cout, OH, OW]
    let (oh, ow, oc) = (d.out_h, d.out_w, d.out_c);
    let mut out = vec![0.0f32; flat.len()];
    for b in 0..d.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (b * oh + oy) * ow + ox;
                for c in 0..oc {
                    out[((b * oc + c) * oh + oy) * ow + ox] = flat[row * oc + c];
                }
            }
        }
    }
    out
}

/// Backward conv; returns `(dinput, dkernel)`, either omitted when not needed.
pub fn conv2d_backward(
    input: &[f32],
    kernel: &[f32],
    d: &ConvDims,
    dout: &[f32],
    need_dinput: bool,
    need_dkernel: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    // [B, Cout, OH, OW] -> [B*OH*OW, Cout]
    let (oh, ow, oc) = (d.out_h, d.out_w, d.out_c);
    let mut dflat = vec![0.0f32; dout.len()];
    for b in 0..d.batch {
        for c in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    dflat[((b * oh + oy) * ow + ox) * oc + c] =
                        dout[((b * oc + c) * oh + oy) * ow + ox];
                }
            }
        }
    }
    let rows = d.out_positions();
    let plen = d.patch_len();
    let dkernel = if need_dkernel {
        let patches = im2col(input, d);
        Some(gemm_atb(&dflat, &patches, rows, oc, plen))
    } else {
        None
    };
    let dinput = if need_dinput {
        let dpatches = gemm(&dflat, kernel, rows, oc, plen);
        Some(col2im(&dpatches, d))
    } else {
        None
    };
    (dinput, dkernel)
}

// ── Batch normalization ──────────────────────────────────────────────

/// Saved batch statistics from a training-mode forward.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    /// Per-channel batch mean.
    pub mean: Vec<f64>,
    /// Per-channel biased batch variance (divides by n).
    pub var: Vec<f64>,
    /// 1 / sqrt(var + eps).
    pub inv_std: Vec<f64>,
    /// Elements per channel (batch * spatial).
    pub count: usize,
}

impl BnBatchStats {
    /// Unbiased variance `var * n / (n - 1)`.
    pub fn var_unbiased(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.var.iter().map(|v| v * n / (n - 1.0)).collect()
    }
}

fn bn_geometry(shape: &[usize]) -> Result<(usize, usize, usize)> {
    let (batch, channels, spatial) = match shape.len() {
        2 => (shape[0], shape[1], 1),
        4 => (shape[0], shape[1], shape[2] * shape[3]),
        _ => {
            return Err(Error::shape(
                "batchnorm",
                "input",
                "[batch, channels] or [batch, channels, h, w]",
                format!("{shape:?}"),
            ))
        }
    };
    Ok((batch, channels, spatial))
}

/// Training-mode forward: normalize with the current batch statistics.
pub fn bn_train_forward(
    x: &[f32],
    shape: &[usize],
    gamma: &[f32],
    beta: &[f32],
    eps: f64,
) -> Result<(Vec<f32>, BnBatchStats)> {
    let (batch, channels, spatial) = bn_geometry(shape)?;
    if gamma.len() != channels || beta.len() != channels {
        return Err(Error::shape(
            "batchnorm",
            "gamma/beta",
            format!("{channels} channels"),
            format!("{}/{}", gamma.len(), beta.len()),
        ));
    }
    let n = batch * spatial;
    if n < 2 {
        return Err(Error::Contract(
            "batchnorm training mode needs at least 2 elements per channel".into(),
        ));
    }
    let mut mean = vec![0.0f64; channels];
    let mut var = vec![0.0f64; channels];
    for c in 0..channels {
        let mut sum = 0.0f64;
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for s in 0..spatial {
                sum += f64::from(x[base + s]);
            }
        }
        let m = sum / n as f64;
        let mut sq = 0.0f64;
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for s in 0..spatial {
                let d = f64::from(x[base + s]) - m;
                sq += d * d;
            }
        }
        mean[c] = m;
        var[c] = sq / n as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![0.0f32; x.len()];
    for c in 0..channels {
        let (g, bt) = (f64::from(gamma[c]), f64::from(beta[c]));
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for s in 0..spatial {
                let xhat = (f64::from(x[base + s]) - mean[c]) * inv_std[c];
                y[base + s] = (g * xhat + bt) as f32;
            }
        }
    }
    Ok((
        y,
        BnBatchStats {
            mean,
            var,
            inv_std,
            count: n,
        },
    ))
}

/// Training-mode backward through the batch statistics.
pub fn bn_train_backward(
    x: &[f32],
    shape: &[usize],
    gamma: &[f32],
    stats: &BnBatchStats,
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (batch, channels, spatial) = bn_geometry(shape).expect("validated in forward");
    let n = stats.count as f64;
    let mut dx = vec![0.0f32; x.len()];
    let mut dgamma = vec![0.0f32; channels];
    let mut dbeta = vec![0.0f32; channels];
    for c in 0..channels {
        let (m, istd) = (stats.mean[c], stats.inv_std[c]);
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for s in 0..spatial {
                let g = f64::from(dy[base + s]);
                let xhat = (f64::from(x[base + s]) - m) * istd;
                sum_dy += g;
                sum_dy_xhat += g * xhat;
            }
        }
        dbeta[c] = sum_dy as f32;
        dgamma[c] = sum_dy_xhat as f32;
        let scale = f64::from(gamma[c]) * istd;
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for s in 0..spatial {
                let g = f64::from(dy[base + s]);
                let xhat = (f64::from(x[base + s]) - m) * istd;
                dx[base + s] =
                    (scale * (g - sum_dy / n - xhat * sum_dy_xhat / n)) as f32;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode forward: affine transform with frozen running statistics.
pub fn bn_eval_forward(
    x: &[f32],
    shape: &[usize],
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    eps: f64,
) -> Result<Vec<f32>> {
    let (batch, channels, spatial) = bn_geometry(shape)?;
    if gamma.len() != channels
        || beta.len() != channels
        || running_mean.len() != channels
        || running_var.len() != channels
    {
        return Err(Error::shape(
            "batchnorm",
            "gamma/beta/running stats",
            format!("{channels} channels"),
            format!(
                "{}/{}/{}/{}",
                gamma.len(),
                beta.len(),
                running_mean.len(),
                running_var.len()
            ),
        ));
    }
    let mut y = vec![0.0f32; x.len()];
    for c in 0..channels {
        let istd = 1.0 / (f64::from(running_var[c]) + eps).sqrt();
        let scale = f64::from(gamma[c]) * istd;
        let shift = f64::from(beta[c]) - scale * f64::from(running_mean[c]);
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for s in 0..spatial {
                y[base + s] = (scale * f64::from(x[base + s]) + shift) as f32;
            }
        }
    }
    Ok(y)
}

/// Eval-mode backward: statistics are constants, so dx is a per-channel scale.
pub fn bn_eval_backward(
    x: &[f32],
    shape: &[usize],
    gamma: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    eps: f64,
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (batch, channels, spatial) = bn_geometry(shape).expect("validated in forward");
    let mut dx = vec![0.0f32; x.len()];
    let mut dgamma = vec![0.0f32; channels];
    let mut dbeta = vec![0.0f32; channels];
    for c in 0..channels {
        let istd = 1.0 / (f64::from(running_var[c]) + eps).sqrt();
        let m = f64::from(running_mean[c]);
        let scale = f64::from(gamma[c]) * istd;
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for s in 0..spatial {
                let g = f64::from(dy[base + s]);
                sum_dy += g;
                sum_dy_xhat += g * (f64::from(x[base + s]) - m) * istd;
                dx[base + s] = (scale * g) as f32;
            }
        }
        dbeta[c] = sum_dy as f32;
        dgamma[c] = sum_dy_xhat as f32;
    }
    (dx, dgamma, dbeta)
}

// ── Elementwise and reductions ───────────────────────────────────────

pub fn relu_forward(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

/// `x * relu6(x + 3) / 6`.
pub fn hard_swish_forward(x: &[f32]) -> Vec<f32> {
    x.iter()
        .map(|&v| v * (v + 3.0).clamp(0.0, 6.0) / 6.0)
        .collect()
}

pub fn hard_swish_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let d = if v <= -3.0 {
                0.0
            } else if v >= 3.0 {
                1.0
            } else {
                (2.0 * v + 3.0) / 6.0
            };
            g * d
        })
        .collect()
}

/// `[B, C, H, W] -> [B, C]` spatial mean.
pub fn global_avg_pool_forward(x: &[f32], shape: &[usize]) -> Result<Vec<f32>> {
    if shape.len() != 4 {
        return Err(Error::shape(
            "global_avg_pool",
            "input",
            "[batch, channels, h, w]",
            format!("{shape:?}"),
        ));
    }
    let (batch, channels, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![0.0f32; batch * channels];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * spatial;
            let mut acc = 0.0f64;
            for s in 0..spatial {
                acc += f64::from(x[base + s]);
            }
            out[b * channels + c] = (acc / spatial as f64) as f32;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward(shape: &[usize], dy: &[f32]) -> Vec<f32> {
    let (batch, channels, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut dx = vec![0.0f32; batch * channels * spatial];
    for b in 0..batch {
        for c in 0..channels {
            let g = dy[b * channels + c] / spatial as f32;
            let base = (b * channels + c) * spatial;
            for s in 0..spatial {
                dx[base + s] = g;
            }
        }
    }
    dx
}

/// Sum all elements to one f64-accumulated scalar.
pub fn sum_all(x: &[f32]) -> f32 {
    x.iter().map(|&v| f64::from(v)).sum::<f64>() as f32
}

// ── Losses ───────────────────────────────────────────────────────────

/// Per-row log-sum-exp of `[rows, cols]` logits, in f64.
fn row_lse(logits: &[f32], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; rows];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
        let mut acc = 0.0f64;
        for &v in row {
            acc += (f64::from(v) - max).exp();
        }
        out[r] = max + acc.ln();
    }
    out
}

/// Smoothed cross-entropy over `[B, C]` logits.
///
/// Target puts `1 - smoothing` on the true class and `smoothing / (C - 1)`
/// on every other class. Returns `(loss, dlogits_base)` where the gradient
/// w.r.t. logits is `dlogits_base * upstream`.
pub fn ce_smoothed(
    logits: &[f32],
    labels: &[u32],
    batch: usize,
    classes: usize,
    smoothing: f64,
) -> Result<(f32, Vec<f64>)> {
    if classes < 2 {
        return Err(Error::Contract(format!(
            "cross-entropy needs at least 2 classes, got {classes}"
        )));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Contract(format!(
            "label smoothing must be in [0, 1), got {smoothing}"
        )));
    }
    let lse = row_lse(logits, batch, classes);
    let off = smoothing / (classes as f64 - 1.0);
    let on = 1.0 - smoothing;
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f64; batch * classes];
    for b in 0..batch {
        let row = &logits[b * classes..(b + 1) * classes];
        let label = labels[b] as usize;
        let mut dot = 0.0f64;
        for (c, &v) in row.iter().enumerate() {
            let t = if c == label { on } else { off };
            dot += t * f64::from(v);
            let p = (f64::from(v) - lse[b]).exp();
            grad[b * classes + c] = (p - t) / batch as f64;
        }
        loss += lse[b] - dot;
    }
    Ok(((loss / batch as f64) as f32, grad))
}

/// Soft-target cross-entropy: `softmax(teacher)` as the target distribution
/// for `softmax(student)`, averaged over the batch. The gradient flows only
/// into the student logits.
pub fn kd_soft(
    student: &[f32],
    teacher: &[f32],
    batch: usize,
    classes: usize,
) -> Result<(f32, Vec<f64>)> {
    if classes < 2 {
        return Err(Error::Contract(format!(
            "soft-target cross-entropy needs at least 2 classes, got {classes}"
        )));
    }
    let s_lse = row_lse(student, batch, classes);
    let t_lse = row_lse(teacher, batch, classes);
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f64; batch * classes];
    for b in 0..batch {
        let s_row = &student[b * classes..(b + 1) * classes];
        let t_row = &teacher[b * classes..(b + 1) * classes];
        let mut dot = 0.0f64;
        for c in 0..classes {
            let t = (f64::from(t_row[c]) - t_lse[b]).exp();
            let p = (f64::from(s_row[c]) - s_lse[b]).exp();
            dot += t * f64::from(s_row[c]);
            grad[b * classes + c] = (p - t) / batch as f64;
        }
        loss += s_lse[b] - dot;
    }
    Ok(((loss / batch as f64) as f32, grad))
}

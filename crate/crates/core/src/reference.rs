//! Independent 64-bit reference implementations.
//!
//! These are deliberately naive (explicit zero padding, straight nested
//! loops, no im2col) and share no code with the tape kernels. The test
//! suites use them as oracles: finite-difference gradient checks re-evaluate
//! networks through this path in f64, and the conv here carries an
//! instrumented multiply-accumulate counter that the MACs accounting must
//! match exactly.

/// Counts every fused multiply-add executed by the reference ops.
#[derive(Debug, Default, Clone, Copy)]
pub struct MacCounter {
    pub macs: u64,
}

/// Naive conv2d in f64. Input `[B, Cin, H, W]`, kernel `[Cout, Cin, K, K]`.
/// Padding is materialized, so every tap is a real multiply and the counter
/// advances once per multiply-accumulate.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    input: &[f64],
    kernel: &[f64],
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    counter: &mut MacCounter,
) -> (Vec<f64>, usize, usize) {
    let (ph, pw) = (in_h + 2 * pad, in_w + 2 * pad);
    let mut padded = vec![0.0f64; batch * in_c * ph * pw];
    for b in 0..batch {
        for c in 0..in_c {
            for y in 0..in_h {
                for x in 0..in_w {
                    padded[((b * in_c + c) * ph + y + pad) * pw + x + pad] =
                        input[((b * in_c + c) * in_h + y) * in_w + x];
                }
            }
        }
    }
    let out_h = (ph - k) / stride + 1;
    let out_w = (pw - k) / stride + 1;
    let mut out = vec![0.0f64; batch * out_c * out_h * out_w];
    for b in 0..batch {
        for oc in 0..out_c {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = 0.0f64;
                    for ic in 0..in_c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iv = padded
                                    [((b * in_c + ic) * ph + oy * stride + ky) * pw
                                        + ox * stride
                                        + kx];
                                let kv = kernel[((oc * in_c + ic) * k + ky) * k + kx];
                                acc += iv * kv;
                                counter.macs += 1;
                            }
                        }
                    }
                    out[((b * out_c + oc) * out_h + oy) * out_w + ox] = acc;
                }
            }
        }
    }
    (out, out_h, out_w)
}

/// `a [m,k] * b [k,n]`, counting one MAC per multiply.
pub fn matmul(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    counter: &mut MacCounter,
) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
                counter.macs += 1;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Training-mode batch norm over channel axis 1 of `[B,C,...]`.
pub fn bn_train(
    x: &[f64],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let n = (batch * spatial) as f64;
    let mut y = vec![0.0f64; x.len()];
    for c in 0..channels {
        let mut sum = 0.0;
        for b in 0..batch {
            for s in 0..spatial {
                sum += x[(b * channels + c) * spatial + s];
            }
        }
        let mean = sum / n;
        let mut sq = 0.0;
        for b in 0..batch {
            for s in 0..spatial {
                let d = x[(b * channels + c) * spatial + s] - mean;
                sq += d * d;
            }
        }
        let inv_std = 1.0 / (sq / n + eps).sqrt();
        for b in 0..batch {
            for s in 0..spatial {
                let i = (b * channels + c) * spatial + s;
                y[i] = gamma[c] * (x[i] - mean) * inv_std + beta[c];
            }
        }
    }
    y
}

/// Eval-mode batch norm with frozen running statistics.
#[allow(clippy::too_many_arguments)]
pub fn bn_eval(
    x: &[f64],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut y = vec![0.0f64; x.len()];
    for c in 0..channels {
        let inv_std = 1.0 / (var[c] + eps).sqrt();
        for b in 0..batch {
            for s in 0..spatial {
                let i = (b * channels + c) * spatial + s;
                y[i] = gamma[c] * (x[i] - mean[c]) * inv_std + beta[c];
            }
        }
    }
    y
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn hard_swish(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| v * (v + 3.0).clamp(0.0, 6.0) / 6.0)
        .collect()
}

pub fn global_avg_pool(x: &[f64], batch: usize, channels: usize, spatial: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; batch * channels];
    for b in 0..batch {
        for c in 0..channels {
            let mut acc = 0.0;
            for s in 0..spatial {
                acc += x[(b * channels + c) * spatial + s];
            }
            out[b * channels + c] = acc / spatial as f64;
        }
    }
    out
}

/// Smoothed cross-entropy, mean over rows.
pub fn ce_smoothed(
    logits: &[f64],
    labels: &[u32],
    batch: usize,
    classes: usize,
    smoothing: f64,
) -> f64 {
    let off = smoothing / (classes as f64 - 1.0);
    let on = 1.0 - smoothing;
    let mut total = 0.0;
    for b in 0..batch {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let mut dot = 0.0;
        for (c, &v) in row.iter().enumerate() {
            let t = if c == labels[b] as usize { on } else { off };
            dot += t * v;
        }
        total += lse - dot;
    }
    total / batch as f64
}

/// Soft-target cross-entropy against `softmax(teacher)`, mean over rows.
pub fn kd_soft(student: &[f64], teacher: &[f64], batch: usize, classes: usize) -> f64 {
    let mut total = 0.0;
    for b in 0..batch {
        let s_row = &student[b * classes..(b + 1) * classes];
        let t_row = &teacher[b * classes..(b + 1) * classes];
        let s_max = s_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s_lse = s_max + s_row.iter().map(|v| (v - s_max).exp()).sum::<f64>().ln();
        let t_max = t_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let t_lse = t_max + t_row.iter().map(|v| (v - t_max).exp()).sum::<f64>().ln();
        let mut dot = 0.0;
        for c in 0..classes {
            dot += (t_row[c] - t_lse).exp() * s_row[c];
        }
        total += s_lse - dot;
    }
    total / batch as f64
}

/// L2 norm in f64.
pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Cosine similarity in f64; `None` when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na.sqrt() * nb.sqrt()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_counter_counts_padded_taps() {
        let mut counter = MacCounter::default();
        // 8x8, s=1, p=1 keeps 8x8; 8*8*8*4*9 = 18432 including padded taps.
        let input = vec![1.0f64; 4 * 64];
        let kernel = vec![1.0f64; 8 * 4 * 9];
        let (_, oh, ow) = conv2d(&input, &kernel, 1, 4, 8, 8, 8, 3, 1, 1, &mut counter);
        assert_eq!((oh, ow), (8, 8));
        assert_eq!(counter.macs, 18_432);
    }

    #[test]
    fn matmul_counter() {
        let mut counter = MacCounter::default();
        matmul(&[1.0; 16], &[1.0; 160], 1, 16, 10, &mut counter);
        assert_eq!(counter.macs, 160);
    }

    #[test]
    fn cosine_endpoints() {
        let v = [1.0f32, -2.0, 3.0];
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine(&v, &[0.0, 0.0, 0.0]).is_none());
    }
}

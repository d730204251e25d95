//! Randomized tiny networks with twin execution paths, used by the test
//! suites for finite-difference gradient checks.
//!
//! Each net can run (a) through the tape engine, producing reverse-mode
//! gradients, and (b) as a pure f64 function of its parameters through the
//! naive [`crate::reference`] ops. The two paths share no numeric code, so
//! central differences over (b) are an independent oracle for (a).

use crate::error::Result;
use crate::reference;
use crate::rng::stream;
use crate::tape::{BnMode, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone)]
pub struct TestBlock {
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub residual: bool,
    pub hswish: bool,
    /// `Some((mean, var))` switches this block's batch norm to eval mode.
    pub bn_eval: Option<(Vec<f32>, Vec<f32>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestLoss {
    CeSmoothed,
    KdSoft,
}

/// One sampled tiny net: parameters, a fixed input batch, and a loss.
#[derive(Debug, Clone)]
pub struct TestNet {
    pub in_ch: usize,
    pub res: usize,
    pub classes: usize,
    pub blocks: Vec<TestBlock>,
    pub loss: TestLoss,
    pub smoothing: f64,
    /// `(name, shape, values)`; conv/gamma/beta per block, then fc w and b.
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub input: Vec<f32>,
    pub batch: usize,
    pub labels: Vec<u32>,
    /// Fixed teacher logits for the KD loss.
    pub teacher: Vec<f32>,
}

impl TestNet {
    /// Sample a random architecture and parameter set.
    pub fn random(seed: u64) -> TestNet {
        let mut rng = stream(seed, "testnet");
        let batch = rng.gen_range(2..=3usize);
        let in_ch = rng.gen_range(1..=2usize);
        let res = rng.gen_range(5..=7usize);
        let classes = rng.gen_range(3..=5usize);
        let n_blocks = rng.gen_range(1..=3usize);
        let mut blocks = Vec::new();
        let mut cur = in_ch;
        for b in 0..n_blocks {
            let out_ch = rng.gen_range(2..=4usize);
            let kernel = if rng.gen_bool(0.5) { 3 } else { 5 };
            let stride = if b == 0 && rng.gen_bool(0.3) { 2 } else { 1 };
            let residual = stride == 1 && out_ch == cur && rng.gen_bool(0.5);
            let bn_eval = if rng.gen_bool(0.25) {
                let mean: Vec<f32> = (0..out_ch).map(|_| rng.gen::<f32>() - 0.5).collect();
                let var: Vec<f32> = (0..out_ch).map(|_| 0.5 + rng.gen::<f32>()).collect();
                Some((mean, var))
            } else {
                None
            };
            blocks.push(TestBlock {
                out_ch,
                kernel,
                stride,
                residual,
                hswish: b == 0,
                bn_eval,
            });
            cur = out_ch;
        }
        let loss = if rng.gen_bool(0.3) {
            TestLoss::KdSoft
        } else {
            TestLoss::CeSmoothed
        };

        fn rand_vec(rng: &mut ChaCha20Rng, n: usize, scale: f32) -> Vec<f32> {
            (0..n).map(|_| (rng.gen::<f32>() - 0.5) * scale).collect()
        }
        let mut params = Vec::new();
        let mut prev = in_ch;
        for (i, blk) in blocks.iter().enumerate() {
            let k = blk.kernel;
            params.push((
                format!("b{i}.conv"),
                vec![blk.out_ch, prev, k, k],
                rand_vec(&mut rng, blk.out_ch * prev * k * k, 1.0),
            ));
            params.push((
                format!("b{i}.gamma"),
                vec![blk.out_ch],
                (0..blk.out_ch).map(|_| 0.7 + rng.gen::<f32>()).collect(),
            ));
            params.push((
                format!("b{i}.beta"),
                vec![blk.out_ch],
                rand_vec(&mut rng, blk.out_ch, 0.4),
            ));
            prev = blk.out_ch;
        }
        params.push((
            "fc.w".into(),
            vec![prev, classes],
            rand_vec(&mut rng, prev * classes, 1.0),
        ));
        params.push(("fc.b".into(), vec![classes], rand_vec(&mut rng, classes, 0.4)));

        let input = rand_vec(&mut rng, batch * in_ch * res * res, 2.0);
        let labels: Vec<u32> = (0..batch).map(|_| rng.gen_range(0..classes) as u32).collect();
        let teacher: Vec<f32> = rand_vec(&mut rng, batch * classes, 2.0);
        TestNet {
            in_ch,
            res,
            classes,
            blocks,
            loss,
            smoothing: 0.1,
            params,
            input,
            batch,
            labels,
            teacher,
        }
    }

    /// Run through the tape engine; returns the loss and one gradient buffer
    /// per parameter.
    pub fn engine_grads(&self) -> Result<(f32, Vec<Vec<f32>>)> {
        let mut tape = Tape::new();
        let mut x = tape.leaf_const(
            vec![self.batch, self.in_ch, self.res, self.res],
            self.input.clone(),
        )?;
        let mut vars: Vec<Var> = Vec::with_capacity(self.params.len());
        for (_, shape, values) in &self.params {
            vars.push(tape.leaf_param(shape.clone(), values.clone())?);
        }
        let mut pi = 0usize;
        for blk in &self.blocks {
            let w = vars[pi];
            let gamma = vars[pi + 1];
            let beta = vars[pi + 2];
            pi += 3;
            let pad = (blk.kernel - 1) / 2;
            let conv = tape.conv2d(x, w, blk.stride, pad)?;
            let bn = match &blk.bn_eval {
                Some((mean, var)) => {
                    tape.batchnorm(conv, gamma, beta, BnMode::Eval { mean, var })?
                }
                None => tape.batchnorm(conv, gamma, beta, BnMode::Train)?,
            };
            let act = if blk.hswish {
                tape.hard_swish(bn)?
            } else {
                tape.relu(bn)?
            };
            x = if blk.residual { tape.add(act, x)? } else { act };
        }
        let feats = tape.global_avg_pool(x)?;
        let prod = tape.matmul(feats, vars[pi])?;
        let logits = tape.add(prod, vars[pi + 1])?;
        let loss = match self.loss {
            TestLoss::CeSmoothed => {
                tape.loss_ce_smoothed(logits, &self.labels, self.smoothing)?
            }
            TestLoss::KdSoft => {
                let t = tape.leaf_const(vec![self.batch, self.classes], self.teacher.clone())?;
                tape.loss_kd_soft(logits, t)?
            }
        };
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
            .collect();
        Ok((tape.values(loss)[0], grads))
    }

    /// Pure f64 loss through the reference ops.
    pub fn reference_loss(&self, params: &[Vec<f64>]) -> f64 {
        self.reference_loss_with_signature(params).0
    }

    /// Loss plus a hash of the activation kink regions (which side of the
    /// relu/hard-swish breakpoints every activation falls on). A central
    /// difference whose two evaluations disagree on the signature straddles
    /// a non-smooth point and is not a valid derivative estimate.
    pub fn reference_loss_with_signature(&self, params: &[Vec<f64>]) -> (f64, u64) {
        let mut x: Vec<f64> = self.input.iter().map(|&v| f64::from(v)).collect();
        let (mut c, mut h, mut w) = (self.in_ch, self.res, self.res);
        let mut counter = reference::MacCounter::default();
        let mut signature: u64 = 0xcbf2_9ce4_8422_2325;
        let mut sig_push = |region: u64| {
            signature ^= region;
            signature = signature.wrapping_mul(0x0000_0100_0000_01b3);
        };
        let mut pi = 0usize;
        for blk in &self.blocks {
            let kern = &params[pi];
            let gamma = &params[pi + 1];
            let beta = &params[pi + 2];
            pi += 3;
            let pad = (blk.kernel - 1) / 2;
            let (conv, oh, ow) = reference::conv2d(
                &x,
                kern,
                self.batch,
                c,
                h,
                w,
                blk.out_ch,
                blk.kernel,
                blk.stride,
                pad,
                &mut counter,
            );
            let spatial = oh * ow;
            let bn = match &blk.bn_eval {
                Some((mean, var)) => {
                    let mean: Vec<f64> = mean.iter().map(|&v| f64::from(v)).collect();
                    let var: Vec<f64> = var.iter().map(|&v| f64::from(v)).collect();
                    reference::bn_eval(
                        &conv, self.batch, blk.out_ch, spatial, gamma, beta, &mean, &var, 1e-5,
                    )
                }
                None => reference::bn_train(
                    &conv, self.batch, blk.out_ch, spatial, gamma, beta, 1e-5,
                ),
            };
            let act = if blk.hswish {
                for &v in &bn {
                    sig_push(if v <= -3.0 {
                        0
                    } else if v >= 3.0 {
                        2
                    } else {
                        1
                    });
                }
                reference::hard_swish(&bn)
            } else {
                for &v in &bn {
                    sig_push(u64::from(v > 0.0));
                }
                reference::relu(&bn)
            };
            x = if blk.residual {
                act.iter().zip(&x).map(|(a, b)| a + b).collect()
            } else {
                act
            };
            c = blk.out_ch;
            h = oh;
            w = ow;
        }
        let feats = reference::global_avg_pool(&x, self.batch, c, h * w);
        let prod = reference::matmul(&feats, &params[pi], self.batch, c, self.classes, &mut counter);
        let logits: Vec<f64> = prod
            .iter()
            .enumerate()
            .map(|(i, v)| v + params[pi + 1][i % self.classes])
            .collect();
        let loss = match self.loss {
            TestLoss::CeSmoothed => reference::ce_smoothed(
                &logits,
                &self.labels,
                self.batch,
                self.classes,
                self.smoothing,
            ),
            TestLoss::KdSoft => {
                let teacher: Vec<f64> = self.teacher.iter().map(|&v| f64::from(v)).collect();
                reference::kd_soft(&logits, &teacher, self.batch, self.classes)
            }
        };
        (loss, signature)
    }

    /// Central finite differences over the reference path vs the engine's
    /// reverse-mode gradients. Returns `(within_tolerance, total)` parameter
    /// counts; agreement is `|a - n| <= tol * max(1, |a|, |n|)`. Probes whose
    /// two evaluations straddle an activation kink are re-run at `h / 100`
    /// (the difference quotient is no derivative estimate across a kink).
    pub fn fd_check(&self, h: f64, tol: f64) -> Result<(usize, usize)> {
        let (_, grads) = self.engine_grads()?;
        let base: Vec<Vec<f64>> = self
            .params
            .iter()
            .map(|(_, _, v)| v.iter().map(|&x| f64::from(x)).collect())
            .collect();
        let mut ok = 0usize;
        let mut total = 0usize;
        let mut probe = base.clone();
        for (pi, p) in base.iter().enumerate() {
            for j in 0..p.len() {
                let mut numeric = f64::NAN;
                for step in [h, h / 100.0] {
                    probe[pi][j] = p[j] + step;
                    let (up, sig_up) = self.reference_loss_with_signature(&probe);
                    probe[pi][j] = p[j] - step;
                    let (down, sig_down) = self.reference_loss_with_signature(&probe);
                    probe[pi][j] = p[j];
                    numeric = (up - down) / (2.0 * step);
                    if sig_up == sig_down {
                        break;
                    }
                }
                let analytic = f64::from(grads[pi][j]);
                let scale = 1.0f64.max(numeric.abs()).max(analytic.abs());
                total += 1;
                if (numeric - analytic).abs() <= tol * scale {
                    ok += 1;
                }
            }
        }
        Ok((ok, total))
    }
}

//! Nesterov-momentum SGD over the shared parameter store.

use crate::error::Result;
use crate::supernet::Supernet;
use crate::tensor::check_finite;

/// Which parameters weight decay touches each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightDecayScope {
    /// Every parameter of the store, sampled or not.
    #[default]
    All,
    /// Parameters covered by the largest subnet's view. The full view spans
    /// the whole store, so this coincides with `All` numerically; it exists
    /// as an explicit config because the two scopes are distinct contracts.
    FullView,
}

/// Per-parameter momentum buffers plus the fixed hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub momentum: f64,
    pub weight_decay: f64,
    pub scope: WeightDecayScope,
    /// One buffer per parameter, shapes mirroring the store.
    pub buffers: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(net: &Supernet, momentum: f64, weight_decay: f64, scope: WeightDecayScope) -> Self {
        Optimizer {
            momentum,
            weight_decay,
            scope,
            buffers: net
                .weights
                .params
                .iter()
                .map(|p| vec![0.0f32; p.tensor.numel()])
                .collect(),
        }
    }

    /// One Nesterov step with accumulated gradients `grads` (parallel to the
    /// parameter list) at learning rate `eta`:
    ///
    /// ```text
    /// g   = grad + wd * w
    /// buf = mu * buf + g
    /// w  -= eta * (g + mu * buf)
    /// ```
    pub fn step(&mut self, net: &mut Supernet, grads: &[Vec<f32>], eta: f64) -> Result<()> {
        let mu = self.momentum;
        let wd = self.weight_decay;
        for (pi, param) in net.weights.params.iter_mut().enumerate() {
            let buf = &mut self.buffers[pi];
            let w = &mut param.tensor.values;
            let g = &grads[pi];
            for i in 0..w.len() {
                let gi = f64::from(g[i]) + wd * f64::from(w[i]);
                let b = mu * f64::from(buf[i]) + gi;
                buf[i] = b as f32;
                w[i] = (f64::from(w[i]) - eta * (gi + mu * b)) as f32;
            }
            check_finite(w, &format!("weights[{}] after step", param.name))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::demo_space;

    fn tiny_net() -> Supernet {
        Supernet::new(demo_space(), 3).unwrap()
    }

    #[test]
    fn zero_eta_keeps_weights() {
        let mut net = tiny_net();
        let before = net.weights.clone();
        let grads = net.zeroed_grad_buffers();
        let mut opt = Optimizer::new(&net, 0.9, 3e-5, WeightDecayScope::All);
        opt.step(&mut net, &grads, 0.0).unwrap();
        assert_eq!(before, net.weights);
    }

    #[test]
    fn plain_sgd_quadratic() {
        // loss = w^2, grad = 2w, momentum 0, wd 0, eta 0.1, w0 = 1 -> w1 = 0.8.
        let mut net = tiny_net();
        net.weights.params[0].tensor.values[0] = 1.0;
        let mut grads = net.zeroed_grad_buffers();
        grads[0][0] = 2.0;
        let mut opt = Optimizer::new(&net, 0.0, 0.0, WeightDecayScope::All);
        opt.step(&mut net, &grads, 0.1).unwrap();
        assert!((net.weights.params[0].tensor.values[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn nesterov_three_step_hand_arithmetic() {
        // Single parameter, loss = w^2 (grad 2w), mu = 0.9, wd = 0, eta = 0.1.
        //
        // step 1: w=1.0      g=2.0      buf=2.0      w -= .1*(2.0 + .9*2.0)            = 0.62
        // step 2: w=0.62     g=1.24     buf=.9*2+1.24=3.04   w -= .1*(1.24+.9*3.04)    = 0.2224
        // step 3: w=0.2224   g=0.4448   buf=.9*3.04+0.4448=3.1808
        //         w -= .1*(0.4448+.9*3.1808) = 0.2224 - .1*3.30752 = -0.108352
        let mut net = tiny_net();
        net.weights.params[0].tensor.values[0] = 1.0;
        let mut opt = Optimizer::new(&net, 0.9, 0.0, WeightDecayScope::All);
        let expected = [0.62f64, 0.2224, -0.108352];
        for &e in &expected {
            let mut grads = net.zeroed_grad_buffers();
            grads[0][0] = 2.0 * net.weights.params[0].tensor.values[0];
            opt.step(&mut net, &grads, 0.1).unwrap();
            let w = f64::from(net.weights.params[0].tensor.values[0]);
            assert!((w - e).abs() < 1e-6, "expected {e}, got {w}");
        }
    }

    #[test]
    fn weight_decay_shrinks_unsampled_params() {
        let mut net = tiny_net();
        let w0 = net.weights.params[0].tensor.values[0];
        let grads = net.zeroed_grad_buffers();
        let mut opt = Optimizer::new(&net, 0.0, 0.01, WeightDecayScope::All);
        opt.step(&mut net, &grads, 0.5).unwrap();
        let w1 = net.weights.params[0].tensor.values[0];
        assert!((f64::from(w1) - f64::from(w0) * (1.0 - 0.5 * 0.01)).abs() < 1e-6);
    }
}

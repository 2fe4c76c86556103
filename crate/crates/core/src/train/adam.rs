//! Adam optimizer over a fixed list of convolution parameters.

use ndarray::{azip, Array1, Array4, NdFloat};
use serde::{Deserialize, Serialize};

use crate::net::Conv2d;

/// Adam hyperparameters besides the learning rate. Defaults are the
/// conventional published values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment estimates for one parameter group. Moments are
/// allocated lazily on the first step so the state needs no knowledge
/// of the model layout up front; the caller must pass the same
/// parameter list, in the same order, on every step.
#[derive(Clone, Debug)]
pub(crate) struct AdamState<F> {
    hyper: AdamParams,
    /// (weight moment, bias moment) per convolution.
    m: Vec<(Array4<F>, Array1<F>)>,
    v: Vec<(Array4<F>, Array1<F>)>,
    t: u64,
}

impl<F: NdFloat> AdamState<F> {
    pub(crate) fn new(hyper: AdamParams) -> Self {
        AdamState { hyper, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    /// One Adam step: `grads[i]` must be the (weight, bias) gradients of
    /// `params[i]`.
    pub(crate) fn step(
        &mut self,
        mut params: Vec<&mut Conv2d<F>>,
        grads: &[(&Array4<F>, &Array1<F>)],
        lr: f64,
    ) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient list mismatch");
        if self.m.is_empty() {
            for conv in &params {
                self.m.push((Array4::zeros(conv.weight.dim()), Array1::zeros(conv.bias.len())));
                self.v.push((Array4::zeros(conv.weight.dim()), Array1::zeros(conv.bias.len())));
            }
        }
        self.t += 1;
        let b1 = F::from(self.hyper.beta1).unwrap();
        let b2 = F::from(self.hyper.beta2).unwrap();
        let eps = F::from(self.hyper.epsilon).unwrap();
        let one = F::one();
        // Bias corrections, computed in f64 once per step.
        let c1 = F::from(1.0 - self.hyper.beta1.powi(self.t as i32)).unwrap();
        let c2 = F::from(1.0 - self.hyper.beta2.powi(self.t as i32)).unwrap();
        let lr_f = F::from(lr).unwrap();

        for ((conv, (mw, mb)), ((vw, vb), (dw, db))) in params
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut().zip(grads))
        {
            azip!((p in &mut conv.weight, m in mw, v in vw, &g in *dw) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p = *p - lr_f * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
            azip!((p in &mut conv.bias, m in mb, v in vb, &g in *db) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p = *p - lr_f * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array4};

    fn conv(w: f32) -> Conv2d<f32> {
        Conv2d { weight: Array4::from_elem((1, 1, 1, 1), w), bias: Array1::zeros(1) }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut c = conv(0.5);
        let dw = Array4::zeros((1, 1, 1, 1));
        let db = Array1::zeros(1);
        let mut opt = AdamState::new(AdamParams::default());
        for _ in 0..3 {
            opt.step(vec![&mut c], &[(&dw, &db)], 0.01);
        }
        assert_eq!(c.weight[(0, 0, 0, 0)], 0.5);
        assert_eq!(c.bias[0], 0.0);
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // With bias correction, the first Adam step is ~lr * sign(g).
        let mut c = conv(0.0);
        let dw = Array4::from_elem((1, 1, 1, 1), 2.0f32);
        let db = Array1::from_elem(1, -1.0f32);
        let mut opt = AdamState::new(AdamParams::default());
        opt.step(vec![&mut c], &[(&dw, &db)], 0.001);
        assert!((c.weight[(0, 0, 0, 0)] + 0.001).abs() < 1e-6);
        assert!((c.bias[0] - 0.001).abs() < 1e-6);
    }

    #[test]
    fn descends_a_quadratic() {
        // Minimize (w - 3)^2 by feeding its gradient.
        let mut c = conv(0.0);
        let mut opt = AdamState::new(AdamParams::default());
        let db = Array1::zeros(1);
        for _ in 0..2000 {
            let g = 2.0 * (c.weight[(0, 0, 0, 0)] - 3.0);
            let dw = Array4::from_elem((1, 1, 1, 1), g);
            opt.step(vec![&mut c], &[(&dw, &db)], 0.05);
        }
        assert!((c.weight[(0, 0, 0, 0)] - 3.0).abs() < 0.05);
    }
}

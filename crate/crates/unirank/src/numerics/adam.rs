//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First moments, one per parameter tensor.
    pub m: Vec<Tensor>,
    /// Second moments, one per parameter tensor.
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: vec![params.len()],
                right: vec![grads.len(), self.m.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, gd) = (p.data_mut(), g.data());
            for i in 0..pd.len() {
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * gd[i];
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * gd[i] * gd[i];
                let mhat = m.data()[i] / c1;
                let vhat = v.data()[i] / c2;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::row(vec![1.0, -2.0])];
        let mut s = AdamState::new(0.1, &p);
        s.step(&mut p, &[Tensor::row(vec![0.0, 0.0])]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn positive_gradient_decreases_param() {
        let mut p = vec![Tensor::row(vec![1.0])];
        let mut s = AdamState::new(0.01, &p);
        s.step(&mut p, &[Tensor::row(vec![3.0])]).unwrap();
        assert!(p[0].item() < 1.0);
    }

    /// Independent scalar replay of the recurrence on f(x) = (x-3)².
    #[test]
    fn quadratic_converges_like_scalar_recurrence() {
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let g = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((x - 3.0).abs() < 0.1, "oracle itself: {x}");

        let mut p = vec![Tensor::row(vec![0.0])];
        let mut s = AdamState::new(lr, &p);
        for _ in 0..200 {
            let g = Tensor::row(vec![2.0 * (p[0].item() - 3.0)]);
            s.step(&mut p, &[g]).unwrap();
        }
        assert!((p[0].item() - 3.0).abs() < 0.1);
        assert_eq!(p[0].item(), x);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::row(vec![0.0, 1.0])];
        let mut s = AdamState::new(0.1, &p);
        assert!(s.step(&mut p, &[Tensor::row(vec![0.0])]).is_err());
    }
}

//! Central finite-difference checking of graph gradients.

use crate::error::Result;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Result of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Compare the analytic gradient of a scalar function against central
/// differences with step `h`.
///
/// `f` receives a fresh graph and one leaf per input tensor and returns the
/// scalar output. Values passed through [`Graph::detach`] during the first
/// (analytic) evaluation are replayed unchanged in the perturbed
/// evaluations, so the numeric derivative is that of the stop-gradient
/// objective the analytic pass actually differentiates.
pub fn grad_check<F>(f: F, point: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let frozen = g.detached_values().to_vec();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::replaying(frozen.clone());
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut work = point.to_vec();
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for (ti, a) in analytic.iter().enumerate() {
        for ci in 0..a.len() {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[ci] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (a.data()[ci] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            coordinates += 1;
        }
    }
    Ok(GradCheck { max_rel_error: worst, coordinates })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::row(vec![0.5, -1.5, 2.0]);
        let r = grad_check(
            |g, v| {
                let c = g.constant(Tensor::row(vec![3.0, 1.0, -2.0]));
                let p = g.mul(v[0], c)?;
                Ok(g.sum(p))
            },
            &[w],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let logits = Tensor::row(vec![0.3, -0.7, 1.9, 0.1]);
        let r = grad_check(
            |g, v| {
                let ls = g.log_softmax_rows(v[0]);
                let target = g.constant(Tensor::row(vec![0.0, 0.0, 1.0, 0.0]));
                let p = g.mul(ls, target)?;
                let s = g.sum(p);
                Ok(g.scale(s, -1.0))
            },
            &[logits],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }
}

//! Coupling losses between the two-tower encoder and the listwise
//! transformer: forward distillation (LT teaches TTE), backward distillation
//! (TTE regularises LT) and embedding alignment.
//!
//! In both distillation directions the teacher side goes through
//! [`Graph::detach`], so gradients only reach the student.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::{log_sum_exp, softmax_in_place};
use crate::numerics::{Graph, Tensor, Var};

/// Softmax of a score vector at temperature `tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankDistribution {
    pub probs: Vec<f64>,
    pub tau: f64,
}

pub fn to_distribution(scores: &[f64], tau: f64) -> Result<RankDistribution> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("distribution over an empty slate".into()));
    }
    let mut probs: Vec<f64> = scores.iter().map(|s| s / tau).collect();
    softmax_in_place(&mut probs);
    Ok(RankDistribution { probs, tau })
}

/// `KL(P_LT ‖ P_TTE)`.
pub fn forward_distill_loss(p_lt: &RankDistribution, p_tte: &RankDistribution) -> Result<f64> {
    if p_lt.probs.len() != p_tte.probs.len() {
        return Err(Error::ShapeMismatch {
            op: "forward_distill",
            left: vec![p_lt.probs.len()],
            right: vec![p_tte.probs.len()],
        });
    }
    if p_lt.tau != p_tte.tau {
        return Err(Error::InvalidArgument("distributions use different temperatures".into()));
    }
    Ok(p_lt.probs.iter().zip(&p_tte.probs).map(|(p, q)| if *p > 0.0 { p * (p / q).ln() } else { 0.0 }).sum::<f64>().max(0.0))
}

/// KL straight from scores, in log-space (no underflow for sharp softmaxes).
pub fn kl_from_scores(s_lt: &[f64], s_tte: &[f64], tau: f64) -> Result<f64> {
    let p = to_distribution(s_lt, tau)?;
    if s_tte.len() != s_lt.len() {
        return Err(Error::ShapeMismatch { op: "forward_distill", left: vec![s_lt.len()], right: vec![s_tte.len()] });
    }
    let a: Vec<f64> = s_lt.iter().map(|s| s / tau).collect();
    let b: Vec<f64> = s_tte.iter().map(|s| s / tau).collect();
    let (la, lb) = (log_sum_exp(&a), log_sum_exp(&b));
    Ok(p.probs.iter().enumerate().map(|(j, pj)| pj * ((a[j] - la) - (b[j] - lb))).sum::<f64>().max(0.0))
}

/// `(1/k) Σ (s_tte − s_lt)²`.
pub fn backward_distill_loss(s_tte: &[f64], s_lt: &[f64]) -> Result<f64> {
    if s_tte.len() != s_lt.len() || s_tte.is_empty() {
        return Err(Error::ShapeMismatch { op: "backward_distill", left: vec![s_tte.len()], right: vec![s_lt.len()] });
    }
    Ok(s_tte.iter().zip(s_lt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s_tte.len() as f64)
}

/// `(1/k) Σ_j ‖e_j − W z_j‖²` with `e: k x d`, `z: k x d_model`, `W: d x d_model`.
pub fn alignment_loss(e: &Tensor, z: &Tensor, w: &Tensor) -> Result<f64> {
    let mut g = Graph::inference();
    let (e, z, w) = (g.constant(e.clone()), g.constant(z.clone()), g.constant(w.clone()));
    let l = alignment_graph(&mut g, e, z, w)?;
    Ok(g.value(l).item())
}

/// Forward distillation inside a graph; `s_lt` is detached.
/// Both inputs are `k x 1` score columns.
pub fn forward_distill_graph(g: &mut Graph, s_lt: Var, s_tte: Var, tau: f64) -> Result<Var> {
    if g.shape(s_lt) != g.shape(s_tte) {
        return Err(Error::ShapeMismatch {
            op: "forward_distill",
            left: g.shape(s_lt).to_vec(),
            right: g.shape(s_tte).to_vec(),
        });
    }
    let teacher = g.detach(s_lt);
    let teacher = g.transpose(teacher);
    let teacher = g.scale(teacher, 1.0 / tau);
    let student = g.transpose(s_tte);
    let student = g.scale(student, 1.0 / tau);
    let p = g.softmax_rows(teacher);
    let log_p = g.log_softmax_rows(teacher);
    let log_q = g.log_softmax_rows(student);
    let diff = g.sub(log_p, log_q)?;
    let terms = g.mul(p, diff)?;
    Ok(g.sum(terms))
}

/// Backward distillation inside a graph; `s_tte` is detached.
pub fn backward_distill_graph(g: &mut Graph, s_tte: Var, s_lt: Var) -> Result<Var> {
    let teacher = g.detach(s_tte);
    let d = g.sub(teacher, s_lt)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Alignment loss inside a graph; gradients reach `e`, `z` and `w`.
pub fn alignment_graph(g: &mut Graph, e: Var, z: Var, w: Var) -> Result<Var> {
    let k = g.shape(e)[0];
    let mapped = g.matmul_nt(z, w)?;
    let r = g.sub(e, mapped)?;
    let sq = g.square(r);
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / k as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_scores_uniform() {
        let p = to_distribution(&[0.3; 4], 1.0).unwrap();
        assert!(p.probs.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn huge_temperature_flattens() {
        let p = to_distribution(&[3.0, -1.0, 0.5, 2.0], 1e6).unwrap();
        assert!(p.probs.iter().all(|&x| (x - 0.25).abs() < 1e-5));
    }

    #[test]
    fn two_score_softmax() {
        let p = to_distribution(&[2.0, 1.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.probs[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.probs[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn bad_temperature_rejected() {
        assert!(to_distribution(&[1.0], 0.0).is_err());
        assert!(to_distribution(&[1.0], -2.0).is_err());
    }

    #[test]
    fn kl_hand_value() {
        let p = RankDistribution { probs: vec![0.9, 0.1], tau: 1.0 };
        let q = RankDistribution { probs: vec![0.5, 0.5], tau: 1.0 };
        let want = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((forward_distill_loss(&p, &q).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.3681).abs() < 1e-4);
        assert_eq!(forward_distill_loss(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn mse_hand_value() {
        assert_eq!(backward_distill_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert!(backward_distill_loss(&[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn alignment_identity_is_zero() {
        let z = Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        assert_eq!(alignment_loss(&z, &z, &Tensor::identity(2)).unwrap(), 0.0);
        let zero = Tensor::zeros(&[3, 2]);
        assert_eq!(alignment_loss(&zero, &zero, &Tensor::filled(&[2, 2], 0.7)).unwrap(), 0.0);
    }
}

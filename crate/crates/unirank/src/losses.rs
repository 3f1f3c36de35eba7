//! Task losses: sampled-softmax retrieval, ApproxNDCG ranking, and the
//! weighted five-term objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{discount, gain};
use crate::numerics::graph::{log_sum_exp, sigmoid};
use crate::numerics::{Graph, Tensor, Var};

/// Weights and temperatures of the total objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// `λ₁..λ₅` for retrieve, rank, forward, backward, align.
    #[serde(default = "defaults::lambda")]
    pub lambda: [f64; 5],
    /// Scores are cosines, so this is well below 1.
    #[serde(default = "defaults::tau_retrieve")]
    pub tau_retrieve: f64,
    #[serde(default = "defaults::one")]
    pub tau_distill: f64,
    /// Soft-rank temperature of ApproxNDCG.
    #[serde(default = "defaults::one")]
    pub t_rank: f64,
}

mod defaults {
    pub fn lambda() -> [f64; 5] {
        [1.0, 1.0, 0.5, 0.5, 0.1]
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn tau_retrieve() -> f64 {
        0.1
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: defaults::lambda(), tau_retrieve: defaults::tau_retrieve(), tau_distill: 1.0, t_rank: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument("loss weights must be finite and non-negative".into()));
        }
        if [self.tau_retrieve, self.tau_distill, self.t_rank].iter().any(|&t| !(t > 0.0)) {
            return Err(Error::InvalidArgument("temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// The five loss values of one step, in objective order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub retrieve: f64,
    pub rank: f64,
    pub forward: f64,
    pub backward: f64,
    pub align: f64,
}

impl LossComponents {
    pub fn as_array(&self) -> [f64; 5] {
        [self.retrieve, self.rank, self.forward, self.backward, self.align]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self { retrieve: a[0], rank: a[1], forward: a[2], backward: a[3], align: a[4] }
    }
}

/// `Σ λᵢ Lᵢ`.
pub fn total_loss(components: &LossComponents, weights: &LossWeights) -> f64 {
    components.as_array().iter().zip(&weights.lambda).map(|(l, w)| l * w).sum()
}

/// `−log(e^{s⁺/τ} / (e^{s⁺/τ} + Σ e^{s⁻/τ}))`.
pub fn retrieve_loss(s_pos: f64, s_negs: &[f64], tau: f64) -> f64 {
    let mut logits = Vec::with_capacity(s_negs.len() + 1);
    logits.push(s_pos / tau);
    logits.extend(s_negs.iter().map(|s| s / tau));
    log_sum_exp(&logits) - s_pos / tau
}

/// Retrieval loss averaged over positives, all sharing the negatives.
/// `s_pos` is `p x 1`, `s_neg` is `1 x m` (or `None` when there are none).
pub fn retrieve_graph(g: &mut Graph, s_pos: Var, s_neg: Option<Var>, tau: f64) -> Result<Var> {
    let Some(s_neg) = s_neg else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    let p = g.shape(s_pos)[0];
    let negs = g.repeat_rows(s_neg, p)?;
    let logits = g.concat_cols(&[s_pos, negs])?;
    let logits = g.scale(logits, 1.0 / tau);
    let ls = g.log_softmax_rows(logits);
    let first = g.slice_cols(ls, 0, 1)?;
    let m = g.mean(first);
    Ok(g.scale(m, -1.0))
}

/// Ideal DCG of a slate from its exact grades (all positions).
pub fn slate_idcg(grades: &[u8]) -> f64 {
    let mut sorted = grades.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted.iter().enumerate().map(|(p, &g)| gain(g) * discount(p + 1)).sum()
}

/// Soft ranks `r̂_j = 1 + Σ_{l≠j} σ((s_l − s_j)/T)`.
pub fn soft_ranks(scores: &[f64], t: f64) -> Vec<f64> {
    scores
        .iter()
        .enumerate()
        .map(|(j, sj)| 1.0 + scores.iter().enumerate().filter(|(l, _)| *l != j).map(|(_, sl)| sigmoid((sl - sj) / t)).sum::<f64>())
        .collect()
}

/// `1 − ApproxDCG / IDCG` with soft-rank discounts; 0 when no grade is positive.
pub fn approx_ndcg_loss(scores: &[f64], grades: &[u8], t: f64) -> Result<f64> {
    if scores.len() != grades.len() || scores.is_empty() {
        return Err(Error::ShapeMismatch { op: "approx_ndcg", left: vec![scores.len()], right: vec![grades.len()] });
    }
    let idcg = slate_idcg(grades);
    if idcg == 0.0 {
        return Ok(0.0);
    }
    let ranks = soft_ranks(scores, t);
    let dcg: f64 = ranks.iter().zip(grades).map(|(r, &gr)| gain(gr) / (r + 1.0).log2()).sum();
    Ok(1.0 - dcg / idcg)
}

/// ApproxNDCG inside a graph for a `k x 1` score column.
pub fn approx_ndcg_graph(g: &mut Graph, scores: Var, grades: &[u8], t: f64) -> Result<Var> {
    let k = g.shape(scores)[0];
    if k != grades.len() || g.shape(scores)[1] != 1 {
        return Err(Error::ShapeMismatch { op: "approx_ndcg", left: g.shape(scores).to_vec(), right: vec![grades.len(), 1] });
    }
    let idcg = slate_idcg(grades);
    if idcg == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let row = g.transpose(scores);
    let diff = g.pairwise_diff(row)?;
    let diff = g.scale(diff, 1.0 / t);
    let sig = g.sigmoid(diff);
    // the diagonal contributes σ(0) = 1/2, so add 1/2 instead of 1
    let sums = g.row_sums(sig);
    let ranks = g.add_scalar_const(sums, 0.5);
    let shifted = g.add_scalar_const(ranks, 1.0);
    let ln = g.ln(shifted);
    let inv = g.recip(ln);
    let gains = Tensor::column(grades.iter().map(|&gr| gain(gr) * std::f64::consts::LN_2 / idcg).collect());
    let weighted = g.mul_const(inv, &gains)?;
    let ratio = g.sum(weighted);
    let neg = g.scale(ratio, -1.0);
    Ok(g.add_scalar_const(neg, 1.0))
}

//! Ranking quality, error propagation, UPQE and the cost model.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{performance_gap, World};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// NDCG gain of a grade: `2^g − 1`.
pub fn gain(grade: u8) -> f64 {
    (1u64 << grade) as f64 - 1.0
}

/// Discount at 1-based position `pos`: `1 / log₂(pos + 1)`.
pub fn discount(pos: usize) -> f64 {
    1.0 / ((pos + 1) as f64).log2()
}

/// DCG of the first `cutoff` entries of `ranking` under `grades` (by item id).
pub fn dcg(ranking: &[usize], grades: &[u8], cutoff: usize) -> f64 {
    ranking.iter().take(cutoff).enumerate().map(|(p, &i)| gain(grades[i]) * discount(p + 1)).sum()
}

/// NDCG@cutoff of `ranking` for `query`; the ideal DCG is over the whole
/// corpus. A query without relevant items scores 1.
pub fn ndcg_at(ranking: &[usize], world: &World, query: usize, cutoff: usize) -> Result<f64> {
    if cutoff == 0 {
        return Err(Error::InvalidArgument("cutoff must be at least 1".into()));
    }
    let grades = world.grades_for(query)?;
    if let Some(&bad) = ranking.iter().find(|&&i| i >= grades.len()) {
        return Err(Error::UnknownId { kind: "item", id: bad });
    }
    let idcg = dcg(&world.ideal_ranking(query)?, grades, cutoff);
    if idcg == 0.0 {
        log::debug!("query {query} has no relevant items; NDCG defined as 1");
        return Ok(1.0);
    }
    Ok(dcg(ranking, grades, cutoff) / idcg)
}

/// Relevant items of `query` that are absent from `retrieved`.
pub fn error_propagation(world: &World, query: usize, retrieved: &[usize]) -> Result<usize> {
    let got: HashSet<usize> = retrieved.iter().copied().collect();
    Ok(world.relevant_items(query)?.into_iter().filter(|i| !got.contains(i)).count())
}

/// Fraction of the relevant items of `query` found in `retrieved`.
pub fn recall(world: &World, query: usize, retrieved: &[usize]) -> Result<f64> {
    let n_rel = world.relevant_items(query)?.len();
    if n_rel == 0 {
        return Ok(1.0);
    }
    Ok(1.0 - error_propagation(world, query, retrieved)? as f64 / n_rel as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpqeParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for UpqeParams {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 1.0 }
    }
}

impl UpqeParams {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().all(|&v| v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("UPQE parameters must be positive: {self:?}")))
        }
    }
}

/// Everything UPQE needs for one query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpqeInput {
    pub ndcg_unified: f64,
    pub ndcg_cascade: f64,
    /// Relevant items the unified system failed to retrieve.
    pub e_prop: usize,
    pub n_relevant: usize,
    pub cost_unified: f64,
    pub cost_cascade: f64,
}

/// `γ · (NDCG_u / NDCG_c) · (1 − E/|R|)^α · (C_c / C_u)^β`.
///
/// `None` when the value is undefined (`NDCG_c = 0`, `|R| = 0` or
/// `C_u = 0`); callers exclude such queries.
pub fn upqe(x: &UpqeInput, p: &UpqeParams) -> Option<f64> {
    if x.ndcg_cascade <= 0.0 || x.n_relevant == 0 || x.cost_unified <= 0.0 {
        return None;
    }
    let quality = x.ndcg_unified / x.ndcg_cascade;
    let penalty = (1.0 - x.e_prop as f64 / x.n_relevant as f64).powf(p.alpha);
    let efficiency = (x.cost_cascade / x.cost_unified).powf(p.beta);
    Some(p.gamma * quality * penalty * efficiency)
}

/// Multiply-add counts for serving one query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    /// Exact scan: `N · d`.
    pub retrieval: f64,
    /// Whole listwise forward pass, attention included.
    pub lt: f64,
    /// Attention part of `lt`: `L · 2 · k² · d_model`.
    pub attention: f64,
    pub total: f64,
}

/// Shapes that determine serving cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostShape {
    pub n_items: usize,
    pub d: usize,
    pub k: usize,
    pub d_in: usize,
    pub d_model: usize,
    pub layers: usize,
    pub ffn: usize,
}

/// Closed-form cost: matmul multiply-adds of retrieval plus the listwise
/// forward pass (projection, per-layer QKV/O, scores and mixing, FFN, head).
pub fn cost_profile(s: &CostShape) -> CostProfile {
    let (k, dm) = (s.k as f64, s.d_model as f64);
    let retrieval = s.n_items as f64 * s.d as f64;
    let attention = s.layers as f64 * 2.0 * k * k * dm;
    let per_layer_linear = 4.0 * k * dm * dm + 2.0 * k * dm * s.ffn as f64;
    let lt = k * s.d_in as f64 * dm + s.layers as f64 * per_layer_linear + attention + k * dm;
    CostProfile { retrieval, lt, attention, total: retrieval + lt }
}

/// Output of one system for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    /// Items the retrieval stage passed on.
    pub retrieved: Vec<usize>,
    /// Final order (a permutation of a superset-free subset of the corpus).
    pub ranking: Vec<usize>,
}

/// Anything that can be evaluated.
pub trait RankingSystem {
    fn tag(&self) -> &str;
    fn rank(&self, world: &World, query: usize) -> Result<Ranked>;
    fn cost(&self) -> CostProfile;
}

/// Ranks by the true grades over the full corpus.
pub struct OracleSystem {
    pub k: usize,
    pub cost: CostProfile,
}

impl RankingSystem for OracleSystem {
    fn tag(&self) -> &str {
        "oracle"
    }

    fn rank(&self, world: &World, query: usize) -> Result<Ranked> {
        let ideal = world.ideal_ranking(query)?;
        let retrieved = ideal[..self.k.min(ideal.len())].to_vec();
        Ok(Ranked { ranking: retrieved.clone(), retrieved })
    }

    fn cost(&self) -> CostProfile {
        self.cost
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query: usize,
    /// One entry per report cutoff.
    pub ndcg: Vec<f64>,
    pub recall: f64,
    pub e_prop: usize,
    pub n_relevant: usize,
    /// Best-achievable NDCG lost to retrieval, at the slate size.
    pub gap: f64,
    pub gap_bound: f64,
    /// Filled in by [`attach_upqe`]; `None` when undefined or not compared.
    pub upqe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub system: String,
    pub k: usize,
    pub cutoffs: Vec<usize>,
    /// NDCG cutoff used inside UPQE.
    pub upqe_cutoff: usize,
    pub slate_note: String,
    pub queries: Vec<QueryMetrics>,
    pub mean_ndcg: Vec<f64>,
    pub mean_recall: f64,
    pub mean_e_prop: f64,
    pub mean_gap: f64,
    pub cost: CostProfile,
    pub upqe_mean: Option<f64>,
    pub upqe_excluded: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Evaluate `system` on `queries`.
pub fn evaluate_system(
    system: &dyn RankingSystem,
    world: &World,
    queries: &[usize],
    cutoffs: &[usize],
    k: usize,
) -> Result<MetricsReport> {
    if cutoffs.is_empty() || cutoffs.contains(&0) || k == 0 {
        return Err(Error::InvalidArgument("cutoffs and k must be positive".into()));
    }
    let mut rows = Vec::with_capacity(queries.len());
    for &q in queries {
        let out = system.rank(world, q)?;
        let ndcg = cutoffs.iter().map(|&c| ndcg_at(&out.ranking, world, q, c)).collect::<Result<Vec<_>>>()?;
        let gap = performance_gap(world, q, &out.retrieved, k)?;
        rows.push(QueryMetrics {
            query: q,
            ndcg,
            recall: recall(world, q, &out.retrieved)?,
            e_prop: error_propagation(world, q, &out.retrieved)?,
            n_relevant: world.relevant_items(q)?.len(),
            gap: gap.gap,
            gap_bound: gap.bound,
            upqe: None,
        });
    }
    let mean_ndcg = (0..cutoffs.len()).map(|c| mean(rows.iter().map(|r| r.ndcg[c]))).collect();
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        system: system.tag().to_string(),
        k,
        cutoffs: cutoffs.to_vec(),
        upqe_cutoff: k,
        slate_note: "inference slates are pure top-k; training slates force all positives in".into(),
        mean_recall: mean(rows.iter().map(|r| r.recall)),
        mean_e_prop: mean(rows.iter().map(|r| r.e_prop as f64)),
        mean_gap: mean(rows.iter().map(|r| r.gap)),
        queries: rows,
        mean_ndcg,
        cost: system.cost(),
        upqe_mean: None,
        upqe_excluded: 0,
    })
}

/// Per-query UPQE inputs of `unified` against `cascade` at `cutoff`,
/// computed exactly from the given rankings.
pub fn upqe_inputs(
    world: &World,
    query: usize,
    unified: &Ranked,
    cascade: &Ranked,
    cost_unified: f64,
    cost_cascade: f64,
    cutoff: usize,
) -> Result<UpqeInput> {
    Ok(UpqeInput {
        ndcg_unified: ndcg_at(&unified.ranking, world, query, cutoff)?,
        ndcg_cascade: ndcg_at(&cascade.ranking, world, query, cutoff)?,
        e_prop: error_propagation(world, query, &unified.retrieved)?,
        n_relevant: world.relevant_items(query)?.len(),
        cost_unified,
        cost_cascade,
    })
}

/// Column of `cutoff` in a report, if present.
fn cutoff_index(r: &MetricsReport, cutoff: usize) -> Result<usize> {
    r.cutoffs
        .iter()
        .position(|&c| c == cutoff)
        .ok_or_else(|| Error::InvalidArgument(format!("report has no NDCG@{cutoff}")))
}

/// Fill the UPQE fields of `unified` using `cascade` as the baseline.
/// Both reports must cover the same queries in the same order.
pub fn attach_upqe(unified: &mut MetricsReport, cascade: &MetricsReport, params: &UpqeParams) -> Result<()> {
    params.validate()?;
    let qu: Vec<usize> = unified.queries.iter().map(|q| q.query).collect();
    let qc: Vec<usize> = cascade.queries.iter().map(|q| q.query).collect();
    if qu != qc {
        return Err(Error::WorldMismatch("reports cover different query sets".into()));
    }
    let (cu, cc) = (cutoff_index(unified, unified.upqe_cutoff)?, cutoff_index(cascade, unified.upqe_cutoff)?);
    let (cost_u, cost_c) = (unified.cost.total, cascade.cost.total);
    let mut excluded = 0;
    let mut vals = Vec::new();
    for (u, c) in unified.queries.iter_mut().zip(&cascade.queries) {
        let x = UpqeInput {
            ndcg_unified: u.ndcg[cu],
            ndcg_cascade: c.ndcg[cc],
            e_prop: u.e_prop,
            n_relevant: u.n_relevant,
            cost_unified: cost_u,
            cost_cascade: cost_c,
        };
        u.upqe = upqe(&x, params);
        match u.upqe {
            Some(v) => vals.push(v),
            None => {
                excluded += 1;
                log::warn!("query {}: UPQE undefined (cascade NDCG is 0), excluded", u.query);
            }
        }
    }
    unified.upqe_mean = if vals.is_empty() { None } else { Some(mean(vals.into_iter())) };
    unified.upqe_excluded = excluded;
    Ok(())
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// A header and one row per query; means live in the JSON report.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["schema_version".to_string(), "system".into(), "query".into()];
        header.extend(self.cutoffs.iter().map(|c| format!("ndcg@{c}")));
        header.extend(["recall", "e_prop", "n_relevant", "gap", "gap_bound", "upqe"].map(String::from));
        w.write_record(&header).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for q in &self.queries {
            let mut row = vec![self.schema_version.to_string(), self.system.clone(), q.query.to_string()];
            row.extend(q.ndcg.iter().map(f64::to_string));
            row.extend([
                q.recall.to_string(),
                q.e_prop.to_string(),
                q.n_relevant.to_string(),
                q.gap.to_string(),
                q.gap_bound.to_string(),
                opt(q.upqe),
            ]);
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Range checks every report must satisfy.
    pub fn check_ranges(&self) -> Result<()> {
        for q in &self.queries {
            let ok = q.ndcg.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v))
                && (0.0..=1.0).contains(&q.recall)
                && q.e_prop <= q.n_relevant;
            if !ok {
                return Err(Error::InvalidArgument(format!("query {} has out-of-range metrics", q.query)));
            }
        }
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_and_discount() {
        assert_eq!(gain(0), 0.0);
        assert_eq!(gain(3), 7.0);
        assert_eq!(discount(1), 1.0);
        assert!((discount(3) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reversed_two_item_ranking() {
        // grades [3, 0] ranked as [1, 0]: DCG = 7/log2(3), IDCG = 7
        let grades = [3u8, 0];
        let v = dcg(&[1, 0], &grades, 2) / dcg(&[0, 1], &grades, 2);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((v - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn upqe_hand_value() {
        let x = UpqeInput {
            ndcg_unified: 0.8,
            ndcg_cascade: 0.8,
            e_prop: 1,
            n_relevant: 4,
            cost_unified: 1.0,
            cost_cascade: 2.0,
        };
        assert!((upqe(&x, &UpqeParams::default()).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn upqe_full_miss_is_zero() {
        let x = UpqeInput {
            ndcg_unified: 0.5,
            ndcg_cascade: 0.7,
            e_prop: 5,
            n_relevant: 5,
            cost_unified: 3.0,
            cost_cascade: 3.0,
        };
        assert_eq!(upqe(&x, &UpqeParams::default()), Some(0.0));
    }

    #[test]
    fn upqe_undefined_cases() {
        let x = UpqeInput {
            ndcg_unified: 0.5,
            ndcg_cascade: 0.0,
            e_prop: 0,
            n_relevant: 5,
            cost_unified: 3.0,
            cost_cascade: 3.0,
        };
        assert_eq!(upqe(&x, &UpqeParams::default()), None);
    }

    #[test]
    fn cost_scaling() {
        let s = CostShape { n_items: 1000, d: 32, k: 50, d_in: 81, d_model: 64, layers: 2, ffn: 128 };
        let a = cost_profile(&s);
        let b = cost_profile(&CostShape { n_items: 2000, ..s });
        assert_eq!(b.retrieval, 2.0 * a.retrieval);
        let c = cost_profile(&CostShape { k: 100, ..s });
        assert_eq!(c.attention, 4.0 * a.attention);
        assert_eq!(a.total, a.retrieval + a.lt);
    }
}

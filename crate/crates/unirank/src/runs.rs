//! Run orchestration shared by the command line and the acceptance
//! harness: checkpointed training, evaluation of a checkpoint, and paired
//! comparison of a unified system against a cascade.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{attach_upqe, cost_profile, evaluate_system, MetricsReport, OracleSystem, UpqeParams};
use crate::pipeline::TwoStage;
use crate::trainer::{LogRecord, SystemKind, Trainer};
use crate::world::World;

/// Steps between periodic checkpoints.
pub const CHECKPOINT_EVERY: usize = 500;

pub const COMPARE_SCHEMA_VERSION: u32 = 1;

/// Which queries a report covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuerySplit {
    Train,
    #[default]
    Heldout,
    All,
}

impl QuerySplit {
    pub fn queries(self, world: &World) -> Vec<usize> {
        match self {
            QuerySplit::Train => world.train_queries().collect(),
            QuerySplit::Heldout => world.heldout_queries().collect(),
            QuerySplit::All => (0..world.queries().len()).collect(),
        }
    }
}

/// Fail unless `world` is the one `config` describes.
pub fn check_world_spec(config: &RunConfig, world: &World, src: &str) -> Result<()> {
    if &config.world != world.spec() {
        return Err(Error::WorldMismatch(format!("{src} was made for a different world (spec or seed differs)")));
    }
    Ok(())
}

fn snapshot(config: &RunConfig, trainer: &mut Trainer<'_>) -> Result<Checkpoint> {
    let index = trainer.index()?.clone();
    let phase = trainer.phase().name();
    Ok(Checkpoint::new(config.clone(), trainer.state().clone(), index, phase))
}

/// Train `system`, writing a checkpoint to `path` before the first step,
/// every [`CHECKPOINT_EVERY`] steps and at the end. Stops after `until`
/// steps when given. With `resume` the run continues from that checkpoint
/// and its config; `config` is then ignored.
///
/// On a non-finite loss the error is returned and the last checkpoint
/// written stays on disk.
pub fn train_checkpointed(
    world: &World,
    config: &RunConfig,
    system: SystemKind,
    resume: Option<Checkpoint>,
    until: Option<usize>,
    path: &Path,
    mut on_record: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<Checkpoint> {
    let (config, mut trainer) = match resume {
        Some(ck) => {
            check_world_spec(&ck.config, world, "checkpoint")?;
            ck.check_world(world)?;
            let t = Trainer::from_state(world, ck.config.training.clone(), ck.state)?;
            (ck.config, t)
        }
        None => {
            config.validate_with(world)?;
            (config.clone(), Trainer::new(world, config.training.clone(), system)?)
        }
    };
    let stop = until.unwrap_or(usize::MAX).min(config.training.steps);
    let mut last = snapshot(&config, &mut trainer)?;
    last.save(path)?;
    while trainer.step_count() < stop {
        let next = ((trainer.step_count() / CHECKPOINT_EVERY + 1) * CHECKPOINT_EVERY).min(stop);
        trainer.run(next, &mut on_record)?;
        last = snapshot(&config, &mut trainer)?;
        last.save(path)?;
    }
    Ok(last)
}

/// Serve and score a checkpoint on `queries`.
pub fn evaluate_checkpoint(ck: &Checkpoint, world: &World, queries: &[usize]) -> Result<MetricsReport> {
    ck.check_world(world)?;
    let k = ck.config.training.k;
    let system = TwoStage::new(ck.state.system.tag(), ck.state.tte.clone(), ck.state.lt.clone(), world, k)?;
    evaluate_system(&system, world, queries, &ck.config.report_cutoffs(), k)
}

/// Score the ground-truth ranking with the cost of the configured shapes.
pub fn evaluate_oracle(config: &RunConfig, world: &World, queries: &[usize]) -> Result<MetricsReport> {
    let tc = &config.training;
    let lt = tc.lt_config();
    let shape = crate::metrics::CostShape {
        n_items: world.n_items(),
        d: lt.d,
        k: tc.k,
        d_in: lt.d_in(),
        d_model: lt.d_model,
        layers: lt.layers,
        ffn: lt.ffn,
    };
    let oracle = OracleSystem { k: tc.k, cost: cost_profile(&shape) };
    evaluate_system(&oracle, world, queries, &config.report_cutoffs(), tc.k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryComparison {
    pub query: usize,
    pub upqe: Option<f64>,
    /// Unified minus cascade, one entry per cutoff.
    pub delta_ndcg: Vec<f64>,
    /// Unified minus cascade relevant items missed.
    pub delta_e_prop: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub unified: String,
    pub cascade: String,
    pub cutoffs: Vec<usize>,
    pub upqe_cutoff: usize,
    pub queries: Vec<QueryComparison>,
    pub upqe_mean: Option<f64>,
    pub upqe_excluded: usize,
    pub mean_delta_ndcg: Vec<f64>,
    pub mean_delta_e_prop: f64,
    /// Unified cost over cascade cost.
    pub cost_ratio: f64,
}

/// Per-cutoff counts and medians over several pairs (seeds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub pairs: usize,
    /// Pairs where unified mean NDCG ≥ cascade, per cutoff.
    pub ndcg_wins: Vec<usize>,
    /// Pairs where unified mean E_prop ≤ cascade.
    pub e_prop_wins: usize,
    pub median_delta_ndcg: Vec<f64>,
    pub median_delta_e_prop: f64,
    pub median_upqe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema_version: u32,
    pub pairs: Vec<PairComparison>,
    pub summary: Option<PairedSummary>,
}

/// Compare two reports over the same queries and cutoffs.
pub fn compare_reports(unified: &MetricsReport, cascade: &MetricsReport, params: &UpqeParams) -> Result<PairComparison> {
    if unified.cutoffs != cascade.cutoffs {
        return Err(Error::InvalidArgument(format!("cutoffs differ: {:?} vs {:?}", unified.cutoffs, cascade.cutoffs)));
    }
    let mut u = unified.clone();
    attach_upqe(&mut u, cascade, params)?;
    let queries: Vec<QueryComparison> = u
        .queries
        .iter()
        .zip(&cascade.queries)
        .map(|(a, b)| QueryComparison {
            query: a.query,
            upqe: a.upqe,
            delta_ndcg: a.ndcg.iter().zip(&b.ndcg).map(|(x, y)| x - y).collect(),
            delta_e_prop: a.e_prop as i64 - b.e_prop as i64,
        })
        .collect();
    Ok(PairComparison {
        unified: u.system.clone(),
        cascade: cascade.system.clone(),
        cutoffs: u.cutoffs.clone(),
        upqe_cutoff: u.upqe_cutoff,
        upqe_mean: u.upqe_mean,
        upqe_excluded: u.upqe_excluded,
        mean_delta_ndcg: u.mean_ndcg.iter().zip(&cascade.mean_ndcg).map(|(x, y)| x - y).collect(),
        mean_delta_e_prop: u.mean_e_prop - cascade.mean_e_prop,
        cost_ratio: u.cost.total / cascade.cost.total,
        queries,
    })
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Summary over pairs that share cutoffs. `None` for fewer than two pairs.
pub fn paired_summary(pairs: &[PairComparison]) -> Result<Option<PairedSummary>> {
    if pairs.len() < 2 {
        return Ok(None);
    }
    let cutoffs = &pairs[0].cutoffs;
    if pairs.iter().any(|p| &p.cutoffs != cutoffs) {
        return Err(Error::InvalidArgument("pairs were evaluated at different cutoffs".into()));
    }
    let col = |c: usize| pairs.iter().map(|p| p.mean_delta_ndcg[c]).collect::<Vec<_>>();
    let upqes: Vec<f64> = pairs.iter().filter_map(|p| p.upqe_mean).collect();
    let e: Vec<f64> = pairs.iter().map(|p| p.mean_delta_e_prop).collect();
    Ok(Some(PairedSummary {
        pairs: pairs.len(),
        ndcg_wins: (0..cutoffs.len()).map(|c| col(c).iter().filter(|d| **d >= 0.0).count()).collect(),
        e_prop_wins: e.iter().filter(|d| **d <= 0.0).count(),
        median_delta_ndcg: (0..cutoffs.len()).map(|c| median(&col(c)).expect("non-empty")).collect(),
        median_delta_e_prop: median(&e).expect("non-empty"),
        median_upqe: median(&upqes),
    }))
}

impl CompareReport {
    pub fn new(pairs: Vec<PairComparison>) -> Result<Self> {
        let summary = paired_summary(&pairs)?;
        Ok(Self { schema_version: COMPARE_SCHEMA_VERSION, pairs, summary })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}

//! Joint training of the two-tower encoder and the listwise transformer,
//! and the two-phase schedule of the cascade baseline.
//!
//! One step: refresh the item index under the current encoder, sample a
//! batch of training queries, build each query's slate (top-k by encoder
//! score with every positive forced in), draw retrieval negatives, evaluate
//! the weighted objective in one graph, back-propagate once and apply Adam.
//! Top-k selection is discrete and carries no gradient; the encoder score
//! column and the embeddings inside the transformer input do.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kdb;
use crate::listwise::{assemble_graph, LtConfig, LtModel};
use crate::losses::{self, total_loss, LossComponents, LossWeights};
use crate::numerics::{AdamState, Graph, Rng, Tensor, Var};
use crate::tte::{select_top_k, ItemIndex, Tower, TteConfig, TteModel};
use crate::world::{cmp_score_desc, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    LtTtd,
    Cascade,
}

impl SystemKind {
    pub fn tag(self) -> &'static str {
        match self {
            SystemKind::LtTtd => "lt-ttd",
            SystemKind::Cascade => "cascade",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub disable_forward: bool,
    pub disable_backward: bool,
    pub disable_align: bool,
    pub pe_on: bool,
    /// Keep uniform negatives for the whole run.
    pub disable_mining: bool,
}

/// Architecture sizes shared by both systems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub d_tok: usize,
    pub hidden: usize,
    pub d: usize,
    pub d_r: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub layers: usize,
    pub ffn: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { d_tok: 32, hidden: 64, d: 32, d_r: 8, d_model: 64, n_heads: 4, layers: 2, ffn: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub seed: u64,
    pub steps: usize,
    /// Queries per step.
    pub batch_size: usize,
    /// Retrieval negatives per query.
    pub negatives: usize,
    /// Slate size.
    pub k: usize,
    pub weights: LossWeights,
    pub lr: f64,
    pub refresh_interval: usize,
    pub pool_size: usize,
    /// Share of the `m` retrieval negatives drawn from the mined pool once
    /// it exists; the rest stay uniform over grade-0 items.
    pub hard_fraction: f64,
    pub ablation: Ablation,
    pub dims: ModelDims,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 4,
            negatives: 10,
            k: 50,
            weights: LossWeights::default(),
            lr: 3e-3,
            refresh_interval: 200,
            pool_size: 20,
            hard_fraction: 0.2,
            ablation: Ablation::default(),
            dims: ModelDims::default(),
        }
    }
}

impl TrainingConfig {
    pub fn tte_config(&self, vocab_size: usize) -> TteConfig {
        let m = &self.dims;
        TteConfig { vocab_size, d_tok: m.d_tok, hidden: m.hidden, d: m.d, d_r: m.d_r }
    }

    pub fn lt_config(&self) -> LtConfig {
        let m = &self.dims;
        LtConfig {
            d: m.d,
            d_r: m.d_r,
            d_model: m.d_model,
            n_heads: m.n_heads,
            layers: m.layers,
            ffn: m.ffn,
            positional_encoding: self.ablation.pe_on,
        }
    }

    /// λ after ablation flags.
    pub fn effective_lambda(&self) -> [f64; 5] {
        let mut l = self.weights.lambda;
        let a = &self.ablation;
        if a.disable_forward {
            l[2] = 0.0;
        }
        if a.disable_backward {
            l[3] = 0.0;
        }
        if a.disable_align {
            l[4] = 0.0;
        }
        l
    }

    pub fn validate(&self, world: &World) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 || self.negatives == 0 || self.pool_size == 0 || self.refresh_interval == 0 {
            return bad("batch_size, negatives, pool_size and refresh_interval must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return bad(format!("hard_fraction must lie in [0, 1], got {}", self.hard_fraction));
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        let n = world.n_items();
        let max_rel = world.spec().bucket_sizes()[1..].iter().sum::<usize>();
        if self.k > n || self.k < (max_rel + 1).min(n) {
            return bad(format!("k = {} must lie in {}..={n} (relevant per query + 1)", self.k, max_rel + 1));
        }
        if world.spec().bucket_sizes()[0] == 0 {
            return bad("world has no irrelevant items to use as negatives".into());
        }
        self.lt_config().validate()
    }
}

/// One step of the convergence trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub phase: String,
    pub retrieve: f64,
    pub rank: f64,
    pub forward: f64,
    pub backward: f64,
    pub align: f64,
    pub total: f64,
    pub grad_norm: f64,
}

impl LogRecord {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            retrieve: self.retrieve,
            rank: self.rank,
            forward: self.forward,
            backward: self.backward,
            align: self.align,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serialises")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLog {
    pub records: Vec<LogRecord>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    assert!(!xs.is_empty(), "median of nothing");
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

impl ConvergenceLog {
    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }

    /// Least-squares slope of total loss against step.
    pub fn slope(&self) -> f64 {
        let ys = self.totals();
        let n = ys.len() as f64;
        if ys.len() < 2 {
            return 0.0;
        }
        let mx = (n - 1.0) / 2.0;
        let my = ys.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (i, y) in ys.iter().enumerate() {
            let dx = i as f64 - mx;
            sxy += dx * (y - my);
            sxx += dx * dx;
        }
        sxy / sxx
    }

    /// Median total loss over the first and last tenth of the run.
    pub fn decile_medians(&self) -> Option<(f64, f64)> {
        let ys = self.totals();
        let w = ys.len() / 10;
        if w == 0 {
            return None;
        }
        Some((median(ys[..w].to_vec()), median(ys[ys.len() - w..].to_vec())))
    }

    pub fn to_json_lines(&self) -> String {
        self.records.iter().map(|r| r.to_json_line() + "\n").collect()
    }
}

/// One query of a training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchQuery {
    pub query: usize,
    /// Slate items, encoder score descending.
    pub slate: Vec<usize>,
    pub grades: Vec<u8>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub queries: Vec<BatchQuery>,
}

/// Hard-negative pool per training query (index = query id).
pub type NegativePool = Vec<Vec<usize>>;

/// Encoder scores of every item for `query`.
pub fn query_scores(tte: &TteModel, index: &ItemIndex, world: &World, query: usize) -> Result<Vec<f64>> {
    let (e_q, _) = tte.encode_query(&world.query(query)?.tokens)?;
    index.scores(&e_q)
}

/// Top-k by encoder score; with `force_positives`, every relevant item is
/// swapped in for the lowest-scored irrelevant ones. Score descending.
pub fn slate_for(world: &World, query: usize, scores: &[f64], k: usize, force_positives: bool) -> Result<Vec<(usize, f64)>> {
    let mut top = select_top_k(scores, k)?;
    if !force_positives {
        return Ok(top);
    }
    let grades = world.grades_for(query)?;
    let mut in_top = vec![false; grades.len()];
    for &(i, _) in &top {
        in_top[i] = true;
    }
    let missing: Vec<usize> = (0..grades.len()).filter(|&i| grades[i] > 0 && !in_top[i]).collect();
    let mut to_drop = missing.len();
    let mut pos = top.len();
    while to_drop > 0 && pos > 0 {
        pos -= 1;
        if grades[top[pos].0] == 0 {
            top.remove(pos);
            to_drop -= 1;
        }
    }
    if to_drop > 0 {
        return Err(Error::InvalidArgument(format!("k = {k} cannot hold every positive of query {query}")));
    }
    top.extend(missing.into_iter().map(|i| (i, scores[i])));
    let mut pairs: Vec<(f64, usize)> = top.into_iter().map(|(i, s)| (s, i)).collect();
    pairs.sort_by(cmp_score_desc);
    Ok(pairs.into_iter().map(|(s, i)| (i, s)).collect())
}

/// For each training query, its `pool_size` highest-scoring grade-0 items.
pub fn mine_hard_negatives(world: &World, tte: &TteModel, index: &ItemIndex, pool_size: usize) -> Result<NegativePool> {
    world
        .train_queries()
        .map(|q| {
            let scores = query_scores(tte, index, world, q)?;
            let grades = world.grades_for(q)?;
            let mut pairs: Vec<(f64, usize)> = (0..scores.len()).filter(|&i| grades[i] == 0).map(|i| (scores[i], i)).collect();
            pairs.sort_by(cmp_score_desc);
            pairs.truncate(pool_size);
            Ok(pairs.into_iter().map(|(_, i)| i).collect())
        })
        .collect()
}

/// `m` negatives for `query`. Without a pool all are uniform over grade-0
/// items; with one, the first `round(m · hard_fraction)` are uniform over the
/// pool and the rest uniform over grade-0 items.
pub fn sample_negatives(
    world: &World,
    query: usize,
    m: usize,
    pool: Option<&[usize]>,
    hard_fraction: f64,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let grades = world.grades_for(query)?;
    let n_hard = match pool {
        Some(p) if !p.is_empty() => (m as f64 * hard_fraction).round() as usize,
        _ => 0,
    };
    let mut out = Vec::with_capacity(m);
    if let Some(p) = pool {
        out.extend((0..n_hard).map(|_| p[rng.below(p.len())]));
    }
    out.extend((n_hard..m).map(|_| loop {
        let i = rng.below(grades.len());
        if grades[i] == 0 {
            break i;
        }
    }));
    Ok(out)
}

/// `b` distinct training queries (all of them if there are fewer).
pub fn sample_queries(n_train: usize, b: usize, rng: &mut Rng) -> Vec<usize> {
    if b >= n_train {
        return (0..n_train).collect();
    }
    let mut out = Vec::with_capacity(b);
    while out.len() < b {
        let q = rng.below(n_train);
        if !out.contains(&q) {
            out.push(q);
        }
    }
    out
}

/// Sample a batch under the current encoder.
pub fn build_batch(
    world: &World,
    config: &TrainingConfig,
    tte: &TteModel,
    index: &ItemIndex,
    pool: Option<&NegativePool>,
    rng: &mut Rng,
) -> Result<Batch> {
    let n_train = world.train_queries().len();
    let picked = sample_queries(n_train, config.batch_size, rng);
    let mut queries = Vec::with_capacity(picked.len());
    for q in picked {
        let positives = world.relevant_items(q)?;
        if positives.is_empty() {
            log::warn!("query {q} has no relevant items; skipped");
            continue;
        }
        let scores = query_scores(tte, index, world, q)?;
        let slate: Vec<usize> = slate_for(world, q, &scores, config.k, true)?.into_iter().map(|p| p.0).collect();
        let grades = world.grades_for(q)?;
        if positives.iter().any(|p| !slate.contains(p)) {
            return Err(Error::InvalidArgument(format!("slate of query {q} lost a positive")));
        }
        let negatives = sample_negatives(world, q, config.negatives, pool.map(|p| p[q].as_slice()), config.hard_fraction, rng)?;
        queries.push(BatchQuery { query: q, grades: slate.iter().map(|&i| grades[i]).collect(), slate, positives, negatives });
    }
    Ok(Batch { queries })
}

/// Which parameters a step trains and which losses it uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Joint,
    /// Encoder only, retrieval loss only.
    Retrieve,
    /// Transformer only, ranking loss only, over frozen encoder slates.
    Rank,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Joint => "joint",
            Phase::Retrieve => "retrieve",
            Phase::Rank => "rank",
        }
    }
}

/// Slate positions of `items` (all present by construction).
fn positions(slate: &[usize], items: &[usize]) -> Vec<usize> {
    items.iter().map(|i| slate.iter().position(|s| s == i).expect("item in slate")).collect()
}

fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

fn components_of(g: &Graph, vars: &[[Option<Var>; 5]]) -> LossComponents {
    let mut acc = [0.0; 5];
    for per_query in vars {
        for (a, v) in acc.iter_mut().zip(per_query) {
            if let Some(v) = v {
                *a += g.value(*v).item();
            }
        }
    }
    let n = vars.len().max(1) as f64;
    LossComponents::from_array(acc.map(|a| a / n))
}

/// Scalar `Σ_q Σ_t λ_t L_t(q) / B` from per-query loss nodes.
pub fn weighted_sum(g: &mut Graph, vars: &[[Option<Var>; 5]], lambda: &[f64; 5]) -> Result<Var> {
    let mut total = g.constant(Tensor::scalar(0.0));
    for per_query in vars {
        for (v, &l) in per_query.iter().zip(lambda) {
            if let (Some(v), true) = (v, l > 0.0) {
                let t = g.scale(*v, l / vars.len() as f64);
                total = g.add(total, t)?;
            }
        }
    }
    Ok(total)
}

/// Joint objective of one batch inside `g`. Returns per-query loss nodes
/// (retrieve, rank, forward, backward, align).
pub fn joint_losses(
    g: &mut Graph,
    tte: &TteModel,
    tte_b: &crate::numerics::Bound,
    lt: &LtModel,
    lt_b: &crate::numerics::Bound,
    world: &World,
    batch: &Batch,
    weights: &LossWeights,
) -> Result<Vec<[Option<Var>; 5]>> {
    if batch.queries.is_empty() {
        return Ok(Vec::new());
    }
    let q_seqs: Vec<&[usize]> = batch.queries.iter().map(|bq| world.query(bq.query).map(|q| q.tokens.as_slice())).collect::<Result<_>>()?;
    let q_enc = tte.encode_graph(g, tte_b, Tower::Query, &q_seqs)?;

    // every item any query needs, encoded once
    let mut items: Vec<usize> = batch.queries.iter().flat_map(|bq| bq.slate.iter().chain(&bq.negatives).copied()).collect();
    items.sort_unstable();
    items.dedup();
    let i_seqs: Vec<&[usize]> = items.iter().map(|&i| world.items()[i].tokens.as_slice()).collect();
    let i_enc = tte.encode_graph(g, tte_b, Tower::Item, &i_seqs)?;
    let row_of = |i: usize| items.binary_search(&i).expect("encoded item");

    let mut out = Vec::with_capacity(batch.queries.len());
    for (qi, bq) in batch.queries.iter().enumerate() {
        let e_q = g.gather_rows(q_enc.e, &[qi])?;
        let r_q = g.gather_rows(q_enc.r, &[qi])?;
        let slate_rows: Vec<usize> = bq.slate.iter().map(|&i| row_of(i)).collect();
        let e_s = g.gather_rows(i_enc.e, &slate_rows)?;
        let r_s = g.gather_rows(i_enc.r, &slate_rows)?;
        let s_tte = g.matmul_nt(e_s, e_q)?;

        let s_pos = g.gather_rows(s_tte, &positions(&bq.slate, &bq.positives))?;
        let neg_rows: Vec<usize> = bq.negatives.iter().map(|&i| row_of(i)).collect();
        let s_neg = if neg_rows.is_empty() {
            None
        } else {
            let e_n = g.gather_rows(i_enc.e, &neg_rows)?;
            Some(g.matmul_nt(e_q, e_n)?)
        };
        let l_ret = losses::retrieve_graph(g, s_pos, s_neg, weights.tau_retrieve)?;

        let x = assemble_graph(g, e_q, e_s, r_q, r_s, s_tte)?;
        let lt_out = lt.forward_graph(g, lt_b, x)?;
        let l_rank = losses::approx_ndcg_graph(g, lt_out.scores, &bq.grades, weights.t_rank)?;
        let l_fwd = kdb::forward_distill_graph(g, lt_out.scores, s_tte, weights.tau_distill)?;
        let l_bwd = kdb::backward_distill_graph(g, s_tte, lt_out.scores)?;
        let l_align = kdb::alignment_graph(g, e_s, lt_out.z, lt_b[lt.align_id()])?;
        out.push([Some(l_ret), Some(l_rank), Some(l_fwd), Some(l_bwd), Some(l_align)]);
    }
    Ok(out)
}

/// Retrieval-only objective (cascade phase 1).
fn retrieve_losses(g: &mut Graph, tte: &TteModel, tte_b: &crate::numerics::Bound, world: &World, batch: &Batch, tau: f64) -> Result<Vec<[Option<Var>; 5]>> {
    let mut out = Vec::with_capacity(batch.queries.len());
    for bq in &batch.queries {
        let q_tokens = world.query(bq.query)?.tokens.as_slice();
        let q_enc = tte.encode_graph(g, tte_b, Tower::Query, &[q_tokens])?;
        let pos: Vec<&[usize]> = bq.positives.iter().map(|&i| world.items()[i].tokens.as_slice()).collect();
        let p_enc = tte.encode_graph(g, tte_b, Tower::Item, &pos)?;
        let s_pos = g.matmul_nt(p_enc.e, q_enc.e)?;
        let s_neg = if bq.negatives.is_empty() {
            None
        } else {
            let neg: Vec<&[usize]> = bq.negatives.iter().map(|&i| world.items()[i].tokens.as_slice()).collect();
            let n_enc = tte.encode_graph(g, tte_b, Tower::Item, &neg)?;
            Some(g.matmul_nt(q_enc.e, n_enc.e)?)
        };
        out.push([Some(losses::retrieve_graph(g, s_pos, s_neg, tau)?), None, None, None, None]);
    }
    Ok(out)
}

/// Ranking-only objective over fixed transformer inputs (cascade phase 2).
fn rank_losses(g: &mut Graph, lt: &LtModel, lt_b: &crate::numerics::Bound, slates: &[(Tensor, Vec<u8>)], t_rank: f64) -> Result<Vec<[Option<Var>; 5]>> {
    let mut out = Vec::with_capacity(slates.len());
    for (x, grades) in slates {
        let x = g.constant(x.clone());
        let o = lt.forward_graph(g, lt_b, x)?;
        out.push([None, Some(losses::approx_ndcg_graph(g, o.scores, grades, t_rank)?), None, None, None]);
    }
    Ok(out)
}

/// Frozen-encoder transformer input of a pure top-k slate.
pub fn frozen_inputs(tte: &TteModel, index: &ItemIndex, world: &World, query: usize, k: usize) -> Result<(Tensor, Vec<usize>, Vec<f64>)> {
    let (e_q, r_q) = tte.encode_query(&world.query(query)?.tokens)?;
    let top = index.top_k(&e_q, k)?;
    let d_in = 2 * e_q.len() + 2 * r_q.len() + 1;
    let mut data = Vec::with_capacity(top.len() * d_in);
    for &(i, s) in &top {
        data.extend_from_slice(&e_q);
        data.extend_from_slice(index.emb.row_slice(i));
        data.extend_from_slice(&r_q);
        data.extend_from_slice(index.res.row_slice(i));
        data.push(s);
    }
    let x = Tensor::matrix(top.len(), d_in, data)?;
    Ok((x, top.iter().map(|p| p.0).collect(), top.iter().map(|p| p.1).collect()))
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub system: SystemKind,
    pub tte: TteModel,
    pub lt: LtModel,
    pub tte_adam: AdamState,
    pub lt_adam: AdamState,
    pub rng: Rng,
    pub step: usize,
    pub pool: Option<NegativePool>,
}

/// A training run in progress.
pub struct Trainer<'w> {
    world: &'w World,
    config: TrainingConfig,
    state: TrainerState,
    index: Option<ItemIndex>,
}

/// Initial models for a seed; both systems start from the same weights.
pub fn init_models(config: &TrainingConfig, world: &World) -> Result<(TteModel, LtModel)> {
    let tte = TteModel::new(config.tte_config(world.spec().vocab_size), &mut Rng::with_stream(config.seed, 10));
    let lt = LtModel::new(config.lt_config(), &mut Rng::with_stream(config.seed, 11))?;
    Ok((tte, lt))
}

impl<'w> Trainer<'w> {
    pub fn new(world: &'w World, config: TrainingConfig, system: SystemKind) -> Result<Self> {
        config.validate(world)?;
        let (tte, lt) = init_models(&config, world)?;
        let state = TrainerState {
            system,
            tte_adam: AdamState::new(config.lr, tte.params().tensors()),
            lt_adam: AdamState::new(config.lr, lt.params().tensors()),
            tte,
            lt,
            rng: Rng::with_stream(config.seed, 12),
            step: 0,
            pool: None,
        };
        Ok(Self { world, config, state, index: None })
    }

    pub fn from_state(world: &'w World, config: TrainingConfig, state: TrainerState) -> Result<Self> {
        config.validate(world)?;
        Ok(Self { world, config, state, index: None })
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn into_state(self) -> TrainerState {
        self.state
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn step_count(&self) -> usize {
        self.state.step
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.steps
    }

    /// Phase of the step about to run.
    pub fn phase(&self) -> Phase {
        match self.state.system {
            SystemKind::LtTtd => Phase::Joint,
            SystemKind::Cascade if self.state.step < self.config.steps / 2 => Phase::Retrieve,
            SystemKind::Cascade => Phase::Rank,
        }
    }

    /// Item index under the current encoder.
    pub fn index(&mut self) -> Result<&ItemIndex> {
        if self.index.is_none() {
            self.index = Some(self.state.tte.index_items(self.world)?);
        }
        Ok(self.index.as_ref().expect("index just built"))
    }

    fn maybe_refresh_pool(&mut self, phase: Phase) -> Result<()> {
        let s = self.state.step;
        if phase == Phase::Rank || self.config.ablation.disable_mining || s == 0 || s % self.config.refresh_interval != 0 {
            return Ok(());
        }
        if !self.state.tte.params().all_finite() || !self.state.lt.params().all_finite() {
            return Err(Error::NonFiniteLoss { step: s, components: "non-finite parameters at mining refresh".into() });
        }
        let pool_size = self.config.pool_size;
        let index = self.index()?.clone();
        self.state.pool = Some(mine_hard_negatives(self.world, &self.state.tte, &index, pool_size)?);
        Ok(())
    }

    /// Run one step and return its log record.
    pub fn step(&mut self) -> Result<LogRecord> {
        let phase = self.phase();
        let world = self.world;
        self.maybe_refresh_pool(phase)?;
        let lambda = match phase {
            Phase::Joint => self.config.effective_lambda(),
            Phase::Retrieve => [1.0, 0.0, 0.0, 0.0, 0.0],
            Phase::Rank => [0.0, 1.0, 0.0, 0.0, 0.0],
        };

        let mut g = Graph::new();
        let train_tte = phase != Phase::Rank;
        let train_lt = phase != Phase::Retrieve;
        let tte_b = self.state.tte.params().bind(&mut g, train_tte);
        let lt_b = self.state.lt.params().bind(&mut g, train_lt);
        let vars = match phase {
            Phase::Joint => {
                self.index()?;
                let index = self.index.as_ref().expect("index");
                let batch = build_batch(world, &self.config, &self.state.tte, index, self.state.pool.as_ref(), &mut self.state.rng)?;
                joint_losses(&mut g, &self.state.tte, &tte_b, &self.state.lt, &lt_b, world, &batch, &self.config.weights)?
            }
            Phase::Retrieve => {
                let n_train = world.train_queries().len();
                let picked = sample_queries(n_train, self.config.batch_size, &mut self.state.rng);
                let mut batch = Batch::default();
                for q in picked {
                    let positives = world.relevant_items(q)?;
                    if positives.is_empty() {
                        log::warn!("query {q} has no relevant items; skipped");
                        continue;
                    }
                    let pool = self.state.pool.as_ref().map(|p| p[q].as_slice());
                    let negatives = sample_negatives(world, q, self.config.negatives, pool, self.config.hard_fraction, &mut self.state.rng)?;
                    batch.queries.push(BatchQuery { query: q, slate: Vec::new(), grades: Vec::new(), positives, negatives });
                }
                retrieve_losses(&mut g, &self.state.tte, &tte_b, world, &batch, self.config.weights.tau_retrieve)?
            }
            Phase::Rank => {
                let n_train = world.train_queries().len();
                let picked = sample_queries(n_train, self.config.batch_size, &mut self.state.rng);
                self.index()?;
                let index = self.index.as_ref().expect("index");
                let mut slates = Vec::with_capacity(picked.len());
                for q in picked {
                    let (x, items, _) = frozen_inputs(&self.state.tte, index, world, q, self.config.k)?;
                    let grades = world.grades_for(q)?;
                    slates.push((x, items.iter().map(|&i| grades[i]).collect()));
                }
                rank_losses(&mut g, &self.state.lt, &lt_b, &slates, self.config.weights.t_rank)?
            }
        };
        let comps = components_of(&g, &vars);
        let loss = weighted_sum(&mut g, &vars, &lambda)?;
        let total = g.value(loss).item();
        let step = self.state.step;
        if !total.is_finite() || comps.as_array().iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFiniteLoss { step, components: format!("{comps:?}") });
        }
        let grads = g.backward(loss)?;
        let tte_grads = tte_b.gradients(&grads);
        let lt_grads = lt_b.gradients(&grads);
        let mut norm_sq = 0.0;
        if train_tte {
            norm_sq += grad_norm(&tte_grads).powi(2);
            self.state.tte_adam.step(self.state.tte.params_mut().tensors_mut(), &tte_grads)?;
            self.index = None;
        }
        if train_lt {
            norm_sq += grad_norm(&lt_grads).powi(2);
            self.state.lt_adam.step(self.state.lt.params_mut().tensors_mut(), &lt_grads)?;
        }
        self.state.step += 1;
        debug_assert!((total - total_loss(&comps, &LossWeights { lambda, ..self.config.weights.clone() })).abs() <= 1e-9 * total.abs().max(1.0));
        Ok(LogRecord {
            step,
            phase: phase.name().to_string(),
            retrieve: comps.retrieve,
            rank: comps.rank,
            forward: comps.forward,
            backward: comps.backward,
            align: comps.align,
            total,
            grad_norm: norm_sq.sqrt(),
        })
    }

    /// Run until `until` steps are done (capped at the configured total),
    /// streaming records to `sink`.
    pub fn run(&mut self, until: usize, mut sink: impl FnMut(&LogRecord) -> Result<()>) -> Result<()> {
        while self.state.step < until.min(self.config.steps) {
            let rec = self.step()?;
            sink(&rec)?;
        }
        Ok(())
    }
}

/// Result of a complete run.
pub struct Fitted {
    pub tte: TteModel,
    pub lt: LtModel,
    pub log: ConvergenceLog,
}

/// Train `system` on `world` for `config.steps` steps.
pub fn fit(world: &World, config: &TrainingConfig, system: SystemKind) -> Result<Fitted> {
    let mut trainer = Trainer::new(world, config.clone(), system)?;
    let mut log = ConvergenceLog::default();
    trainer.run(config.steps, |r| {
        log.records.push(r.clone());
        Ok(())
    })?;
    let state = trainer.into_state();
    Ok(Fitted { tte: state.tte, lt: state.lt, log })
}

/// Append JSON lines to a writer.
pub fn write_records(w: &mut impl Write, records: &[LogRecord]) -> Result<()> {
    for r in records {
        writeln!(w, "{}", r.to_json_line())?;
    }
    Ok(())
}

/// Mean over `queries` of `mean_j (s_tte_j − s_lt_j)²` on pure top-k slates.
pub fn score_gap_mse(world: &World, tte: &TteModel, lt: &LtModel, index: &ItemIndex, queries: &[usize], k: usize) -> Result<f64> {
    let mut acc = 0.0;
    for &q in queries {
        let (x, _, s_tte) = frozen_inputs(tte, index, world, q, k)?;
        let mut g = Graph::inference();
        let b = lt.params().bind(&mut g, false);
        let xv = g.constant(x);
        let out = lt.forward_graph(&mut g, &b, xv)?;
        acc += kdb::backward_distill_loss(&s_tte, g.value(out.scores).data())?;
    }
    Ok(acc / queries.len().max(1) as f64)
}

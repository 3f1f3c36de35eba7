//! Two-tower encoder: token embeddings, attention pooling, embedding and
//! residual heads per tower, cosine scoring and exact top-k retrieval.
//!
//! Each tower pools its token embeddings `h_j` with weights
//! `α = softmax(w_poolᵀ h_j)`, then feeds the pooled vector to two 2-layer
//! tanh MLPs: one whose L2-normalised output is the retrieval embedding
//! `e`, and one producing the unnormalised residual features `r`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::gemm;
use crate::numerics::{Bound, Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::world::{cmp_score_desc, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TteConfig {
    pub vocab_size: usize,
    pub d_tok: usize,
    pub hidden: usize,
    /// Embedding dimension `d`.
    pub d: usize,
    /// Residual dimension `d_r`.
    pub d_r: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tower {
    Query,
    Item,
}

#[derive(Clone, Debug, PartialEq)]
struct TowerIds {
    pool: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    rw1: ParamId,
    rb1: ParamId,
    rw2: ParamId,
    rb2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TteModel {
    config: TteConfig,
    params: ParamStore,
    embedding: ParamId,
    query: TowerIds,
    item: TowerIds,
}

/// Graph outputs of a batch encode.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `m x d`, unit rows.
    pub e: Var,
    /// `m x d_r`.
    pub r: Var,
    /// Pooling weights per sequence.
    pub alphas: Vec<Vec<f64>>,
}

fn tower_ids(p: &mut ParamStore, prefix: &str, c: &TteConfig, rng: &mut Rng) -> TowerIds {
    let bound = 1.0 / (c.d_tok as f64).sqrt();
    let pool = Tensor::row((0..c.d_tok).map(|_| rng.uniform(-bound, bound)).collect());
    TowerIds {
        pool: p.insert(format!("{prefix}.pool"), pool),
        w1: p.insert_weight(&format!("{prefix}.w1"), c.d_tok, c.hidden, rng),
        b1: p.insert_zeros(&format!("{prefix}.b1"), &[1, c.hidden]),
        w2: p.insert_weight(&format!("{prefix}.w2"), c.hidden, c.d, rng),
        b2: p.insert_zeros(&format!("{prefix}.b2"), &[1, c.d]),
        rw1: p.insert_weight(&format!("{prefix}.rw1"), c.d_tok, c.hidden, rng),
        rb1: p.insert_zeros(&format!("{prefix}.rb1"), &[1, c.hidden]),
        rw2: p.insert_weight(&format!("{prefix}.rw2"), c.hidden, c.d_r, rng),
        rb2: p.insert_zeros(&format!("{prefix}.rb2"), &[1, c.d_r]),
    }
}

impl TteModel {
    pub fn new(config: TteConfig, rng: &mut Rng) -> Self {
        let mut params = ParamStore::new();
        let bound = 1.0 / (config.d_tok as f64).sqrt();
        let table = (0..config.vocab_size * config.d_tok).map(|_| rng.uniform(-bound, bound)).collect();
        let embedding =
            params.insert("embedding", Tensor::matrix(config.vocab_size, config.d_tok, table).expect("table shape"));
        let query = tower_ids(&mut params, "query", &config, rng);
        let item = tower_ids(&mut params, "item", &config, rng);
        Self { config, params, embedding, query, item }
    }

    pub fn config(&self) -> &TteConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn ids(&self, tower: Tower) -> &TowerIds {
        match tower {
            Tower::Query => &self.query,
            Tower::Item => &self.item,
        }
    }

    /// Encode a batch of token sequences with one tower inside `g`.
    pub fn encode_graph(&self, g: &mut Graph, b: &Bound, tower: Tower, seqs: &[&[usize]]) -> Result<Encoded> {
        if seqs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let ids = self.ids(tower);
        let (p, alphas) = g.segment_pool(b[self.embedding], b[ids.pool], seqs)?;

        let h1 = g.matmul(p, b[ids.w1])?;
        let h1 = g.add_row(h1, b[ids.b1])?;
        let h1 = g.tanh(h1);
        let e = g.matmul(h1, b[ids.w2])?;
        let e = g.add_row(e, b[ids.b2])?;
        let e = g.l2_normalize_rows(e)?;

        let r1 = g.matmul(p, b[ids.rw1])?;
        let r1 = g.add_row(r1, b[ids.rb1])?;
        let r1 = g.tanh(r1);
        let r = g.matmul(r1, b[ids.rw2])?;
        let r = g.add_row(r, b[ids.rb2])?;
        Ok(Encoded { e, r, alphas })
    }

    fn encode_one(&self, tower: Tower, tokens: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::inference();
        let b = self.params.bind(&mut g, false);
        let enc = self.encode_graph(&mut g, &b, tower, &[tokens])?;
        Ok((g.value(enc.e).data().to_vec(), g.value(enc.r).data().to_vec()))
    }

    /// `(e_q, r_q)` for one query.
    pub fn encode_query(&self, tokens: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.encode_one(Tower::Query, tokens)
    }

    /// `(e_i, r_i)` for one item.
    pub fn encode_item(&self, tokens: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.encode_one(Tower::Item, tokens)
    }

    /// Pooling weights the tower assigns to `tokens`.
    pub fn pooling_weights(&self, tower: Tower, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let b = self.params.bind(&mut g, false);
        let enc = self.encode_graph(&mut g, &b, tower, &[tokens])?;
        Ok(enc.alphas.into_iter().next().unwrap_or_default())
    }

    /// Encode every item of `world` (no gradient recording).
    pub fn index_items(&self, world: &World) -> Result<ItemIndex> {
        const CHUNK: usize = 256;
        let n = world.n_items();
        let mut emb = Vec::with_capacity(n * self.config.d);
        let mut res = Vec::with_capacity(n * self.config.d_r);
        let seqs: Vec<&[usize]> = world.items().iter().map(|it| it.tokens.as_slice()).collect();
        for chunk in seqs.chunks(CHUNK) {
            let mut g = Graph::inference();
            let b = self.params.bind(&mut g, false);
            let enc = self.encode_graph(&mut g, &b, Tower::Item, chunk)?;
            emb.extend_from_slice(g.value(enc.e).data());
            res.extend_from_slice(g.value(enc.r).data());
        }
        Ok(ItemIndex {
            emb: Tensor::matrix(n, self.config.d, emb)?,
            res: Tensor::matrix(n, self.config.d_r, res)?,
        })
    }
}

/// Precomputed item embeddings and residuals, row `i` for item `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemIndex {
    pub emb: Tensor,
    pub res: Tensor,
}

impl ItemIndex {
    pub fn len(&self) -> usize {
        self.emb.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cosine score of every item against a unit query embedding.
    pub fn scores(&self, e_q: &[f64]) -> Result<Vec<f64>> {
        if e_q.len() != self.emb.cols() {
            return Err(Error::ShapeMismatch {
                op: "index_scores",
                left: self.emb.shape().to_vec(),
                right: vec![e_q.len()],
            });
        }
        // same kernel as the batched path so both give identical bits
        let mut out = vec![0.0; self.len()];
        gemm(1, e_q.len(), self.len(), e_q, (e_q.len(), 1), self.emb.data(), (1, e_q.len()), &mut out, false);
        Ok(out)
    }

    /// The `k` highest-scoring items, score descending, ties by ascending id.
    pub fn top_k(&self, e_q: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        let scores = self.scores(e_q)?;
        select_top_k(&scores, k)
    }

    /// [`top_k`](Self::top_k) for a block of unit queries, one per row.
    /// Items are scored in tiles so the working set stays small; each
    /// query keeps a running top-k.
    pub fn top_k_batch(&self, queries: &Tensor, k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
        const TILE: usize = 2048;
        let (n, d, b) = (self.len(), self.emb.cols(), queries.rows());
        if queries.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "index_scores",
                left: self.emb.shape().to_vec(),
                right: queries.shape().to_vec(),
            });
        }
        if k == 0 || k > n {
            return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={n}")));
        }
        let mut best: Vec<RunningTopK> = (0..b).map(|_| RunningTopK::new(k)).collect();
        let mut scores = vec![0.0; b * TILE.min(n)];
        for start in (0..n).step_by(TILE) {
            let len = TILE.min(n - start);
            let tile = &self.emb.data()[start * d..(start + len) * d];
            gemm(b, d, len, queries.data(), (d, 1), tile, (1, d), &mut scores[..b * len], false);
            for (acc, row) in best.iter_mut().zip(scores.chunks_exact(len)) {
                for (j, &s) in row.iter().enumerate() {
                    acc.offer(s, start + j);
                }
            }
        }
        Ok(best.into_iter().map(RunningTopK::finish).collect())
    }
}

/// Streaming exact top-k. Candidates that beat the current k-th best are
/// buffered; the buffer is cut back to k when it reaches 2k.
struct RunningTopK {
    k: usize,
    buf: Vec<(f64, usize)>,
    /// The k-th best entry once at least k have been seen.
    floor: Option<(f64, usize)>,
}

impl RunningTopK {
    fn new(k: usize) -> Self {
        Self { k, buf: Vec::with_capacity(2 * k), floor: None }
    }

    fn offer(&mut self, score: f64, id: usize) {
        let e = (score, id);
        if let Some(f) = &self.floor {
            if cmp_score_desc(&e, f) != Ordering::Less {
                return;
            }
        }
        self.buf.push(e);
        if self.buf.len() == 2 * self.k {
            self.shrink();
        }
    }

    fn shrink(&mut self) {
        if self.buf.len() > self.k {
            self.buf.select_nth_unstable_by(self.k - 1, cmp_score_desc);
            self.buf.truncate(self.k);
            self.floor = self.buf.iter().copied().max_by(cmp_score_desc);
        }
    }

    fn finish(mut self) -> Vec<(usize, f64)> {
        self.shrink();
        self.buf.sort_by(cmp_score_desc);
        self.buf.into_iter().map(|(s, i)| (i, s)).collect()
    }
}

/// Exact top-k over a dense score vector.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={n}")));
    }
    let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    if k < n {
        pairs.select_nth_unstable_by(k - 1, cmp_score_desc);
        pairs.truncate(k);
    }
    pairs.sort_by(cmp_score_desc);
    Ok(pairs.into_iter().map(|(s, i)| (i, s)).collect())
}

/// Cosine similarity of two non-zero vectors.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { op: "similarity", left: vec![a.len()], right: vec![b.len()] });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((crate::world::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

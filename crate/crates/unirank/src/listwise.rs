//! Listwise transformer: joint per-candidate inputs, pre-LN self-attention
//! layers over the whole slate and a linear scoring head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtConfig {
    /// TTE embedding dimension `d`.
    pub d: usize,
    /// TTE residual dimension `d_r`.
    pub d_r: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub layers: usize,
    pub ffn: usize,
    /// Add sinusoidal encodings of the slate rank to the inputs.
    pub positional_encoding: bool,
}

impl LtConfig {
    /// Width of one assembled input row, `2d + 2d_r + 1`.
    pub fn d_in(&self) -> usize {
        2 * self.d + 2 * self.d_r + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_model == 0 || self.n_heads == 0 || self.layers == 0 || self.ffn == 0 {
            return Err(Error::InvalidArgument("listwise dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    f1: ParamId,
    fb1: ParamId,
    f2: ParamId,
    fb2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LtModel {
    config: LtConfig,
    params: ParamStore,
    proj_w: ParamId,
    proj_b: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    w_score: ParamId,
    b_score: ParamId,
    align: ParamId,
}

/// Graph outputs of one slate forward pass.
#[derive(Clone, Debug)]
pub struct LtOutput {
    /// `k x 1`.
    pub scores: Var,
    /// Final representations `z^(L)`, `k x d_model`.
    pub z: Var,
    /// Attention weights, layer-major then head, each `k x k`.
    pub attention: Vec<Var>,
}

const LN_EPS: f64 = 1e-5;

impl LtModel {
    pub fn new(config: LtConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (dm, ff) = (config.d_model, config.ffn);
        let mut p = ParamStore::new();
        let proj_w = p.insert_weight("proj.w", config.d_in(), dm, rng);
        let proj_b = p.insert_zeros("proj.b", &[1, dm]);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerIds {
                ln1_g: p.insert(n("ln1.g"), Tensor::filled(&[1, dm], 1.0)),
                ln1_b: p.insert_zeros(&n("ln1.b"), &[1, dm]),
                wq: p.insert_weight(&n("wq"), dm, dm, rng),
                wk: p.insert_weight(&n("wk"), dm, dm, rng),
                wv: p.insert_weight(&n("wv"), dm, dm, rng),
                wo: p.insert_weight(&n("wo"), dm, dm, rng),
                bo: p.insert_zeros(&n("bo"), &[1, dm]),
                ln2_g: p.insert(n("ln2.g"), Tensor::filled(&[1, dm], 1.0)),
                ln2_b: p.insert_zeros(&n("ln2.b"), &[1, dm]),
                f1: p.insert_weight(&n("ffn.w1"), dm, ff, rng),
                fb1: p.insert_zeros(&n("ffn.b1"), &[1, ff]),
                f2: p.insert_weight(&n("ffn.w2"), ff, dm, rng),
                fb2: p.insert_zeros(&n("ffn.b2"), &[1, dm]),
            });
        }
        let lnf_g = p.insert("final_ln.g", Tensor::filled(&[1, dm], 1.0));
        let lnf_b = p.insert_zeros("final_ln.b", &[1, dm]);
        let w_score = p.insert_weight("head.w", dm, 1, rng);
        let b_score = p.insert_zeros("head.b", &[1, 1]);
        // stored as d x d_model; the alignment residual is e - z Wᵀ
        let align = {
            let bound = 1.0 / (dm as f64).sqrt();
            let data = (0..config.d * dm).map(|_| rng.uniform(-bound, bound)).collect();
            p.insert("align.w", Tensor::matrix(config.d, dm, data)?)
        };
        Ok(Self { config, params: p, proj_w, proj_b, layers, lnf_g, lnf_b, w_score, b_score, align })
    }

    pub fn config(&self) -> &LtConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn align_id(&self) -> ParamId {
        self.align
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.w_score, self.b_score)
    }

    /// Forward pass over assembled inputs `x` (`k x d_in`).
    pub fn forward_graph(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<LtOutput> {
        let c = &self.config;
        let shape = g.shape(x).to_vec();
        if shape[0] == 0 {
            return Err(Error::InvalidArgument("empty slate".into()));
        }
        if shape[1] != c.d_in() {
            return Err(Error::ShapeMismatch { op: "lt_forward", left: shape, right: vec![0, c.d_in()] });
        }
        let k = shape[0];
        let x = if c.positional_encoding {
            let pe = g.constant(positional_table(k, c.d_in()));
            g.add(x, pe)?
        } else {
            x
        };
        let z = g.matmul(x, b[self.proj_w])?;
        let mut z = g.add_row(z, b[self.proj_b])?;

        let mut attention = Vec::with_capacity(c.layers * c.n_heads);
        for ids in &self.layers {
            let y = g.layer_norm_rows(z, b[ids.ln1_g], b[ids.ln1_b], LN_EPS)?;
            let q = g.matmul(y, b[ids.wq])?;
            let kk = g.matmul(y, b[ids.wk])?;
            let v = g.matmul(y, b[ids.wv])?;
            let (cat, maps) = multi_head_attention(g, q, kk, v, c.n_heads)?;
            attention.extend(maps);
            let o = g.matmul(cat, b[ids.wo])?;
            let o = g.add_row(o, b[ids.bo])?;
            let h1 = g.add(z, o)?;

            let y2 = g.layer_norm_rows(h1, b[ids.ln2_g], b[ids.ln2_b], LN_EPS)?;
            let f = g.matmul(y2, b[ids.f1])?;
            let f = g.add_row(f, b[ids.fb1])?;
            let f = g.gelu(f);
            let f = g.matmul(f, b[ids.f2])?;
            let f = g.add_row(f, b[ids.fb2])?;
            z = g.add(h1, f)?;
        }
        let z = g.layer_norm_rows(z, b[self.lnf_g], b[self.lnf_b], LN_EPS)?;
        let s = g.matmul(z, b[self.w_score])?;
        let scores = g.add_scalar(s, b[self.b_score])?;
        debug_assert_eq!(g.shape(scores), &[k, 1]);
        Ok(LtOutput { scores, z, attention })
    }

    /// LT scores of an assembled slate.
    pub fn forward(&self, slate: &CandidateSlate) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(assemble_inputs(slate)?);
        let out = self.forward_graph(&mut g, &b, x)?;
        Ok(g.value(out.scores).data().to_vec())
    }

    /// Scores plus every attention matrix, for inspection.
    pub fn forward_with_attention(&self, slate: &CandidateSlate) -> Result<(Vec<f64>, Vec<Tensor>)> {
        let mut g = Graph::inference();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(assemble_inputs(slate)?);
        let out = self.forward_graph(&mut g, &b, x)?;
        let att = out.attention.iter().map(|&a| g.value(a).clone()).collect();
        Ok((g.value(out.scores).data().to_vec(), att))
    }

    /// Matmul multiply-adds of one inference pass on a `k`-slate.
    pub fn measured_macs(&self, k: usize) -> Result<u64> {
        let mut g = Graph::inference();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[k, self.config.d_in()]));
        self.forward_graph(&mut g, &b, x)?;
        Ok(g.matmul_macs())
    }
}

/// Scaled dot-product attention over `n_heads` column blocks of `q`, `k`
/// and `v` (all `k x d_model`). Returns the concatenated head outputs and
/// each head's `k x k` attention matrix.
pub fn multi_head_attention(g: &mut Graph, q: Var, k: Var, v: Var, n_heads: usize) -> Result<(Var, Vec<Var>)> {
    let dm = g.shape(q)[1];
    if n_heads == 0 || dm % n_heads != 0 {
        return Err(Error::InvalidArgument(format!("{n_heads} heads do not divide width {dm}")));
    }
    let dh = dm / n_heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut maps = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, inv_sqrt);
        let a = g.softmax_rows(s);
        maps.push(a);
        heads.push(g.matmul(a, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    Ok((cat, maps))
}

/// Sinusoidal encodings of ranks `0..k` in `width` dimensions.
pub fn positional_table(k: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(k * width);
    for pos in 0..k {
        for i in 0..width {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 * freq;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(k, width, data).expect("positional table shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlateEntry {
    pub item: usize,
    pub tte_score: f64,
    pub lt_score: Option<f64>,
    pub grade: Option<u8>,
}

/// One query's candidates with the embeddings the LT consumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSlate {
    pub query: usize,
    pub entries: Vec<SlateEntry>,
    pub e_q: Vec<f64>,
    pub r_q: Vec<f64>,
    /// One per entry, same order.
    pub e_items: Vec<Vec<f64>>,
    pub r_items: Vec<Vec<f64>>,
}

impl CandidateSlate {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn items(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.item).collect()
    }

    /// Reorder entries (and their embeddings) so entry `j` becomes `perm[j]`'s.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            query: self.query,
            entries: perm.iter().map(|&p| self.entries[p].clone()).collect(),
            e_q: self.e_q.clone(),
            r_q: self.r_q.clone(),
            e_items: perm.iter().map(|&p| self.e_items[p].clone()).collect(),
            r_items: perm.iter().map(|&p| self.r_items[p].clone()).collect(),
        }
    }

    /// Random slate of `k` distinct items with unit embeddings of width `d`
    /// and Gaussian residuals of width `d_r`.
    pub fn random(k: usize, d: usize, d_r: usize, rng: &mut Rng) -> Self {
        Self {
            query: 0,
            entries: (0..k)
                .map(|i| SlateEntry { item: i, tte_score: rng.uniform(-1.0, 1.0), lt_score: None, grade: None })
                .collect(),
            e_q: rng.unit_vector(d),
            r_q: (0..d_r).map(|_| rng.normal()).collect(),
            e_items: (0..k).map(|_| rng.unit_vector(d)).collect(),
            r_items: (0..k).map(|_| (0..d_r).map(|_| rng.normal()).collect()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidArgument("slate must hold at least one candidate".into()));
        }
        if self.e_q.is_empty() {
            return Err(Error::IncompleteSlate("query embedding"));
        }
        if self.e_items.len() != self.entries.len() || self.e_items.iter().any(|e| e.len() != self.e_q.len()) {
            return Err(Error::IncompleteSlate("item embeddings"));
        }
        if self.r_items.len() != self.entries.len() || self.r_items.iter().any(|r| r.len() != self.r_q.len()) {
            return Err(Error::IncompleteSlate("item residuals"));
        }
        let mut ids = self.items();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("slate item ids must be distinct".into()));
        }
        Ok(())
    }
}

/// Row `j` is `[e_q; e_j; r_q; r_j; s_tte_j]`.
pub fn assemble_inputs(slate: &CandidateSlate) -> Result<Tensor> {
    slate.validate()?;
    let width = 2 * slate.e_q.len() + 2 * slate.r_q.len() + 1;
    let mut data = Vec::with_capacity(slate.len() * width);
    for (j, entry) in slate.entries.iter().enumerate() {
        data.extend_from_slice(&slate.e_q);
        data.extend_from_slice(&slate.e_items[j]);
        data.extend_from_slice(&slate.r_q);
        data.extend_from_slice(&slate.r_items[j]);
        data.push(entry.tte_score);
    }
    Tensor::matrix(slate.len(), width, data)
}

/// Graph version of [`assemble_inputs`] for training: `e_q` and `r_q` are
/// single rows, the item blocks have one row per candidate and `s_tte` is a
/// column.
pub fn assemble_graph(g: &mut Graph, e_q: Var, e_items: Var, r_q: Var, r_items: Var, s_tte: Var) -> Result<Var> {
    let k = g.shape(e_items)[0];
    let eq = g.repeat_rows(e_q, k)?;
    let rq = g.repeat_rows(r_q, k)?;
    g.concat_cols(&[eq, e_items, rq, r_items, s_tte])
}

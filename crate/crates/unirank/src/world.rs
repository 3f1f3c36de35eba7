//! Synthetic corpora with a known graded-relevance oracle.
//!
//! Items and queries carry unit latent vectors. Relevance of item `i` to
//! query `q` is the cosine of their latents plus a small per-pair Gaussian
//! perturbation, bucketed by per-query quantiles: the top `n₃` items get the
//! top grade, the next `n₂` the grade below, and so on, with the bucket sizes
//! fixed by [`WorldSpec::grade_fractions`]. Every query therefore has at
//! least one relevant item and exactly the designed grade histogram.
//!
//! Token sequences are sampled from a latent-conditioned topic mixture:
//! every vocabulary entry has a topic direction `u_t`, and a token is drawn
//! with probability proportional to `exp(κ · u_t·x)` for latent `x`. Token
//! bags are thus informative about the latent without revealing it.
//!
//! Regeneration from the same [`WorldSpec`] is bit-identical, so a world is
//! persisted as its spec alone.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{discount, gain};
use crate::numerics::rng::{keyed_normal, Rng};

pub const WORLD_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    #[serde(default)]
    pub seed: u64,
    pub n_items: usize,
    /// Total queries; the last `n_heldout` are held out from training.
    pub n_queries: usize,
    #[serde(default)]
    pub n_heldout: usize,
    #[serde(default = "defaults::vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "defaults::latent_dim")]
    pub latent_dim: usize,
    /// Fraction of the corpus per grade `1..grade_levels`, lowest grade first.
    /// Its length fixes the number of grade levels (plus grade 0).
    #[serde(default = "defaults::grade_fractions")]
    pub grade_fractions: Vec<f64>,
    /// Standard deviation of the per-pair perturbation of the cosine.
    #[serde(default = "defaults::noise")]
    pub noise: f64,
    /// Topic concentration κ of the token sampler.
    #[serde(default = "defaults::topic_sharpness")]
    pub topic_sharpness: f64,
    #[serde(default = "defaults::item_len")]
    pub item_len: (usize, usize),
    #[serde(default = "defaults::query_len")]
    pub query_len: (usize, usize),
}

pub mod defaults {
    pub fn vocab_size() -> usize {
        256
    }
    pub fn latent_dim() -> usize {
        8
    }
    pub fn grade_fractions() -> Vec<f64> {
        vec![0.009, 0.004, 0.002]
    }
    pub fn noise() -> f64 {
        0.05
    }
    pub fn topic_sharpness() -> f64 {
        8.0
    }
    pub fn item_len() -> (usize, usize) {
        (4, 32)
    }
    pub fn query_len() -> (usize, usize) {
        (4, 16)
    }
}

impl WorldSpec {
    pub fn new(seed: u64, n_items: usize, n_queries: usize, vocab_size: usize, latent_dim: usize) -> Self {
        Self {
            seed,
            n_items,
            n_queries,
            n_heldout: 0,
            vocab_size,
            latent_dim,
            grade_fractions: defaults::grade_fractions(),
            noise: defaults::noise(),
            topic_sharpness: defaults::topic_sharpness(),
            item_len: defaults::item_len(),
            query_len: defaults::query_len(),
        }
    }

    pub fn grade_levels(&self) -> usize {
        self.grade_fractions.len() + 1
    }

    /// Items per grade for one query, index = grade (index 0 = grade 0).
    pub fn bucket_sizes(&self) -> Vec<usize> {
        let n = self.n_items;
        let mut sizes = vec![0; self.grade_levels()];
        let mut left = n;
        for g in (1..self.grade_levels()).rev() {
            let want = ((n as f64 * self.grade_fractions[g - 1]).round() as usize).max(1);
            sizes[g] = want.min(left);
            left -= sizes[g];
        }
        sizes[0] = left;
        sizes
    }

    /// Designed fraction of pairs at each grade.
    pub fn design_histogram(&self) -> Vec<f64> {
        self.bucket_sizes().iter().map(|&c| c as f64 / self.n_items as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_items == 0 || self.n_queries == 0 || self.latent_dim == 0 {
            return bad("counts must be positive");
        }
        if self.vocab_size < 16 {
            return bad("vocab_size must be at least 16");
        }
        if self.n_heldout >= self.n_queries {
            return bad("n_heldout must leave at least one training query");
        }
        if self.grade_fractions.is_empty() || self.grade_fractions.iter().any(|&f| !(0.0..1.0).contains(&f)) {
            return bad("grade_fractions must be non-empty and in [0, 1)");
        }
        if self.grade_levels() > 16 {
            return bad("at most 16 grade levels");
        }
        let (lo, hi) = self.item_len;
        let (qlo, qhi) = self.query_len;
        if lo == 0 || lo > hi || qlo == 0 || qlo > qhi {
            return bad("token length ranges must be non-empty and positive");
        }
        if !(self.noise >= 0.0) || !(self.topic_sharpness >= 0.0) {
            return bad("noise and topic_sharpness must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: usize,
    pub tokens: Vec<usize>,
    pub latent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuerySpec {
    pub id: usize,
    pub tokens: Vec<usize>,
    pub latent: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    spec: WorldSpec,
    items: Vec<Item>,
    queries: Vec<QuerySpec>,
    topics: Vec<Vec<f64>>,
    /// Query-major grade table.
    grades: Vec<u8>,
}

/// Persisted form: the spec is enough to regenerate the world.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFile {
    pub format_version: u32,
    pub spec: WorldSpec,
}

struct TokenSampler<'a> {
    topics: &'a [Vec<f64>],
    sharpness: f64,
}

impl TokenSampler<'_> {
    fn sample(&self, latent: &[f64], len: usize, rng: &mut Rng) -> Vec<usize> {
        let logits: Vec<f64> = self.topics.iter().map(|u| self.sharpness * dot(u, latent)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut cdf = Vec::with_capacity(logits.len());
        let mut acc = 0.0;
        for l in logits {
            acc += (l - m).exp();
            cdf.push(acc);
        }
        (0..len)
            .map(|_| {
                let u = rng.unit() * acc;
                cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
            })
            .collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl World {
    /// Generate a world; identical specs give identical worlds.
    pub fn generate(spec: WorldSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::with_stream(spec.seed, 0);
        let topics: Vec<Vec<f64>> = (0..spec.vocab_size).map(|_| rng.unit_vector(spec.latent_dim)).collect();
        let item_latents: Vec<Vec<f64>> = (0..spec.n_items).map(|_| rng.unit_vector(spec.latent_dim)).collect();
        let query_latents: Vec<Vec<f64>> = (0..spec.n_queries).map(|_| rng.unit_vector(spec.latent_dim)).collect();
        Self::assemble(spec, topics, item_latents, query_latents)
    }

    /// A world over caller-supplied latents (tokens and grades are derived
    /// as usual). Latents are normalised to unit length.
    pub fn from_latents(spec: WorldSpec, item_latents: Vec<Vec<f64>>, query_latents: Vec<Vec<f64>>) -> Result<Self> {
        let mut spec = spec;
        spec.n_items = item_latents.len();
        spec.n_queries = query_latents.len();
        spec.validate()?;
        let normalize = |v: Vec<f64>| -> Result<Vec<f64>> {
            if v.len() != spec.latent_dim {
                return Err(Error::InvalidArgument(format!(
                    "latent has {} dims, expected {}",
                    v.len(),
                    spec.latent_dim
                )));
            }
            let n = dot(&v, &v).sqrt();
            if n == 0.0 {
                return Err(Error::ZeroVector);
            }
            Ok(v.into_iter().map(|x| x / n).collect())
        };
        let items = item_latents.into_iter().map(normalize).collect::<Result<Vec<_>>>()?;
        let queries = query_latents.into_iter().map(normalize).collect::<Result<Vec<_>>>()?;
        let mut rng = Rng::with_stream(spec.seed, 0);
        let topics = (0..spec.vocab_size).map(|_| rng.unit_vector(spec.latent_dim)).collect();
        Self::assemble(spec, topics, items, queries)
    }

    fn assemble(
        spec: WorldSpec,
        topics: Vec<Vec<f64>>,
        item_latents: Vec<Vec<f64>>,
        query_latents: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let sampler = TokenSampler { topics: &topics, sharpness: spec.topic_sharpness };
        let mut tok_rng = Rng::with_stream(spec.seed, 1);
        let items: Vec<Item> = item_latents
            .into_iter()
            .enumerate()
            .map(|(id, latent)| {
                let len = tok_rng.between(spec.item_len.0, spec.item_len.1);
                let tokens = sampler.sample(&latent, len, &mut tok_rng);
                Item { id, tokens, latent }
            })
            .collect();
        let queries: Vec<QuerySpec> = query_latents
            .into_iter()
            .enumerate()
            .map(|(id, latent)| {
                let len = tok_rng.between(spec.query_len.0, spec.query_len.1);
                let tokens = sampler.sample(&latent, len, &mut tok_rng);
                QuerySpec { id, tokens, latent }
            })
            .collect();

        let sizes = spec.bucket_sizes();
        let n = items.len();
        let mut grades = vec![0u8; queries.len() * n];
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
        for q in &queries {
            order.clear();
            order.extend(items.iter().map(|it| (Self::noisy_affinity(&spec, q, it), it.id)));
            order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let row = &mut grades[q.id * n..(q.id + 1) * n];
            let mut pos = 0;
            for g in (1..sizes.len()).rev() {
                for &(_, id) in &order[pos..pos + sizes[g]] {
                    row[id] = g as u8;
                }
                pos += sizes[g];
            }
        }
        Ok(Self { spec, items, queries, topics, grades })
    }

    fn noisy_affinity(spec: &WorldSpec, q: &QuerySpec, it: &Item) -> f64 {
        dot(&q.latent, &it.latent) + spec.noise * keyed_normal(spec.seed, q.id as u64, it.id as u64)
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn queries(&self) -> &[QuerySpec] {
        &self.queries
    }

    pub fn topics(&self) -> &[Vec<f64>] {
        &self.topics
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn query(&self, id: usize) -> Result<&QuerySpec> {
        self.queries.get(id).ok_or(Error::UnknownId { kind: "query", id })
    }

    pub fn item(&self, id: usize) -> Result<&Item> {
        self.items.get(id).ok_or(Error::UnknownId { kind: "item", id })
    }

    pub fn train_queries(&self) -> std::ops::Range<usize> {
        0..self.spec.n_queries - self.spec.n_heldout
    }

    pub fn heldout_queries(&self) -> std::ops::Range<usize> {
        self.spec.n_queries - self.spec.n_heldout..self.spec.n_queries
    }

    /// Graded relevance of `item` to `query`.
    pub fn relevance(&self, query: usize, item: usize) -> Result<u8> {
        self.query(query)?;
        self.item(item)?;
        Ok(self.grades[query * self.items.len() + item])
    }

    /// All grades for one query, indexed by item id.
    pub fn grades_for(&self, query: usize) -> Result<&[u8]> {
        self.query(query)?;
        let n = self.items.len();
        Ok(&self.grades[query * n..(query + 1) * n])
    }

    pub fn relevant_items(&self, query: usize) -> Result<Vec<usize>> {
        Ok(self.grades_for(query)?.iter().enumerate().filter(|(_, &g)| g > 0).map(|(i, _)| i).collect())
    }

    /// Items by grade descending, ties by ascending id.
    pub fn ideal_ranking(&self, query: usize) -> Result<Vec<usize>> {
        let grades = self.grades_for(query)?;
        let mut ids: Vec<usize> = (0..grades.len()).collect();
        ids.sort_by(|&a, &b| grades[b].cmp(&grades[a]).then(a.cmp(&b)));
        Ok(ids)
    }

    /// Grade counts over every (query, item) pair.
    pub fn grade_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.spec.grade_levels()];
        for &g in &self.grades {
            h[g as usize] += 1;
        }
        h
    }

    pub fn to_file(&self) -> WorldFile {
        WorldFile { format_version: WORLD_FORMAT_VERSION, spec: self.spec.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("world spec serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: WorldFile = serde_json::from_str(s)?;
        if f.format_version != WORLD_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!("unsupported world format {}", f.format_version)));
        }
        Self::generate(f.spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Eq. (1)-style gap for one query, with the missed-gain upper bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerformanceGap {
    /// NDCG@cutoff of the corpus-ideal ranking minus that of the best
    /// ranking of the retrieved set.
    pub gap: f64,
    /// Normalised sum of gain × discount at the ideal position over the
    /// relevant items that were not retrieved.
    pub bound: f64,
}

/// Best-achievable NDCG loss caused by restricting ranking to `retrieved`.
pub fn performance_gap(world: &World, query: usize, retrieved: &[usize], cutoff: usize) -> Result<PerformanceGap> {
    if cutoff == 0 {
        return Err(Error::InvalidArgument("cutoff must be at least 1".into()));
    }
    let grades = world.grades_for(query)?;
    let ideal = world.ideal_ranking(query)?;
    let idcg: f64 = ideal.iter().take(cutoff).enumerate().map(|(p, &i)| gain(grades[i]) * discount(p + 1)).sum();
    if idcg == 0.0 {
        return Ok(PerformanceGap { gap: 0.0, bound: 0.0 });
    }
    let mut in_set = vec![false; grades.len()];
    for &i in retrieved {
        *in_set.get_mut(i).ok_or(Error::UnknownId { kind: "item", id: i })? = true;
    }
    let mut best: Vec<usize> = ideal.iter().copied().filter(|&i| in_set[i]).collect();
    best.truncate(cutoff);
    let dcg: f64 = best.iter().enumerate().map(|(p, &i)| gain(grades[i]) * discount(p + 1)).sum();
    let missed: f64 = ideal
        .iter()
        .take(cutoff)
        .enumerate()
        .filter(|(_, &i)| !in_set[i] && grades[i] > 0)
        .map(|(p, &i)| gain(grades[i]) * discount(p + 1))
        .sum();
    Ok(PerformanceGap { gap: (idcg - dcg) / idcg, bound: missed / idcg })
}

pub(crate) fn cmp_score_desc(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> World {
        World::generate(WorldSpec::new(seed, 100, 12, 64, 8)).unwrap()
    }

    #[test]
    fn same_seed_same_world() {
        assert_eq!(small(3), small(3));
        assert_ne!(small(3), small(4));
    }

    #[test]
    fn ids_are_dense() {
        let w = small(1);
        assert_eq!(w.items().len(), 100);
        assert!(w.items().iter().enumerate().all(|(i, it)| it.id == i));
        assert!(w.items().iter().all(|it| it.tokens.iter().all(|&t| t < 64)));
        assert!(w.items().iter().all(|it| (4..=32).contains(&it.tokens.len())));
    }

    #[test]
    fn every_query_has_relevant_items() {
        let w = small(2);
        for q in 0..w.queries().len() {
            assert!(!w.relevant_items(q).unwrap().is_empty());
        }
    }

    #[test]
    fn unknown_ids_rejected() {
        let w = small(2);
        assert!(w.relevance(12, 0).is_err());
        assert!(w.relevance(0, 100).is_err());
    }

    #[test]
    fn planted_pairs() {
        let spec = WorldSpec::new(5, 0, 0, 32, 6);
        let mut rng = Rng::seed_from_u64(99);
        let query = rng.unit_vector(6);
        let mut items: Vec<Vec<f64>> = (0..300).map(|_| rng.unit_vector(6)).collect();
        items[17] = query.clone();
        // orthogonal to the query: remove the projection
        let mut orth = rng.unit_vector(6);
        let p = dot(&orth, &query);
        for (o, q) in orth.iter_mut().zip(&query) {
            *o -= p * q;
        }
        items[42] = orth;
        let w = World::from_latents(spec, items, vec![query]).unwrap();
        assert_eq!(w.relevance(0, 17).unwrap() as usize, w.spec().grade_levels() - 1);
        assert_eq!(w.relevance(0, 42).unwrap(), 0);
    }

    #[test]
    fn ideal_ranking_ties_by_id() {
        let w = small(8);
        let r = w.ideal_ranking(0).unwrap();
        let g = w.grades_for(0).unwrap();
        for pair in r.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            assert!(g[a] > g[b] || (g[a] == g[b] && a < b));
        }
    }

    #[test]
    fn json_round_trip_regenerates() {
        let w = small(9);
        assert_eq!(World::from_json(&w.to_json()).unwrap(), w);
    }

    #[test]
    fn gap_edge_cases() {
        let w = small(10);
        let rel = w.relevant_items(0).unwrap();
        let full = performance_gap(&w, 0, &rel, 10).unwrap();
        assert_eq!(full.gap, 0.0);
        let none = performance_gap(&w, 0, &[], 10).unwrap();
        assert!((none.gap - 1.0).abs() < 1e-12);
    }
}

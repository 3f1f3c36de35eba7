//! Serving path shared by both systems: exact top-k retrieval with the
//! encoder, then re-ranking of the retrieved slate by the transformer.

use crate::error::Result;
use crate::listwise::LtModel;
use crate::metrics::{cost_profile, CostProfile, CostShape, Ranked, RankingSystem};
use crate::numerics::Graph;
use crate::trainer::frozen_inputs;
use crate::tte::{ItemIndex, TteModel};
use crate::world::{cmp_score_desc, World};

pub struct TwoStage {
    tag: String,
    pub tte: TteModel,
    pub lt: LtModel,
    pub index: ItemIndex,
    pub k: usize,
}

/// One query's slate with both score columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSlate {
    pub items: Vec<usize>,
    pub tte_scores: Vec<f64>,
    pub lt_scores: Vec<f64>,
}

impl TwoStage {
    pub fn new(tag: &str, tte: TteModel, lt: LtModel, world: &World, k: usize) -> Result<Self> {
        let index = tte.index_items(world)?;
        Ok(Self { tag: tag.to_string(), tte, lt, index, k })
    }

    /// Pure top-k slate scored by both models, in retrieval order.
    pub fn score_slate(&self, world: &World, query: usize) -> Result<ScoredSlate> {
        let (x, items, tte_scores) = frozen_inputs(&self.tte, &self.index, world, query, self.k)?;
        let mut g = Graph::inference();
        let b = self.lt.params().bind(&mut g, false);
        let xv = g.constant(x);
        let out = self.lt.forward_graph(&mut g, &b, xv)?;
        Ok(ScoredSlate { items, tte_scores, lt_scores: g.value(out.scores).data().to_vec() })
    }

    pub fn cost_shape(&self) -> CostShape {
        let c = self.lt.config();
        CostShape {
            n_items: self.index.len(),
            d: c.d,
            k: self.k,
            d_in: c.d_in(),
            d_model: c.d_model,
            layers: c.layers,
            ffn: c.ffn,
        }
    }
}

/// Reorder `items` by score descending, ties by ascending id.
pub fn order_by(items: &[usize], scores: &[f64]) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(items.iter().copied()).collect();
    pairs.sort_by(cmp_score_desc);
    pairs.into_iter().map(|p| p.1).collect()
}

impl RankingSystem for TwoStage {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn rank(&self, world: &World, query: usize) -> Result<Ranked> {
        let s = self.score_slate(world, query)?;
        Ok(Ranked { ranking: order_by(&s.items, &s.lt_scores), retrieved: s.items })
    }

    fn cost(&self) -> CostProfile {
        cost_profile(&self.cost_shape())
    }
}

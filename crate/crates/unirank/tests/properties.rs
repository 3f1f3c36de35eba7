//! Invariants checked on generated inputs.

mod common;

use proptest::prelude::*;

use unirank::kdb::{forward_distill_loss, kl_from_scores, to_distribution};
use unirank::listwise::{CandidateSlate, LtConfig, LtModel};
use unirank::losses::{retrieve_loss, soft_ranks, total_loss, LossComponents, LossWeights};
use unirank::metrics::{ndcg_at, recall};
use unirank::numerics::graph::softmax_in_place;
use unirank::numerics::{Graph, Rng, Tensor};
use unirank::tte::{select_top_k, Tower, TteConfig, TteModel};
use unirank::world::performance_gap;

fn lt(seed: u64) -> LtModel {
    let cfg = LtConfig { d: 4, d_r: 2, d_model: 8, n_heads: 2, layers: 2, ffn: 8, positional_encoding: false };
    LtModel::new(cfg, &mut Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    // a spread beyond ~36 rounds the largest entry to exactly 1.0
    fn softmax_is_a_distribution(xs in prop::collection::vec(-15.0f64..15.0, 1..40)) {
        let mut v = xs.clone();
        softmax_in_place(&mut v);
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(v.iter().all(|p| *p > 0.0 && *p < 1.0 || xs.len() == 1));
    }

    #[test]
    fn graph_is_deterministic(seed in any::<u64>(), r in 1usize..6, c in 1usize..6) {
        let run = || {
            let mut rng = Rng::seed_from_u64(seed);
            let x = Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap();
            let mut g = Graph::new();
            let xv = g.leaf(x);
            let y = g.softmax_rows(xv);
            let y = g.tanh(y);
            let s = g.sum(y);
            let grads = g.backward(s).unwrap();
            (g.value(s).item().to_bits(), grads.wrt(xv).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn top_k_equals_brute_force(scores in prop::collection::vec(-3i32..3, 1..80), k_frac in 0.0f64..1.0) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let k = 1 + ((scores.len() - 1) as f64 * k_frac) as usize;
        let got: Vec<usize> = select_top_k(&scores, k).unwrap().into_iter().map(|p| p.0).collect();
        prop_assert_eq!(got, common::top_k_by_sort(&scores, k));
    }

    #[test]
    fn pooling_weights_are_a_distribution(seed in any::<u64>(), toks in prop::collection::vec(0usize..20, 1..12)) {
        let tte = TteModel::new(TteConfig { vocab_size: 20, d_tok: 5, hidden: 4, d: 3, d_r: 2 }, &mut Rng::seed_from_u64(seed));
        for tower in [Tower::Query, Tower::Item] {
            let a = tte.pooling_weights(tower, &toks).unwrap();
            prop_assert_eq!(a.len(), toks.len());
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.iter().all(|x| *x > 0.0));
        }
    }

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), k in 1usize..16) {
        let model = lt(seed);
        let slate = CandidateSlate::random(k, 4, 2, &mut Rng::with_stream(seed, 1));
        let (_, att) = model.forward_with_attention(&slate).unwrap();
        prop_assert_eq!(att.len(), 2 * 2);
        for a in &att {
            for r in 0..k {
                let row = a.row_slice(r);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|x| *x > 0.0 && (*x < 1.0 || k == 1)));
            }
        }
    }

    #[test]
    fn listwise_scores_ignore_item_ids(seed in any::<u64>(), k in 1usize..12, shift in 1usize..1000) {
        let model = lt(seed);
        let slate = CandidateSlate::random(k, 4, 2, &mut Rng::with_stream(seed, 2));
        let mut relabelled = slate.clone();
        relabelled.query += shift;
        for e in &mut relabelled.entries {
            e.item = e.item * 7 + shift;
        }
        prop_assert_eq!(model.forward(&slate).unwrap(), model.forward(&relabelled).unwrap());
    }

    #[test]
    fn listwise_is_permutation_equivariant(seed in any::<u64>(), k in 2usize..16) {
        let model = lt(seed);
        let mut rng = Rng::with_stream(seed, 3);
        let slate = CandidateSlate::random(k, 4, 2, &mut rng);
        let mut perm: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut perm);
        let s = model.forward(&slate).unwrap();
        let sp = model.forward(&slate.permuted(&perm)).unwrap();
        for (j, &p) in perm.iter().enumerate() {
            prop_assert!((sp[j] - s[p]).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_equal(a in prop::collection::vec(-5.0f64..5.0, 2..20), seed in any::<u64>(), tau in 0.2f64..4.0) {
        let mut rng = Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| 2.0 * rng.normal()).collect();
        prop_assert!(kl_from_scores(&a, &b, tau).unwrap() >= 0.0);
        prop_assert!(kl_from_scores(&a, &a, tau).unwrap().abs() < 1e-9);
        // a constant shift leaves the distribution unchanged
        let shifted: Vec<f64> = a.iter().map(|x| x + 3.0).collect();
        let (p, q) = (to_distribution(&a, tau).unwrap(), to_distribution(&shifted, tau).unwrap());
        prop_assert!(forward_distill_loss(&p, &q).unwrap().abs() < 1e-9);
    }

    #[test]
    fn retrieval_loss_decreases_in_positive_score(s in -5.0f64..5.0, ds in 1e-3f64..3.0, negs in prop::collection::vec(-5.0f64..5.0, 0..10), tau in 0.1f64..3.0) {
        prop_assert!(retrieve_loss(s + ds, &negs, tau) < retrieve_loss(s, &negs, tau) || negs.is_empty());
    }

    #[test]
    fn soft_ranks_sum_to_triangular_number(scores in prop::collection::hash_set(-1000i32..1000, 1..30), t in 0.05f64..5.0) {
        let s: Vec<f64> = scores.into_iter().map(|x| f64::from(x) / 100.0).collect();
        let k = s.len() as f64;
        prop_assert!((soft_ranks(&s, t).iter().sum::<f64>() - k * (k + 1.0) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn total_loss_is_linear(a in prop::array::uniform5(-3.0f64..3.0), b in prop::array::uniform5(-3.0f64..3.0), c in -4.0f64..4.0, l in prop::array::uniform5(0.0f64..2.0)) {
        let w = LossWeights { lambda: l, ..LossWeights::default() };
        let f = |x: [f64; 5]| total_loss(&LossComponents::from_array(x), &w);
        let sum: [f64; 5] = std::array::from_fn(|i| a[i] + b[i]);
        let scaled: [f64; 5] = std::array::from_fn(|i| c * a[i]);
        prop_assert!((f(sum) - f(a) - f(b)).abs() < 1e-12);
        prop_assert!((f(scaled) - c * f(a)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gap_shrinks_as_retrieval_grows_and_stays_under_bound(seed in 0u64..1000, cutoff in 1usize..40) {
        let world = common::small_world(seed, 80, 8);
        let mut rng = Rng::with_stream(seed, 4);
        for q in 0..8 {
            let mut order: Vec<usize> = (0..80).collect();
            rng.shuffle(&mut order);
            let mut prev = f64::INFINITY;
            for n in (0..=80).step_by(8) {
                let g = performance_gap(&world, q, &order[..n], cutoff).unwrap();
                prop_assert!(g.gap <= prev + 1e-12);
                prop_assert!(g.bound >= g.gap - 1e-12);
                prop_assert!((0.0..=1.0).contains(&g.gap));
                prev = g.gap;
            }
        }
    }

    #[test]
    fn ranking_metrics_lie_in_unit_interval(seed in 0u64..1000, n in 0usize..80, cutoff in 1usize..60) {
        let world = common::small_world(seed, 80, 8);
        let mut order: Vec<usize> = (0..80).collect();
        Rng::seed_from_u64(seed).shuffle(&mut order);
        for q in 0..8 {
            let nd = ndcg_at(&order[..n], &world, q, cutoff).unwrap();
            let rc = recall(&world, q, &order[..n]).unwrap();
            prop_assert!((0.0..=1.0).contains(&nd) && (0.0..=1.0).contains(&rc));
        }
    }
}

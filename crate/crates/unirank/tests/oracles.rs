//! Library results against independent plain-loop recomputations.

mod common;

use unirank::cascade::{cascade_rank, CascadeModel};
use unirank::listwise::{CandidateSlate, SlateEntry};
use unirank::metrics::{error_propagation, gain};
use unirank::numerics::{Rng, Tensor};
use unirank::trainer::{init_models, ConvergenceLog, TrainingConfig};
use unirank::tte::{similarity, Tower, TteModel};
use unirank::world::performance_gap;

const INSTANCES: usize = 100;
const TOL: f64 = 1e-9;

#[test]
fn matmul_against_triple_loop() {
    let mut rng = Rng::with_stream(1, 1);
    for _ in 0..INSTANCES {
        let (m, k, n) = (rng.between(1, 40), rng.between(1, 40), rng.between(1, 40));
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let want = common::matmul_loop(&a, &b, m, k, n);
        let ta = Tensor::matrix(m, k, a).unwrap();
        let tb = Tensor::matrix(k, n, b).unwrap();
        let got = ta.matmul(&tb).unwrap();
        let got_nt = ta.matmul_nt(&tb.transpose()).unwrap();
        for ((x, y), w) in got.data().iter().zip(got_nt.data()).zip(&want) {
            assert!((x - w).abs() < TOL && (y - w).abs() < TOL);
        }
    }
}

#[test]
fn top_k_against_full_sort() {
    assert_eq!(common::top_k_mismatches(INSTANCES, 2), 0);
}

#[test]
fn ndcg_against_brute_force_dcg() {
    let e = common::ndcg_max_error(INSTANCES, 3);
    assert!(e < TOL, "{e:e}");
}

#[test]
fn hard_negative_pools_against_sort() {
    assert_eq!(common::pool_mismatches(INSTANCES, 4), 0);
}

#[test]
fn distillation_losses_against_loops() {
    let (kl, mse, align) = common::kdb_max_errors(INSTANCES, 5).unwrap();
    assert!(kl < TOL && mse < TOL && align < TOL, "{kl:e} {mse:e} {align:e}");
}

#[test]
fn error_propagation_against_set_difference() {
    let world = common::small_world(6, 150, 12);
    let mut rng = Rng::with_stream(6, 6);
    for _ in 0..INSTANCES {
        let q = rng.below(12);
        let mut ids: Vec<usize> = (0..150).collect();
        rng.shuffle(&mut ids);
        ids.truncate(rng.between(0, 150));
        assert_eq!(error_propagation(&world, q, &ids).unwrap(), common::missed_by_set(&world, q, &ids));
    }
}

#[test]
fn performance_gap_against_best_subset_ranking() {
    let world = common::small_world(7, 120, 12);
    let mut rng = Rng::with_stream(7, 7);
    for _ in 0..INSTANCES {
        let q = rng.below(12);
        let mut ids: Vec<usize> = (0..120).collect();
        rng.shuffle(&mut ids);
        ids.truncate(rng.between(1, 120));
        let cutoff = rng.between(1, 30);
        // best ranking of the subset: sort it by grade
        let mut best = ids.clone();
        best.sort_by_key(|&i| std::cmp::Reverse(world.relevance(q, i).unwrap()));
        let want = 1.0 - common::ndcg_loop(&world, q, &best, cutoff);
        let got = performance_gap(&world, q, &ids, cutoff).unwrap();
        let relevant = world.relevant_items(q).unwrap();
        if relevant.is_empty() {
            assert_eq!(got.gap, 0.0);
        } else {
            assert!((got.gap - want).abs() < TOL, "{} vs {want}", got.gap);
        }
    }
}

fn tanh_mlp(x: &[f64], w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Vec<f64> {
    let h: Vec<f64> = (0..w1.cols()).map(|c| (b1.data()[c] + (0..x.len()).map(|r| x[r] * w1.get(r, c)).sum::<f64>()).tanh()).collect();
    (0..w2.cols()).map(|c| b2.data()[c] + (0..h.len()).map(|r| h[r] * w2.get(r, c)).sum::<f64>()).collect()
}

/// The whole tower by hand: softmax attention pooling, then two tanh MLPs.
fn encode_by_hand(tte: &TteModel, prefix: &str, tokens: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = tte.params();
    let t = |n: &str| p.get(p.find(n).unwrap_or_else(|| panic!("missing {n}")));
    let table = t("embedding");
    let w = t(&format!("{prefix}.pool"));
    let logits: Vec<f64> = tokens.iter().map(|&tok| table.row_slice(tok).iter().zip(w.data()).map(|(a, b)| a * b).sum()).collect();
    let alpha = common::softmax_loop(&logits);
    let mut pooled = vec![0.0; table.cols()];
    for (&tok, a) in tokens.iter().zip(&alpha) {
        for (c, v) in table.row_slice(tok).iter().enumerate() {
            pooled[c] += a * v;
        }
    }
    let param = |n: &str| t(&format!("{prefix}.{n}"));
    let e = tanh_mlp(&pooled, param("w1"), param("b1"), param("w2"), param("b2"));
    let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    let e = e.iter().map(|v| v / norm).collect();
    let r = tanh_mlp(&pooled, param("rw1"), param("rb1"), param("rw2"), param("rb2"));
    (e, r, alpha)
}

fn trained_shapes(seed: u64) -> (unirank::world::World, TteModel, unirank::listwise::LtModel) {
    let world = common::small_world(seed, 90, 12);
    let cfg = TrainingConfig { seed, k: 12, dims: common::tiny_dims(), ..TrainingConfig::default() };
    let (mut tte, lt) = init_models(&cfg, &world).unwrap();
    // non-zero biases so the hand loop exercises them
    let mut rng = Rng::with_stream(seed, 8);
    for t in tte.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    (world, tte, lt)
}

#[test]
fn encoder_against_hand_loop() {
    for seed in 0..10 {
        let (world, tte, _) = trained_shapes(seed);
        for (tower, prefix, seqs) in [
            (Tower::Item, "item", world.items().iter().map(|i| i.tokens.clone()).collect::<Vec<_>>()),
            (Tower::Query, "query", world.queries().iter().map(|q| q.tokens.clone()).collect()),
        ] {
            for toks in seqs.iter().take(10) {
                let (e, r, alpha) = encode_by_hand(&tte, prefix, toks);
                let (ge, gr) = match tower {
                    Tower::Item => tte.encode_item(toks).unwrap(),
                    Tower::Query => tte.encode_query(toks).unwrap(),
                };
                let ga = tte.pooling_weights(tower, toks).unwrap();
                for (a, b) in ge.iter().chain(&gr).chain(&ga).zip(e.iter().chain(&r).chain(&alpha)) {
                    assert!((a - b).abs() < TOL, "{a} vs {b}");
                }
                assert!((ga.iter().sum::<f64>() - 1.0).abs() < TOL && ga.iter().all(|a| *a > 0.0));
            }
        }
    }
}

#[test]
fn item_cache_is_bit_identical_to_single_encoding() {
    for seed in 0..5 {
        let (world, tte, _) = trained_shapes(seed);
        let index = tte.index_items(&world).unwrap();
        for (i, it) in world.items().iter().enumerate() {
            let (e, r) = tte.encode_item(&it.tokens).unwrap();
            assert_eq!(index.emb.row_slice(i), e.as_slice(), "item {i}");
            assert_eq!(index.res.row_slice(i), r.as_slice(), "item {i}");
        }
    }
}

#[test]
fn similarity_is_scale_invariant_in_the_query() {
    let mut rng = Rng::with_stream(9, 9);
    for _ in 0..INSTANCES {
        let d = rng.between(1, 16);
        let q: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let i: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let c = rng.uniform(1e-3, 1e3);
        let scaled: Vec<f64> = q.iter().map(|v| c * v).collect();
        assert!((similarity(&scaled, &i).unwrap() - similarity(&q, &i).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn cascade_rank_against_composed_stages() {
    for seed in 0..5 {
        let (world, tte, lt) = trained_shapes(seed);
        let model = CascadeModel { l1: tte.clone(), l2: lt.clone(), log: ConvergenceLog::default() };
        for k in [1, 5, 12, world.n_items()] {
            for q in 0..4 {
                let tokens = &world.query(q).unwrap().tokens;
                let (e_q, r_q) = tte.encode_query(tokens).unwrap();
                let enc: Vec<(Vec<f64>, Vec<f64>)> = world.items().iter().map(|it| tte.encode_item(&it.tokens).unwrap()).collect();
                let scores: Vec<f64> = enc.iter().map(|(e, _)| e.iter().zip(&e_q).map(|(a, b)| a * b).sum()).collect();
                let top = common::top_k_by_sort(&scores, k);
                let slate = CandidateSlate {
                    query: q,
                    entries: top.iter().map(|&i| SlateEntry { item: i, tte_score: scores[i], lt_score: None, grade: None }).collect(),
                    e_q: e_q.clone(),
                    r_q: r_q.clone(),
                    e_items: top.iter().map(|&i| enc[i].0.clone()).collect(),
                    r_items: top.iter().map(|&i| enc[i].1.clone()).collect(),
                };
                let lt_scores = lt.forward(&slate).unwrap();
                let mut order: Vec<usize> = (0..top.len()).collect();
                order.sort_by(|&a, &b| lt_scores[b].partial_cmp(&lt_scores[a]).unwrap().then(top[a].cmp(&top[b])));
                let want: Vec<usize> = order.into_iter().map(|j| top[j]).collect();
                let got = cascade_rank(&model, &world, q, k).unwrap();
                assert_eq!(got, want, "seed {seed} k {k} query {q}");
                let mut sorted_top = top.clone();
                sorted_top.sort_unstable();
                let mut sorted_got = got.clone();
                sorted_got.sort_unstable();
                assert_eq!(sorted_got, sorted_top);
            }
        }
    }
}

#[test]
fn gain_matches_definition() {
    for g in 0..6u8 {
        assert_eq!(gain(g), 2f64.powi(g as i32) - 1.0);
    }
}

#[test]
fn tie_aware_comparison_still_catches_swaps() {
    let scores = [0.9, 0.5, 0.5, 0.1];
    assert!(common::same_up_to_ties(&[0, 2, 1], &[0, 1, 2], &scores, 1e-12));
    assert!(!common::same_up_to_ties(&[1, 0, 2], &[0, 1, 2], &scores, 1e-12));
    assert!(!common::same_up_to_ties(&[0, 1, 3], &[0, 1, 2], &scores, 1e-12));
    assert!(!common::same_up_to_ties(&[0, 1, 1], &[0, 1, 2], &scores, 1e-12));
}

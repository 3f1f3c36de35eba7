//! Independent oracles shared by the integration tests and the acceptance
//! harness. Everything here recomputes library results with plain loops.
#![allow(dead_code)]

use std::collections::HashSet;

use unirank::kdb;
use unirank::metrics;
use unirank::numerics::{grad_check, Bound, Rng, Tensor};
use unirank::trainer::{build_batch, init_models, joint_losses, mine_hard_negatives, weighted_sum, ModelDims, TrainingConfig};
use unirank::tte::{select_top_k, ItemIndex, TteModel};
use unirank::world::{World, WorldSpec};
use unirank::Result;

pub fn small_world(seed: u64, n_items: usize, n_queries: usize) -> World {
    let mut spec = WorldSpec::new(seed, n_items, n_queries, 32, 4);
    spec.n_heldout = n_queries / 4;
    spec.item_len = (2, 6);
    spec.query_len = (1, 4);
    World::generate(spec).expect("small world")
}

pub fn tiny_dims() -> ModelDims {
    ModelDims { d_tok: 3, hidden: 4, d: 3, d_r: 2, d_model: 4, n_heads: 2, layers: 1, ffn: 4 }
}

// ---------- plain-loop reference implementations ----------

pub fn matmul_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                c[i * n + j] += a[i * k + l] * b[l * n + j];
            }
        }
    }
    c
}

/// Full sort by score descending, ties by ascending id.
pub fn top_k_by_sort(scores: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

pub fn dcg_loop(ranking: &[usize], grade_of: impl Fn(usize) -> u8, cutoff: usize) -> f64 {
    let mut s = 0.0;
    for (p, &i) in ranking.iter().enumerate().take(cutoff) {
        let gain = 2f64.powi(grade_of(i) as i32) - 1.0;
        s += gain * std::f64::consts::LN_2 / ((p + 2) as f64).ln();
    }
    s
}

/// NDCG with the ideal ranking taken over every item of the corpus.
pub fn ndcg_loop(world: &World, query: usize, ranking: &[usize], cutoff: usize) -> f64 {
    let grade = |i: usize| world.relevance(query, i).unwrap();
    let mut all: Vec<u8> = (0..world.n_items()).map(grade).collect();
    all.sort_unstable_by(|a, b| b.cmp(a));
    let mut ideal = 0.0;
    for (p, g) in all.iter().enumerate().take(cutoff) {
        ideal += (2f64.powi(*g as i32) - 1.0) * std::f64::consts::LN_2 / ((p + 2) as f64).ln();
    }
    if ideal == 0.0 {
        return 1.0;
    }
    dcg_loop(ranking, grade, cutoff) / ideal
}

pub fn softmax_loop(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn kl_loop(s_lt: &[f64], s_tte: &[f64], tau: f64) -> f64 {
    let p = softmax_loop(&s_lt.iter().map(|s| s / tau).collect::<Vec<_>>());
    let q = softmax_loop(&s_tte.iter().map(|s| s / tau).collect::<Vec<_>>());
    let mut kl = 0.0;
    for j in 0..p.len() {
        if p[j] > 0.0 {
            kl += p[j] * (p[j] / q[j]).ln();
        }
    }
    kl
}

pub fn mse_loop(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 0..a.len() {
        s += (a[j] - b[j]) * (a[j] - b[j]);
    }
    s / a.len() as f64
}

/// `(1/k) Σ_j ‖e_j − W z_j‖²` with `W: d x d_model`.
pub fn alignment_loop(e: &Tensor, z: &Tensor, w: &Tensor) -> f64 {
    let (k, d, dm) = (e.rows(), e.cols(), z.cols());
    let mut s = 0.0;
    for j in 0..k {
        for c in 0..d {
            let mut proj = 0.0;
            for m in 0..dm {
                proj += w.get(c, m) * z.get(j, m);
            }
            let diff = e.get(j, c) - proj;
            s += diff * diff;
        }
    }
    s / k as f64
}

/// Score every item for `query` one at a time.
pub fn scores_by_loop(world: &World, tte: &TteModel, query: usize) -> Vec<f64> {
    let (e_q, _) = tte.encode_query(&world.query(query).unwrap().tokens).unwrap();
    world
        .items()
        .iter()
        .map(|it| {
            let (e_i, _) = tte.encode_item(&it.tokens).unwrap();
            e_q.iter().zip(&e_i).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// The `pool_size` best-scoring grade-0 items, by full sort of the loop scores.
pub fn pool_by_sort(world: &World, tte: &TteModel, query: usize, pool_size: usize) -> Vec<usize> {
    let scores = scores_by_loop(world, tte, query);
    top_k_by_sort(&scores, world.n_items()).into_iter().filter(|&i| world.relevance(query, i).unwrap() == 0).take(pool_size).collect()
}

/// Whether `got` is a descending order of the same length as `want` up to
/// ties. Items with equal real-valued scores (token bags like [6, 6] and
/// [6, 6, 6] pool to the same embedding) may round a few ulps apart, so their
/// relative order is not defined.
pub fn same_up_to_ties(got: &[usize], want: &[usize], scores: &[f64], tol: f64) -> bool {
    let distinct: HashSet<usize> = got.iter().copied().collect();
    got.len() == want.len() && distinct.len() == got.len() && got.iter().zip(want).all(|(&g, &w)| (scores[g] - scores[w]).abs() <= tol)
}

pub fn missed_by_set(world: &World, query: usize, retrieved: &[usize]) -> usize {
    let got: HashSet<usize> = retrieved.iter().copied().collect();
    (0..world.n_items()).filter(|&i| world.relevance(query, i).unwrap() > 0 && !got.contains(&i)).count()
}

fn random_vec(n: usize, rng: &mut Rng, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

fn random_tensor(r: usize, c: usize, rng: &mut Rng) -> Tensor {
    Tensor::matrix(r, c, random_vec(r * c, rng, 1.0)).unwrap()
}

// ---------- oracle suites: each returns the worst disagreement ----------

/// Count of instances where library top-k ids differ from a full sort.
/// Scores are drawn from a small set of values so ties are common.
pub fn top_k_mismatches(instances: usize, seed: u64) -> usize {
    let mut rng = Rng::with_stream(seed, 900);
    let mut bad = 0;
    for _ in 0..instances {
        let n = rng.between(1, 300);
        let k = rng.between(1, n);
        let scores: Vec<f64> = (0..n).map(|_| (rng.below(20) as f64) / 7.0 - 1.0).collect();
        let want = top_k_by_sort(&scores, k);
        let got: Vec<usize> = select_top_k(&scores, k).unwrap().into_iter().map(|p| p.0).collect();
        if got != want {
            bad += 1;
        }
        // through an index whose first column holds the score
        let d = 2;
        let mut rows = Vec::with_capacity(n * d);
        for s in &scores {
            rows.extend([*s, 0.0]);
        }
        let index = ItemIndex { emb: Tensor::matrix(n, d, rows).unwrap(), res: Tensor::zeros(&[n, 1]) };
        let via_index: Vec<usize> = index.top_k(&[1.0, 0.0], k).unwrap().into_iter().map(|p| p.0).collect();
        let q = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let via_batch: Vec<usize> = index.top_k_batch(&q, k).unwrap()[0].iter().map(|p| p.0).collect();
        if via_index != want || via_batch != want {
            bad += 1;
        }
    }
    bad
}

/// Largest |library NDCG − loop NDCG| over random rankings and cutoffs.
pub fn ndcg_max_error(instances: usize, seed: u64) -> f64 {
    let world = small_world(seed, 200, 20);
    let mut rng = Rng::with_stream(seed, 901);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let q = rng.below(world.queries().len());
        let mut ranking: Vec<usize> = (0..world.n_items()).collect();
        rng.shuffle(&mut ranking);
        // bias some relevant items to the front so the value is not ~0
        let rel = world.relevant_items(q).unwrap();
        for (slot, &i) in rel.iter().enumerate().filter(|_| rng.unit() < 0.5) {
            let at = ranking.iter().position(|&x| x == i).unwrap();
            ranking.swap(slot, at);
        }
        ranking.truncate(rng.between(1, world.n_items()));
        let cutoff = rng.between(1, 60);
        let got = metrics::ndcg_at(&ranking, &world, q, cutoff).unwrap();
        worst = worst.max((got - ndcg_loop(&world, q, &ranking, cutoff)).abs());
    }
    worst
}

/// Number of (query, pool) pairs that differ from per-item scoring plus sort.
pub fn pool_mismatches(instances: usize, seed: u64) -> usize {
    let mut bad = 0;
    let mut done = 0;
    let mut round = 0;
    while done < instances {
        let world = small_world(seed + round, 120, 24);
        let mut cfg = TrainingConfig { seed: seed + round, dims: tiny_dims(), ..TrainingConfig::default() };
        cfg.dims.d = 4;
        let (tte, _) = init_models(&cfg, &world).unwrap();
        let index = tte.index_items(&world).unwrap();
        let pool_size = 1 + (round as usize * 7) % 30;
        let pools = mine_hard_negatives(&world, &tte, &index, pool_size).unwrap();
        for q in world.train_queries() {
            if done == instances {
                break;
            }
            let scores = scores_by_loop(&world, &tte, q);
            let want = pool_by_sort(&world, &tte, q, pool_size);
            let all_negative = pools[q].iter().all(|&i| world.relevance(q, i).unwrap() == 0);
            if !all_negative || !same_up_to_ties(&pools[q], &want, &scores, 1e-12) {
                bad += 1;
            }
            done += 1;
        }
        round += 1;
    }
    bad
}

/// Worst disagreement of the three distillation/alignment losses with loops.
pub fn kdb_max_errors(instances: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let mut rng = Rng::with_stream(seed, 902);
    let (mut kl, mut mse, mut al) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..instances {
        let k = rng.between(1, 40);
        let tau = rng.uniform(0.2, 3.0);
        let a = random_vec(k, &mut rng, 2.0);
        let b = random_vec(k, &mut rng, 2.0);
        let want = kl_loop(&a, &b, tau);
        kl = kl.max((kdb::kl_from_scores(&a, &b, tau)? - want).abs());
        let (p, q) = (kdb::to_distribution(&a, tau)?, kdb::to_distribution(&b, tau)?);
        kl = kl.max((kdb::forward_distill_loss(&p, &q)? - want).abs());
        mse = mse.max((kdb::backward_distill_loss(&a, &b)? - mse_loop(&a, &b)).abs());
        let (d, dm) = (rng.between(1, 8), rng.between(1, 8));
        let (e, z, w) = (random_tensor(k, d, &mut rng), random_tensor(k, dm, &mut rng), random_tensor(d, dm, &mut rng));
        al = al.max((kdb::alignment_loss(&e, &z, &w)? - alignment_loop(&e, &z, &w)).abs());
    }
    Ok((kl, mse, al))
}

/// Relative error of the analytic gradient of the weighted five-term
/// objective over a 5-candidate slate at one random parameter point.
pub fn five_term_grad_error(point: u64) -> Result<f64> {
    let mut spec = WorldSpec::new(7, 40, 4, 16, 4);
    spec.n_heldout = 1;
    spec.item_len = (2, 4);
    spec.query_len = (1, 3);
    spec.grade_fractions = vec![0.025, 0.025, 0.025];
    let world = World::generate(spec)?;
    let config = TrainingConfig { seed: point, k: 5, batch_size: 1, negatives: 3, dims: tiny_dims(), ..TrainingConfig::default() };
    let (tte, lt) = init_models(&config, &world)?;
    let index = tte.index_items(&world)?;
    let mut rng = Rng::with_stream(point, 903);
    let batch = build_batch(&world, &config, &tte, &index, None, &mut rng)?;
    assert_eq!(batch.queries[0].slate.len(), 5);

    // move off the initialisation (zero biases) to a generic point
    let n_tte = tte.params().len();
    let point: Vec<Tensor> = tte
        .params()
        .tensors()
        .iter()
        .chain(lt.params().tensors())
        .map(|t| {
            let noise: Vec<f64> = (0..t.len()).map(|_| 0.3 * rng.normal()).collect();
            let mut t = t.clone();
            t.data_mut().iter_mut().zip(noise).for_each(|(v, n)| *v += n);
            t
        })
        .collect();
    let weights = config.weights.clone();
    let r = grad_check(
        |g, vars| {
            let tb = Bound::from_vars(vars[..n_tte].to_vec());
            let lb = Bound::from_vars(vars[n_tte..].to_vec());
            let per = joint_losses(g, &tte, &tb, &lt, &lb, &world, &batch, &weights)?;
            weighted_sum(g, &per, &weights.lambda)
        },
        &point,
        unirank::numerics::gradcheck::DEFAULT_STEP,
    )?;
    Ok(r.max_rel_error)
}

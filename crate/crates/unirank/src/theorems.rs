//! Executable consequences of the system's formal claims: the UPQE
//! properties, the convex joint-versus-disjoint toy, Pinsker's inequality
//! and permutation equivariance of the ranker.
//!
//! The UPQE function is injected so a faulty variant can be checked to
//! fail.

use serde::{Deserialize, Serialize};

use crate::cascade::{joint_loss_comparison, ToySpec};
use crate::config::TheoremConfig;
use crate::error::Result;
use crate::kdb::{forward_distill_loss, to_distribution};
use crate::listwise::{CandidateSlate, LtConfig, LtModel};
use crate::metrics::{UpqeInput, UpqeParams};
use crate::numerics::Rng;

pub const SUITE_SCHEMA_VERSION: u32 = 1;

/// Signature of a UPQE implementation.
pub type UpqeFn<'a> = &'a dyn Fn(&UpqeInput, &UpqeParams) -> Option<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// First failing case, or a summary when everything passed.
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub schema_version: u32,
    pub properties: Vec<PropertyResult>,
    pub all_passed: bool,
}

impl SuiteReport {
    pub fn failures(&self) -> Vec<&str> {
        self.properties.iter().filter(|p| !p.passed).map(|p| p.name.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.name == name)
    }
}

/// Accumulates one property's cases, keeping the first failure.
struct Check {
    name: &'static str,
    cases: usize,
    failure: Option<String>,
    note: String,
}

impl Check {
    fn new(name: &'static str) -> Self {
        Self { name, cases: 0, failure: None, note: String::new() }
    }

    fn case(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok && self.failure.is_none() {
            self.failure = Some(what());
        }
    }

    fn finish(self) -> PropertyResult {
        let passed = self.failure.is_none();
        let detail = self.failure.unwrap_or(if self.note.is_empty() { format!("{} cases", self.cases) } else { self.note });
        PropertyResult { name: self.name.into(), passed, cases: self.cases, detail }
    }
}

const ALPHAS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 3.0];
const BETAS: [f64; 4] = [0.5, 1.0, 1.5, 2.0];
const GAMMAS: [f64; 3] = [0.5, 1.0, 2.0];

fn input(ndcg_u: f64, ndcg_c: f64, e: usize, r: usize, cu: f64, cc: f64) -> UpqeInput {
    UpqeInput { ndcg_unified: ndcg_u, ndcg_cascade: ndcg_c, e_prop: e, n_relevant: r, cost_unified: cu, cost_cascade: cc }
}

/// A perfect unified system at equal cost scores at least `γ`.
pub fn upqe_convergence(f: UpqeFn) -> PropertyResult {
    let mut c = Check::new("upqe_convergence");
    for &gamma in &GAMMAS {
        for &alpha in &ALPHAS {
            for &beta in &BETAS {
                let p = UpqeParams { alpha, beta, gamma };
                for i in 1..=20 {
                    let ndcg_c = i as f64 / 20.0;
                    for r in 1..=8 {
                        let v = f(&input(1.0, ndcg_c, 0, r, 3.0, 3.0), &p);
                        c.case(v.is_some_and(|v| v >= gamma), || format!("{p:?}, NDCG_c = {ndcg_c}, |R| = {r}: {v:?} < γ"));
                    }
                }
            }
        }
    }
    c.finish()
}

/// Strictly decreasing in `E` over `0..=|R|` for every `α > 0`.
pub fn upqe_error_monotone(f: UpqeFn) -> PropertyResult {
    let mut c = Check::new("upqe_error_monotone");
    for &alpha in &ALPHAS {
        for r in 1..=10 {
            for &(nu, nc) in &[(0.9, 0.7), (0.5, 0.5), (0.2, 0.8)] {
                let p = UpqeParams { alpha, beta: 1.0, gamma: 1.0 };
                let vals: Vec<Option<f64>> = (0..=r).map(|e| f(&input(nu, nc, e, r, 2.0, 3.0), &p)).collect();
                for e in 0..r {
                    let ok = matches!((vals[e], vals[e + 1]), (Some(a), Some(b)) if b < a);
                    c.case(ok, || format!("α = {alpha}, |R| = {r}: UPQE(E={e}) = {:?}, UPQE(E={}) = {:?}", vals[e], e + 1, vals[e + 1]));
                }
            }
        }
    }
    c.finish()
}

/// Pairs with `log(NDCG₁/NDCG₂) = β·log(C₁/C₂)` score the same.
pub fn upqe_indifference(f: UpqeFn) -> PropertyResult {
    let mut c = Check::new("upqe_indifference");
    for &beta in &BETAS {
        for &alpha in &ALPHAS {
            for &n1 in &[0.3, 0.6, 0.9] {
                for &ratio in &[0.5, 0.8, 1.25, 2.0] {
                    let p = UpqeParams { alpha, beta, gamma: 1.3 };
                    let (c1, c2): (f64, f64) = (10.0, 10.0 / ratio);
                    // NDCG₂ = NDCG₁ · (C₂/C₁)^β
                    let n2 = n1 * (c2 / c1).powf(beta);
                    let u1 = f(&input(n1, 0.5, 1, 4, c1, 7.0), &p);
                    let u2 = f(&input(n2, 0.5, 1, 4, c2, 7.0), &p);
                    let ok = matches!((u1, u2), (Some(a), Some(b)) if (a - b).abs() <= 1e-9 * a.abs().max(1.0));
                    c.case(ok, || format!("β = {beta}, NDCG {n1} vs {n2}, C {c1} vs {c2}: {u1:?} vs {u2:?}"));
                }
            }
        }
    }
    c.finish()
}

/// For `α = 2` the penalty drop from `E` to `E + 1` never shrinks as `E` grows.
pub fn upqe_steepening(f: UpqeFn) -> PropertyResult {
    let mut c = Check::new("upqe_steepening");
    let p = UpqeParams { alpha: 2.0, beta: 1.0, gamma: 1.0 };
    for r in 2..=12 {
        // quality and efficiency terms are 1, so UPQE is the penalty itself
        let pen: Vec<Option<f64>> = (0..=r).map(|e| f(&input(0.6, 0.6, e, r, 5.0, 5.0), &p)).collect();
        for e in 0..r - 1 {
            let ok = match (pen[e], pen[e + 1], pen[e + 2]) {
                (Some(a), Some(b), Some(c2)) => (b - c2) >= (a - b) - 1e-12,
                _ => false,
            };
            c.case(ok, || {
                let v = |x: Option<f64>| x.map_or("undefined".to_string(), |x| format!("{x}"));
                format!(
                    "|R| = {r}: penalty at E = {e}, {}, {} is {}, {}, {} (later drop smaller than earlier one)",
                    e + 1,
                    e + 2,
                    v(pen[e]),
                    v(pen[e + 1]),
                    v(pen[e + 2])
                )
            });
        }
    }
    c.finish()
}

/// Joint optimum never loses to the disjoint one on random instances.
pub fn convex_toy_random(cfg: &TheoremConfig) -> Result<PropertyResult> {
    let mut c = Check::new("convex_toy_random");
    let mut rng = Rng::with_stream(cfg.seed, 30);
    let mut worst: f64 = f64::INFINITY;
    for i in 0..cfg.instances {
        let (n1, n2) = (rng.between(1, 5), rng.between(1, 5));
        let spec = ToySpec::random(n1, n2, &mut rng);
        let r = joint_loss_comparison(&spec)?;
        worst = worst.min(r.disjoint - r.joint);
        c.case(r.joint <= r.disjoint + 1e-12 * r.disjoint.abs().max(1.0), || format!("instance {i}: joint {} > disjoint {}", r.joint, r.disjoint));
    }
    c.note = format!("{} instances, smallest margin {worst:.3e}", c.cases);
    Ok(c.finish())
}

/// Aligned objectives give equality.
pub fn convex_toy_equality(cfg: &TheoremConfig) -> Result<PropertyResult> {
    let mut c = Check::new("convex_toy_equality");
    let mut rng = Rng::with_stream(cfg.seed, 31);
    for i in 0..cfg.instances.min(20).max(1) {
        let spec = ToySpec::random(rng.between(1, 4), rng.between(1, 4), &mut rng).aligned();
        let r = joint_loss_comparison(&spec)?;
        c.case((r.joint - r.disjoint).abs() <= 1e-10, || format!("instance {i}: joint {} vs disjoint {}", r.joint, r.disjoint));
    }
    c.note = format!("{} aligned instances, reported as equality", c.cases);
    Ok(c.finish())
}

/// `KL(P‖Q) ≥ ½ ‖P − Q‖₁²`.
pub fn pinsker(cfg: &TheoremConfig) -> Result<PropertyResult> {
    let mut c = Check::new("pinsker");
    let mut rng = Rng::with_stream(cfg.seed, 32);
    for i in 0..cfg.instances * 10 {
        let k = rng.between(2, 20);
        let scale = rng.uniform(0.1, 5.0);
        let a: Vec<f64> = (0..k).map(|_| scale * rng.normal()).collect();
        let b: Vec<f64> = (0..k).map(|_| scale * rng.normal()).collect();
        let (p, q) = (to_distribution(&a, 1.0)?, to_distribution(&b, 1.0)?);
        let kl = forward_distill_loss(&p, &q)?;
        let l1: f64 = p.probs.iter().zip(&q.probs).map(|(x, y)| (x - y).abs()).sum();
        c.case(kl >= 0.5 * l1 * l1 - 1e-12, || format!("pair {i}: KL {kl} < ½‖P−Q‖₁² = {}", 0.5 * l1 * l1));
    }
    Ok(c.finish())
}

/// Without positional encoding, permuting the slate permutes the scores.
pub fn lt_equivariance(cfg: &TheoremConfig) -> Result<PropertyResult> {
    let mut c = Check::new("lt_equivariance");
    let mut rng = Rng::with_stream(cfg.seed, 33);
    let lc = LtConfig { d: 6, d_r: 3, d_model: 16, n_heads: 4, layers: 2, ffn: 24, positional_encoding: false };
    let model = LtModel::new(lc, &mut rng)?;
    for i in 0..cfg.instances {
        let k = rng.between(2, 24);
        let slate = CandidateSlate::random(k, 6, 3, &mut rng);
        let mut perm: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut perm);
        let s = model.forward(&slate)?;
        let sp = model.forward(&slate.permuted(&perm))?;
        let err = perm.iter().enumerate().map(|(j, &p)| (sp[j] - s[p]).abs()).fold(0.0, f64::max);
        c.case(err <= 1e-9, || format!("slate {i} (k = {k}): max deviation {err:e}"));
    }
    Ok(c.finish())
}

/// Run every property with `upqe_fn` standing in for UPQE.
pub fn run_suite_with(cfg: &TheoremConfig, upqe_fn: UpqeFn) -> Result<SuiteReport> {
    let properties = vec![
        upqe_convergence(upqe_fn),
        upqe_error_monotone(upqe_fn),
        upqe_indifference(upqe_fn),
        upqe_steepening(upqe_fn),
        convex_toy_random(cfg)?,
        convex_toy_equality(cfg)?,
        pinsker(cfg)?,
        lt_equivariance(cfg)?,
    ];
    let all_passed = properties.iter().all(|p| p.passed);
    Ok(SuiteReport { schema_version: SUITE_SCHEMA_VERSION, properties, all_passed })
}

pub fn run_suite(cfg: &TheoremConfig) -> Result<SuiteReport> {
    run_suite_with(cfg, &crate::metrics::upqe)
}

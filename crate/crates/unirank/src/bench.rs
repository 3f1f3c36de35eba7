//! Serving-cost scaling: wall time of the listwise pass over a grid of
//! slate sizes and of exact retrieval over a grid of corpus sizes, with
//! log-log exponent fits and a cross-check of the closed-form cost model
//! against counted multiply-adds.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::BenchConfig;
use crate::error::{Error, Result};
use crate::listwise::{multi_head_attention, LtModel};
use crate::metrics::{cost_profile, CostShape};
use crate::numerics::{Graph, Rng, Tensor};
use crate::trainer::ModelDims;
use crate::tte::ItemIndex;

pub const BENCH_SCHEMA_VERSION: u32 = 1;

/// Accepted exponent range for the attention kernel against `k`.
pub const ATTENTION_EXPONENT_RANGE: (f64, f64) = (1.8, 2.2);
/// Accepted exponent range for the exact scan against `N`.
pub const RETRIEVAL_EXPONENT_RANGE: (f64, f64) = (0.9, 1.1);
/// Largest allowed exponent difference between repeated runs.
pub const REPEAT_TOLERANCE: f64 = 0.1;

/// Least-squares line through `(ln x, ln y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub exponent: f64,
    pub r_squared: f64,
}

/// `y ≈ a·x² + b·x` by least squares.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFit {
    pub a: f64,
    pub b: f64,
    pub r_squared: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlatePoint {
    pub k: usize,
    /// Seconds per full listwise forward pass.
    pub lt_seconds: f64,
    /// Seconds per multi-head attention call (one layer).
    pub attention_seconds: f64,
    pub lt_macs_model: f64,
    pub lt_macs_counted: u64,
    pub attention_macs_model: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusPoint {
    pub n: usize,
    /// Seconds per query for the exact scan (nearest item only), queries
    /// scored in blocks of [`QUERY_BLOCK`].
    pub seconds: f64,
    /// Same, returning the top `k` items.
    pub top_k_seconds: f64,
    /// Top `k` for one query scored on its own.
    pub single_query_seconds: f64,
    pub macs_model: f64,
}

/// Queries scored per pass over the item table in the retrieval benchmark.
pub const QUERY_BLOCK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub slate_points: Vec<SlatePoint>,
    pub corpus_points: Vec<CorpusPoint>,
    /// Measured attention time against `k`.
    pub attention_fit: PowerFit,
    /// Measured full listwise time against `k`.
    pub lt_fit: PowerFit,
    pub lt_quadratic: QuadraticFit,
    /// Measured per-query scan time against `N` (blocked queries).
    pub retrieval_fit: PowerFit,
    /// Blocked top-k; selection overhead flattens the small-`N` end.
    pub top_k_retrieval_fit: PowerFit,
    /// One query per pass; sensitive to cache size once the table
    /// outgrows it.
    pub single_query_retrieval_fit: PowerFit,
    /// Exponents of the closed-form model over the same grids.
    pub attention_model_exponent: f64,
    pub retrieval_model_exponent: f64,
    /// Largest `|model − counted| / counted` over the slate grid.
    pub flop_model_max_rel_err: f64,
}

/// Log-log slope and its coefficient of determination.
pub fn power_fit(xs: &[f64], ys: &[f64]) -> Result<PowerFit> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("power fit needs at least two positive points".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("power fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(PowerFit { exponent: slope, r_squared })
}

/// Least squares for `y = a x² + b x` (no intercept).
pub fn quadratic_fit(xs: &[f64], ys: &[f64]) -> Result<QuadraticFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("quadratic fit needs at least two points".into()));
    }
    let (mut s4, mut s3, mut s2, mut y2, mut y1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        s4 += x.powi(4);
        s3 += x.powi(3);
        s2 += x * x;
        y2 += y * x * x;
        y1 += y * x;
    }
    let det = s4 * s2 - s3 * s3;
    if det.abs() <= f64::EPSILON * s4 * s2 {
        return Err(Error::Degenerate("quadratic fit normal equations".into()));
    }
    let a = (y2 * s2 - s3 * y1) / det;
    let b = (s4 * y1 - s3 * y2) / det;
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(&x, &y)| (y - a * x * x - b * x).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(QuadraticFit { a, b, r_squared })
}

/// Calls per timed batch so that one batch lasts at least a few milliseconds.
fn calibrate(f: &mut dyn FnMut() -> Result<()>) -> Result<usize> {
    const MIN_BATCH: f64 = 20e-3;
    f()?;
    let mut calls = 1usize;
    loop {
        let t = Instant::now();
        for _ in 0..calls {
            f()?;
        }
        if t.elapsed().as_secs_f64() >= MIN_BATCH || calls >= 1 << 20 {
            return Ok(calls);
        }
        calls *= 2;
    }
}

/// Fastest per-call time over `repeats` timed batches.
fn time_per_call(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    Ok(time_interleaved(repeats, &mut [&mut f])?[0])
}

/// Like [`time_per_call`] for several functions, cycling through all of them
/// in every repeat so that a slow stretch of the machine is spread over the
/// whole grid instead of landing on one point.
fn time_interleaved(repeats: usize, fs: &mut [&mut dyn FnMut() -> Result<()>]) -> Result<Vec<f64>> {
    let calls = fs.iter_mut().map(|f| calibrate(*f)).collect::<Result<Vec<_>>>()?;
    let mut best = vec![f64::INFINITY; fs.len()];
    for _ in 0..repeats {
        for ((f, &n), b) in fs.iter_mut().zip(&calls).zip(&mut best) {
            let t = Instant::now();
            for _ in 0..n {
                f()?;
            }
            *b = b.min(t.elapsed().as_secs_f64() / n as f64);
        }
    }
    Ok(best)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).expect("shape")
}

/// Time the listwise pass and its attention kernel for each `k`.
pub fn slate_grid(dims: &ModelDims, ks: &[usize], repeats: usize, seed: u64) -> Result<Vec<SlatePoint>> {
    let mut rng = Rng::with_stream(seed, 40);
    let cfg = crate::trainer::TrainingConfig { dims: dims.clone(), ..Default::default() };
    let lt = LtModel::new(cfg.lt_config(), &mut rng)?;
    let c = lt.config().clone();
    let mut inputs = Vec::with_capacity(ks.len());
    for &k in ks {
        let x = random_matrix(k, c.d_in(), &mut rng);
        let mut g = Graph::inference();
        let q = g.constant(random_matrix(k, c.d_model, &mut rng));
        let kv = g.constant(random_matrix(k, c.d_model, &mut rng));
        let v = g.constant(random_matrix(k, c.d_model, &mut rng));
        inputs.push((x, g, [q, kv, v]));
    }
    let mut lt_fns: Vec<Box<dyn FnMut() -> Result<()> + '_>> = inputs
        .iter()
        .map(|(x, _, _)| {
            let lt = &lt;
            Box::new(move || {
                let mut g = Graph::inference();
                let b = lt.params().bind(&mut g, false);
                let xv = g.constant(x.clone());
                lt.forward_graph(&mut g, &b, xv)?;
                Ok(())
            }) as Box<dyn FnMut() -> Result<()>>
        })
        .collect();
    let lt_times = time_interleaved(repeats, &mut lt_fns.iter_mut().map(|f| f.as_mut() as &mut dyn FnMut() -> Result<()>).collect::<Vec<_>>())?;
    drop(lt_fns);
    let heads = c.n_heads;
    let mut att_fns: Vec<Box<dyn FnMut() -> Result<()> + '_>> = inputs
        .iter_mut()
        .map(|(_, g, [q, kv, v])| {
            let (q, kv, v) = (*q, *kv, *v);
            let base = g.len();
            Box::new(move || {
                multi_head_attention(g, q, kv, v, heads)?;
                g.truncate(base);
                Ok(())
            }) as Box<dyn FnMut() -> Result<()>>
        })
        .collect();
    let att_times = time_interleaved(repeats, &mut att_fns.iter_mut().map(|f| f.as_mut() as &mut dyn FnMut() -> Result<()>).collect::<Vec<_>>())?;
    drop(att_fns);
    let mut out = Vec::with_capacity(ks.len());
    for ((&k, lt_seconds), attention_seconds) in ks.iter().zip(lt_times).zip(att_times) {
        let model = cost_profile(&CostShape {
            n_items: 0,
            d: c.d,
            k,
            d_in: c.d_in(),
            d_model: c.d_model,
            layers: c.layers,
            ffn: c.ffn,
        });
        out.push(SlatePoint {
            k,
            lt_seconds,
            attention_seconds,
            lt_macs_model: model.lt,
            lt_macs_counted: lt.measured_macs(k)?,
            attention_macs_model: model.attention,
        });
    }
    Ok(out)
}

/// Time exact retrieval for each corpus size, per query.
pub fn corpus_grid(d: usize, ns: &[usize], k: usize, repeats: usize, seed: u64) -> Result<Vec<CorpusPoint>> {
    let mut rng = Rng::with_stream(seed, 41);
    let mut out = Vec::with_capacity(ns.len());
    for &n in ns {
        let rows: Vec<f64> = (0..n).flat_map(|_| rng.unit_vector(d)).collect();
        let index = ItemIndex { emb: Tensor::matrix(n, d, rows)?, res: Tensor::zeros(&[n, 1]) };
        let queries: Vec<f64> = (0..QUERY_BLOCK).flat_map(|_| rng.unit_vector(d)).collect();
        let queries = Tensor::matrix(QUERY_BLOCK, d, queries)?;
        let kk = k.min(n);
        let per_query = |k| -> Result<f64> {
            Ok(time_per_call(repeats, || index.top_k_batch(&queries, k).map(|_| ()))? / QUERY_BLOCK as f64)
        };
        let seconds = per_query(1)?;
        let top_k_seconds = per_query(kk)?;
        let single_query_seconds = time_per_call(repeats, || index.top_k(queries.row_slice(0), kk).map(|_| ()))?;
        out.push(CorpusPoint {
            n,
            seconds,
            top_k_seconds,
            single_query_seconds,
            macs_model: (n * d) as f64,
        });
    }
    Ok(out)
}

pub fn run_benchmark(cfg: &BenchConfig, dims: &ModelDims, seed: u64) -> Result<BenchReport> {
    let slate_points = slate_grid(dims, &cfg.k_grid, cfg.repeats, seed)?;
    let corpus_points = corpus_grid(dims.d, &cfg.n_grid, 50, cfg.repeats, seed)?;
    let ks: Vec<f64> = slate_points.iter().map(|p| p.k as f64).collect();
    let ns: Vec<f64> = corpus_points.iter().map(|p| p.n as f64).collect();
    let col = |f: fn(&SlatePoint) -> f64| slate_points.iter().map(f).collect::<Vec<f64>>();
    let lt_times = col(|p| p.lt_seconds);
    let flop_model_max_rel_err = slate_points
        .iter()
        .map(|p| (p.lt_macs_model - p.lt_macs_counted as f64).abs() / p.lt_macs_counted as f64)
        .fold(0.0, f64::max);
    Ok(BenchReport {
        schema_version: BENCH_SCHEMA_VERSION,
        attention_fit: power_fit(&ks, &col(|p| p.attention_seconds))?,
        lt_fit: power_fit(&ks, &lt_times)?,
        lt_quadratic: quadratic_fit(&ks, &lt_times)?,
        retrieval_fit: power_fit(&ns, &corpus_points.iter().map(|p| p.seconds).collect::<Vec<_>>())?,
        top_k_retrieval_fit: power_fit(&ns, &corpus_points.iter().map(|p| p.top_k_seconds).collect::<Vec<_>>())?,
        single_query_retrieval_fit: power_fit(&ns, &corpus_points.iter().map(|p| p.single_query_seconds).collect::<Vec<_>>())?,
        attention_model_exponent: power_fit(&ks, &col(|p| p.attention_macs_model))?.exponent,
        retrieval_model_exponent: power_fit(&ns, &corpus_points.iter().map(|p| p.macs_model).collect::<Vec<_>>())?.exponent,
        flop_model_max_rel_err,
        slate_points,
        corpus_points,
    })
}

/// Range and repeat checks over one or more benchmark runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchChecks {
    pub attention_in_range: bool,
    pub retrieval_in_range: bool,
    /// Largest spread of each exponent across runs; `None` for one run.
    pub attention_spread: Option<f64>,
    pub retrieval_spread: Option<f64>,
    pub repeat_agrees: Option<bool>,
}

fn within((lo, hi): (f64, f64), x: f64) -> bool {
    (lo..=hi).contains(&x)
}

fn spread(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let hi = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let lo = xs.fold(f64::INFINITY, f64::min);
    hi - lo
}

impl BenchChecks {
    pub fn of(runs: &[BenchReport]) -> Self {
        let att = runs.iter().map(|r| r.attention_fit.exponent);
        let ret = runs.iter().map(|r| r.retrieval_fit.exponent);
        let (attention_spread, retrieval_spread) =
            if runs.len() > 1 { (Some(spread(att.clone())), Some(spread(ret.clone()))) } else { (None, None) };
        Self {
            attention_in_range: !runs.is_empty() && att.clone().all(|x| within(ATTENTION_EXPONENT_RANGE, x)),
            retrieval_in_range: !runs.is_empty() && ret.clone().all(|x| within(RETRIEVAL_EXPONENT_RANGE, x)),
            attention_spread,
            retrieval_spread,
            repeat_agrees: attention_spread.zip(retrieval_spread).map(|(a, r)| a <= REPEAT_TOLERANCE && r <= REPEAT_TOLERANCE),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law_recovered() {
        let xs = [2.0, 4.0, 8.0, 16.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.7)).collect();
        let f = power_fit(&xs, &ys).unwrap();
        assert!((f.exponent - 1.7).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_quadratic_recovered() {
        let xs = [16.0, 32.0, 64.0, 128.0];
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 * x * x + 7.0 * x).collect();
        let f = quadratic_fit(&xs, &ys).unwrap();
        assert!((f.a - 0.5).abs() < 1e-9 && (f.b - 7.0).abs() < 1e-7);
        assert!(f.r_squared > 1.0 - 1e-12);
    }

    #[test]
    fn fits_reject_bad_input() {
        assert!(power_fit(&[1.0], &[1.0]).is_err());
        assert!(power_fit(&[1.0, 2.0], &[0.0, 1.0]).is_err());
        assert!(power_fit(&[2.0, 2.0], &[1.0, 3.0]).is_err());
    }
}

//! `unirank`: generate worlds, train, evaluate, compare, check the theorem
//! suite and run the scaling benchmark.
//!
//! Exit codes: 1 I/O and everything else, 2 config, 3 non-finite loss,
//! 4 dimension mismatch, 5 world mismatch, 6 failed theorem property.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use unirank::bench::{run_benchmark, BenchChecks, BenchReport};
use unirank::checkpoint::{write_atomic, Checkpoint};
use unirank::config::RunConfig;
use unirank::runs::{
    check_world_spec, compare_reports, evaluate_checkpoint, evaluate_oracle, train_checkpointed, CompareReport,
    QuerySplit,
};
use unirank::theorems::run_suite;
use unirank::trainer::{LogRecord, SystemKind};
use unirank::world::World;

#[derive(Parser)]
#[command(name = "unirank", version, about = "Unified retrieval and ranking against a cascade baseline")]
struct Cli {
    /// Run configuration (JSON). Defaults to the standard setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the world and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic world and write world.json.
    GenWorld,
    /// Train the selected system(s), with checkpoints and a JSON-lines log.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the ground-truth oracle).
    Eval(EvalArgs),
    /// Compare unified/cascade checkpoint pairs: UPQE and deltas.
    Compare(CompareArgs),
    /// Run the theorem-consequence suite.
    Theorems,
    /// Wall-time scaling over slate and corpus sizes.
    Benchmark(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// World file; generated from the config when absent.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Continue from this checkpoint (its config wins).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Log path; only with a single system.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Stop after this many total steps.
    #[arg(long)]
    until: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    world: Option<PathBuf>,
    /// Evaluate the ground-truth ranking instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    oracle: bool,
    #[arg(long, default_value = "heldout", value_parser = parse_split)]
    split: QuerySplit,
}

#[derive(Args)]
struct CompareArgs {
    /// Checkpoint pairs: UNIFIED CASCADE [UNIFIED CASCADE ...].
    #[arg(required = true, num_args = 2..)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long, default_value = "heldout", value_parser = parse_split)]
    split: QuerySplit,
}

#[derive(Args)]
struct BenchArgs {
    /// Independent runs; exponents of repeated runs are compared.
    #[arg(long, default_value_t = 2)]
    runs: usize,
}

fn parse_split(s: &str) -> Result<QuerySplit, String> {
    match s {
        "train" => Ok(QuerySplit::Train),
        "heldout" => Ok(QuerySplit::Heldout),
        "all" => Ok(QuerySplit::All),
        _ => Err(format!("unknown split {s:?} (train, heldout, all)")),
    }
}

/// A failed theorem property; exit code 6.
#[derive(Debug)]
struct TheoremsFailed(Vec<String>);

impl std::fmt::Display for TheoremsFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "theorem suite failed: {}", self.0.join(", "))
    }
}

impl std::error::Error for TheoremsFailed {}

struct Ctx {
    config: RunConfig,
    out: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut config = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::standard(0),
        };
        if let Some(s) = cli.seed {
            config = config.with_seed(s);
            config.theorems.seed = s;
        }
        config.validate()?;
        let out = cli.out.clone().unwrap_or_else(|| config.out_dir.clone());
        fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
        Ok(Self { config, out, quiet: cli.quiet })
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.out.join(name);
        write_atomic(&p, bytes).with_context(|| format!("cannot write {}", p.display()))?;
        Ok(p)
    }
}

fn load_world(path: Option<&Path>, config: &RunConfig) -> Result<World> {
    match path {
        Some(p) => Ok(World::load(p).with_context(|| format!("cannot load world {}", p.display()))?),
        None => Ok(World::generate(config.world.clone())?),
    }
}

fn gen_world(ctx: &Ctx) -> Result<()> {
    let world = World::generate(ctx.config.world.clone())?;
    let p = ctx.write("world.json", world.to_json().as_bytes())?;
    let s = world.spec();
    ctx.say(format!("wrote {}", p.display()));
    ctx.say(format!(
        "items {}  queries {} ({} train, {} held out)",
        s.n_items,
        s.n_queries,
        world.train_queries().len(),
        world.heldout_queries().len()
    ));
    let hist = world.grade_histogram();
    let cells: Vec<String> = hist.iter().enumerate().map(|(g, n)| format!("{g}:{n}")).collect();
    ctx.say(format!("grade histogram  {}", cells.join("  ")));
    Ok(())
}

/// Keep the records of `path` older than `step`, so a resumed run's log
/// matches an unbroken one.
fn truncate_log(path: &Path, step: usize) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: LogRecord = serde_json::from_str(line).with_context(|| format!("bad log line in {}", path.display()))?;
        if rec.step < step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())?;
    Ok(())
}

fn train(ctx: &Ctx, args: &TrainArgs) -> Result<()> {
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let systems = match &resume {
        Some(ck) => vec![ck.state.system],
        None => ctx.config.system.systems(),
    };
    if args.log.is_some() && systems.len() > 1 {
        return Err(unirank::Error::Config("--log needs a single system; set \"system\" in the config".into()).into());
    }
    let config = resume.as_ref().map_or(&ctx.config, |ck| &ck.config).clone();
    let world = load_world(args.world.as_deref(), &config)?;
    check_world_spec(&config, &world, "config")?;
    let mut resume = resume;
    for system in systems {
        let tag = system.tag();
        let ckpt = ctx.out.join(format!("{tag}.ckpt"));
        let log_path = args.log.clone().unwrap_or_else(|| ctx.out.join(format!("{tag}.log.jsonl")));
        let start = resume.as_ref().map_or(0, |ck| ck.state.step);
        if resume.is_some() {
            truncate_log(&log_path, start)?;
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(resume.is_some())
            .write(true)
            .truncate(resume.is_none())
            .open(&log_path)
            .with_context(|| format!("cannot open log {}", log_path.display()))?;
        let mut log = BufWriter::new(file);
        let quiet = ctx.quiet;
        let result = train_checkpointed(&world, &config, system, resume.take(), args.until, &ckpt, |r| {
            writeln!(log, "{}", r.to_json_line())?;
            if r.step % 100 == 0 {
                log.flush()?;
                if !quiet {
                    log::info!("{tag} step {} [{}] total {:.4}", r.step, r.phase, r.total);
                }
            }
            Ok(())
        });
        log.flush()?;
        match result {
            Ok(ck) => ctx.say(format!("{tag}: {} steps, checkpoint {}", ck.state.step, ckpt.display())),
            Err(e @ unirank::Error::NonFiniteLoss { .. }) => {
                return Err(anyhow::Error::new(e).context(format!("training stopped; last checkpoint kept at {}", ckpt.display())));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn write_report(ctx: &Ctx, report: &unirank::metrics::MetricsReport) -> Result<()> {
    report.check_ranges()?;
    let tag = &report.system;
    let json = ctx.write(&format!("{tag}.report.json"), report.to_json().as_bytes())?;
    ctx.write(&format!("{tag}.report.csv"), report.to_csv()?.as_bytes())?;
    let cells: Vec<String> = report.cutoffs.iter().zip(&report.mean_ndcg).map(|(c, v)| format!("ndcg@{c} {v:.4}")).collect();
    ctx.say(format!("{tag}: {}  recall {:.4}  e_prop {:.3}", cells.join("  "), report.mean_recall, report.mean_e_prop));
    ctx.say(format!("wrote {}", json.display()));
    Ok(())
}

fn eval(ctx: &Ctx, args: &EvalArgs) -> Result<()> {
    if args.oracle {
        let world = load_world(args.world.as_deref(), &ctx.config)?;
        let report = evaluate_oracle(&ctx.config, &world, &args.split.queries(&world))?;
        return write_report(ctx, &report);
    }
    let Some(path) = &args.checkpoint else {
        return Err(unirank::Error::Config("eval needs a checkpoint or --oracle".into()).into());
    };
    let ck = Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    let world = load_world(args.world.as_deref(), &ck.config)?;
    ck.check_world(&world)?;
    if &ck.config.world != world.spec() {
        log::warn!("world spec differs from the one the checkpoint was trained on");
    }
    let report = evaluate_checkpoint(&ck, &world, &args.split.queries(&world))?;
    write_report(ctx, &report)
}

#[derive(Serialize)]
struct CompareRow {
    pair: usize,
    query: usize,
    upqe: Option<f64>,
    delta_e_prop: i64,
}

fn compare(ctx: &Ctx, cli: &Cli, args: &CompareArgs) -> Result<()> {
    if args.checkpoints.len() % 2 != 0 {
        return Err(unirank::Error::Config("compare takes checkpoint pairs: UNIFIED CASCADE ...".into()).into());
    }
    let given = args.world.as_deref().map(World::load).transpose()?;
    let mut pairs = Vec::new();
    for pair in args.checkpoints.chunks(2) {
        let load = |p: &PathBuf| Checkpoint::load(p).with_context(|| format!("cannot load checkpoint {}", p.display()));
        let (u, c) = (load(&pair[0])?, load(&pair[1])?);
        if u.config.world != c.config.world {
            return Err(unirank::Error::WorldMismatch(format!(
                "{} and {} were trained on different worlds",
                pair[0].display(),
                pair[1].display()
            ))
            .into());
        }
        if c.state.system != SystemKind::Cascade {
            log::warn!("{} is not a cascade checkpoint", pair[1].display());
        }
        let world = match &given {
            Some(w) => {
                check_world_spec(&u.config, w, &pair[0].display().to_string())?;
                w.clone()
            }
            None => World::generate(u.config.world.clone())?,
        };
        let queries = args.split.queries(&world);
        let (ru, rc) = (evaluate_checkpoint(&u, &world, &queries)?, evaluate_checkpoint(&c, &world, &queries)?);
        let params = if cli.config.is_some() { ctx.config.upqe } else { u.config.upqe };
        pairs.push(compare_reports(&ru, &rc, &params)?);
    }
    let report = CompareReport::new(pairs)?;
    let p = ctx.write("compare.json", report.to_json().as_bytes())?;

    let mut w = csv::Writer::from_writer(Vec::new());
    for (i, pc) in report.pairs.iter().enumerate() {
        for q in &pc.queries {
            w.serialize(CompareRow { pair: i, query: q.query, upqe: q.upqe, delta_e_prop: q.delta_e_prop })?;
        }
    }
    ctx.write("compare.csv", &w.into_inner().map_err(|e| e.into_error())?)?;

    for (i, pc) in report.pairs.iter().enumerate() {
        let d: Vec<String> = pc.cutoffs.iter().zip(&pc.mean_delta_ndcg).map(|(c, v)| format!("Δndcg@{c} {v:+.4}")).collect();
        let upqe = pc.upqe_mean.map_or("undefined".into(), |v| format!("{v:.4}"));
        ctx.say(format!(
            "pair {i}: upqe {upqe}  {}  Δe_prop {:+.3}  cost ratio {:.4}",
            d.join("  "),
            pc.mean_delta_e_prop,
            pc.cost_ratio
        ));
    }
    if let Some(s) = &report.summary {
        let wins: Vec<String> = report.pairs[0].cutoffs.iter().zip(&s.ndcg_wins).map(|(c, n)| format!("@{c} {n}")).collect();
        ctx.say(format!("{} pairs: ndcg wins {}  e_prop wins {}", s.pairs, wins.join(" "), s.e_prop_wins));
    }
    ctx.say(format!("wrote {}", p.display()));
    Ok(())
}

fn theorems(ctx: &Ctx) -> Result<()> {
    let report = run_suite(&ctx.config.theorems)?;
    let json = serde_json::to_string_pretty(&report)?;
    let p = ctx.write("theorems.json", json.as_bytes())?;
    for prop in &report.properties {
        ctx.say(format!("[{}] {} ({} cases) {}", if prop.passed { "PASS" } else { "FAIL" }, prop.name, prop.cases, prop.detail));
    }
    ctx.say(format!("wrote {}", p.display()));
    let failed = report.failures();
    if !failed.is_empty() {
        bail!(TheoremsFailed(failed.into_iter().map(String::from).collect()));
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchFile {
    schema_version: u32,
    runs: Vec<BenchReport>,
    checks: BenchChecks,
}

fn benchmark(ctx: &Ctx, args: &BenchArgs) -> Result<()> {
    let cfg = &ctx.config;
    let runs = (0..args.runs.max(1))
        .map(|_| run_benchmark(&cfg.benchmark, &cfg.training.dims, cfg.training.seed))
        .collect::<unirank::Result<Vec<_>>>()?;
    let checks = BenchChecks::of(&runs);
    for (i, r) in runs.iter().enumerate() {
        ctx.say(format!(
            "run {i}: attention exponent {:.3}  listwise exponent {:.3} (a·k²+b·k R² {:.4})  retrieval exponent {:.3}  model error {:.2e}",
            r.attention_fit.exponent,
            r.lt_fit.exponent,
            r.lt_quadratic.r_squared,
            r.retrieval_fit.exponent,
            r.flop_model_max_rel_err
        ));
    }
    ctx.say(format!(
        "attention in range: {}  retrieval in range: {}  repeats agree: {}",
        checks.attention_in_range,
        checks.retrieval_in_range,
        checks.repeat_agrees.map_or("n/a".into(), |b| b.to_string())
    ));
    let file = BenchFile { schema_version: unirank::bench::BENCH_SCHEMA_VERSION, runs, checks };
    let p = ctx.write("benchmark.json", serde_json::to_string_pretty(&file)?.as_bytes())?;
    ctx.say(format!("wrote {}", p.display()));
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx::new(cli)?;
    match &cli.cmd {
        Cmd::GenWorld => gen_world(&ctx),
        Cmd::Train(a) => train(&ctx, a),
        Cmd::Eval(a) => eval(&ctx, a),
        Cmd::Compare(a) => compare(&ctx, cli, a),
        Cmd::Theorems => theorems(&ctx),
        Cmd::Benchmark(a) => benchmark(&ctx, a),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<TheoremsFailed>().is_some() {
        return 6;
    }
    for cause in e.chain() {
        if let Some(u) = cause.downcast_ref::<unirank::Error>() {
            return match u {
                unirank::Error::Config(_) => 2,
                unirank::Error::NonFiniteLoss { .. } => 3,
                unirank::Error::DimensionMismatch { .. } => 4,
                unirank::Error::WorldMismatch(_) => 5,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

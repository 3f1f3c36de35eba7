use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use unirank::checkpoint::Checkpoint;
use unirank::world::World;

const TINY: &str = r#"{"version": 1, "world": {"n_items": 300, "n_queries": 30, "n_heldout": 10},
 "training": {"steps": 40, "k": 20, "dims": {"d_tok": 8, "hidden": 16, "d": 8, "d_r": 4, "d_model": 16, "n_heads": 2, "layers": 1, "ffn": 16}}}"#;

fn unirank(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unirank"))
        .current_dir(dir)
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = unirank(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn tiny_dir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("tiny.json"), TINY).unwrap();
    d
}

fn with_training(dir: &Path, name: &str, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    edit(&mut v);
    let p = dir.join(name);
    std::fs::write(&p, v.to_string()).unwrap();
    p
}

#[test]
fn gen_world_is_deterministic_and_histogram_recounts() {
    let d = tiny_dir();
    let first = ok(d.path(), &["--config", "tiny.json", "--out", "a", "gen-world"]);
    ok(d.path(), &["--config", "tiny.json", "--out", "b", "gen-world"]);
    let a = std::fs::read(d.path().join("a/world.json")).unwrap();
    assert_eq!(a, std::fs::read(d.path().join("b/world.json")).unwrap());

    let world = World::load(&d.path().join("a/world.json")).unwrap();
    let mut recount = [0usize; 4];
    for q in 0..world.queries().len() {
        for i in 0..world.n_items() {
            recount[world.relevance(q, i).unwrap() as usize] += 1;
        }
    }
    let expect: Vec<String> = recount.iter().enumerate().map(|(g, n)| format!("{g}:{n}")).collect();
    let line = first.lines().find(|l| l.starts_with("grade histogram")).expect("histogram line");
    assert_eq!(line.split_whitespace().skip(2).collect::<Vec<_>>(), expect);
}

#[test]
fn missing_key_exits_2_naming_it() {
    let d = tiny_dir();
    std::fs::write(d.path().join("bad.json"), r#"{"version": 1, "world": {"n_queries": 5}}"#).unwrap();
    let out = unirank(d.path(), &["--config", "bad.json", "gen-world"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_items"));
}

#[test]
fn zero_steps_writes_the_initial_model() {
    let d = tiny_dir();
    let cfg = with_training(d.path(), "zero.json", |v| v["training"]["steps"] = 0.into());
    ok(d.path(), &["-q", "--config", cfg.to_str().unwrap(), "--out", "o", "train"]);
    for tag in ["lt-ttd", "cascade"] {
        let ck = Checkpoint::load(&d.path().join(format!("o/{tag}.ckpt"))).unwrap();
        assert_eq!(ck.state.step, 0);
        assert_eq!(std::fs::read_to_string(d.path().join(format!("o/{tag}.log.jsonl"))).unwrap(), "");
    }
}

#[test]
fn resumed_run_matches_unbroken_run() {
    let d = tiny_dir();
    ok(d.path(), &["-q", "--config", "tiny.json", "--out", "full", "train"]);
    ok(d.path(), &["-q", "--config", "tiny.json", "--out", "split", "train", "--until", "15"]);
    for tag in ["lt-ttd", "cascade"] {
        let ck = format!("split/{tag}.ckpt");
        let log = format!("split/{tag}.log.jsonl");
        ok(d.path(), &["-q", "--out", "split", "train", "--resume", &ck, "--log", &log]);
        let read = |p: String| std::fs::read(d.path().join(p)).unwrap();
        assert_eq!(read(format!("full/{tag}.log.jsonl")), read(format!("split/{tag}.log.jsonl")), "{tag} log");
        assert_eq!(read(format!("full/{tag}.ckpt")), read(format!("split/{tag}.ckpt")), "{tag} checkpoint");
    }
}

#[test]
fn cascade_log_has_two_phases() {
    let d = tiny_dir();
    let cfg = with_training(d.path(), "cascade.json", |v| v["system"] = "cascade".into());
    ok(d.path(), &["-q", "--config", cfg.to_str().unwrap(), "--out", "o", "train"]);
    let text = std::fs::read_to_string(d.path().join("o/cascade.log.jsonl")).unwrap();
    let phases: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["phase"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(phases.len(), 40);
    assert!(phases[..20].iter().all(|p| p == "retrieve"));
    assert!(phases[20..].iter().all(|p| p == "rank"));
    assert!(!d.path().join("o/lt-ttd.ckpt").exists());
}

#[test]
fn non_finite_loss_exits_3_and_keeps_checkpoint() {
    let d = tiny_dir();
    let cfg = with_training(d.path(), "nan.json", |v| {
        v["training"]["lr"] = 1e300.into();
        v["system"] = "lt-ttd".into();
    });
    let out = unirank(d.path(), &["-q", "--config", cfg.to_str().unwrap(), "--out", "o", "train"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let ck = Checkpoint::load(&d.path().join("o/lt-ttd.ckpt")).unwrap();
    assert_eq!(ck.state.step, 0);
}

#[test]
fn eval_reports_are_stable_and_shaped() {
    let d = tiny_dir();
    ok(d.path(), &["-q", "--config", "tiny.json", "--out", "o", "train"]);
    ok(d.path(), &["-q", "--out", "e1", "eval", "o/lt-ttd.ckpt"]);
    ok(d.path(), &["-q", "--out", "e2", "eval", "o/lt-ttd.ckpt"]);
    for f in ["lt-ttd.report.json", "lt-ttd.report.csv"] {
        let read = |dir: &str| std::fs::read(d.path().join(dir).join(f)).unwrap();
        assert_eq!(read("e1"), read("e2"), "{f}");
    }
    let csv = std::fs::read_to_string(d.path().join("e1/lt-ttd.report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10 + 1);

    ok(d.path(), &["-q", "--config", "tiny.json", "--out", "e1", "eval", "--oracle"]);
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("e1/oracle.report.json")).unwrap()).unwrap();
    for v in r["mean_ndcg"].as_array().unwrap() {
        assert!((v.as_f64().unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn eval_dimension_mismatch_exits_4() {
    let d = tiny_dir();
    let cfg = with_training(d.path(), "zero.json", |v| v["training"]["steps"] = 0.into());
    let big = with_training(d.path(), "big.json", |v| v["world"]["n_items"] = 320.into());
    ok(d.path(), &["-q", "--config", cfg.to_str().unwrap(), "--out", "o", "train"]);
    ok(d.path(), &["-q", "--config", big.to_str().unwrap(), "--out", "b", "gen-world"]);
    let out = unirank(d.path(), &["-q", "--out", "o", "eval", "o/lt-ttd.ckpt", "--world", "b/world.json"]);
    assert_eq!(code(&out), 4);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("300") && err.contains("320"), "{err}");
}

#[test]
fn compare_self_and_mismatch() {
    let d = tiny_dir();
    ok(d.path(), &["-q", "--config", "tiny.json", "--out", "o", "train"]);
    ok(d.path(), &["-q", "--out", "c", "compare", "o/lt-ttd.ckpt", "o/lt-ttd.ckpt"]);
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("c/compare.json")).unwrap()).unwrap();
    let pair = &r["pairs"][0];
    assert_eq!(pair["cost_ratio"].as_f64().unwrap(), 1.0);
    let report: serde_json::Value = {
        ok(d.path(), &["-q", "--out", "e", "eval", "o/lt-ttd.ckpt"]);
        serde_json::from_str(&std::fs::read_to_string(d.path().join("e/lt-ttd.report.json")).unwrap()).unwrap()
    };
    let col = report["cutoffs"].as_array().unwrap().iter().position(|c| *c == report["upqe_cutoff"]).unwrap();
    for (q, m) in pair["queries"].as_array().unwrap().iter().zip(report["queries"].as_array().unwrap()) {
        assert!(q["delta_ndcg"].as_array().unwrap().iter().all(|v| v.as_f64().unwrap() == 0.0));
        let (e, n) = (m["e_prop"].as_f64().unwrap(), m["n_relevant"].as_f64().unwrap());
        let cascade_ndcg_k = m["ndcg"][col].as_f64().unwrap();
        match q["upqe"].as_f64() {
            Some(u) => assert!((u - (1.0 - e / n)).abs() < 1e-12),
            None => assert_eq!(cascade_ndcg_k, 0.0),
        }
    }

    let cfg = with_training(d.path(), "zero.json", |v| v["training"]["steps"] = 0.into());
    ok(d.path(), &["-q", "--seed", "3", "--config", cfg.to_str().unwrap(), "--out", "s3", "train"]);
    let out = unirank(d.path(), &["-q", "--out", "c", "compare", "o/lt-ttd.ckpt", "s3/cascade.ckpt"]);
    assert_eq!(code(&out), 5);
}

#[test]
fn compare_pairs_get_a_summary() {
    let d = tiny_dir();
    let cfg = with_training(d.path(), "zero.json", |v| v["training"]["steps"] = 2.into());
    for s in ["1", "2"] {
        ok(d.path(), &["-q", "--seed", s, "--config", cfg.to_str().unwrap(), "--out", &format!("s{s}"), "train"]);
    }
    ok(
        d.path(),
        &["-q", "--out", "c", "compare", "s1/lt-ttd.ckpt", "s1/cascade.ckpt", "s2/lt-ttd.ckpt", "s2/cascade.ckpt"],
    );
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("c/compare.json")).unwrap()).unwrap();
    assert_eq!(r["summary"]["pairs"], 2);
    let out = unirank(d.path(), &["-q", "--out", "c", "compare", "s1/lt-ttd.ckpt", "s1/cascade.ckpt", "s2/lt-ttd.ckpt"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn theorems_name_the_failing_property() {
    let d = tiny_dir();
    let out = unirank(d.path(), &["-q", "--out", "t", "theorems"]);
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("t/theorems.json")).unwrap()).unwrap();
    let failed: Vec<&str> = r["properties"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|p| !p["passed"].as_bool().unwrap())
        .map(|p| p["name"].as_str().unwrap())
        .collect();
    if failed.is_empty() {
        assert_eq!(code(&out), 0);
    } else {
        assert_eq!(code(&out), 6);
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(failed.iter().all(|f| err.contains(f)), "{err}");
    }
}

#[test]
fn benchmark_writes_a_report() {
    let d = tiny_dir();
    std::fs::write(
        d.path().join("bench.json"),
        r#"{"version": 1, "world": {"n_items": 10, "n_queries": 2},
            "benchmark": {"k_grid": [4, 8], "n_grid": [100, 200], "repeats": 1}}"#,
    )
    .unwrap();
    ok(d.path(), &["-q", "--config", "bench.json", "--out", "o", "benchmark", "--runs", "2"]);
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("o/benchmark.json")).unwrap()).unwrap();
    assert_eq!(r["runs"].as_array().unwrap().len(), 2);
    assert!(r["checks"]["attention_spread"].as_f64().is_some());
}

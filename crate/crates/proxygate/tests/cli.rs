use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use proxygate::commands::{load_model, run_checks};
use proxygate::config::Run;
use proxygate::formats::{self, Checkpoint};
use proxygate::{cmd_check, cmd_eval, cmd_preset, cmd_sweep, cmd_train, CliError};
use serde_json::{json, Value};
use tempfile::TempDir;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proxygate"))
        .args(args)
        .current_dir(dir)
        .env_remove("PROXYGATE_WORKERS")
        .output()
        .unwrap()
}

/// Forbidden-task preset with a short training budget.
fn preset(steps: u64, edit: impl FnOnce(&mut Value)) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    cmd_preset(&dir.path().join("task"), 42).unwrap();
    let path = dir.path().join("task/config.json");
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    cfg["train"]["total_env_steps"] = json!(steps);
    cfg["prompts"]["test_size"] = json!(32);
    cfg["eval"]["best_of_n"] = json!(4);
    edit(&mut cfg);
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    (dir, path)
}

#[test]
fn train_writes_every_artifact() {
    let (dir, cfg) = preset(2_000, |_| {});
    let out = dir.path().join("run");
    let m = cmd_train(&cfg, &out, None, 1).unwrap();
    for key in ["checkpoint", "metrics", "trace", "manifest"] {
        assert!(m.artifacts[key].exists(), "{key} missing");
    }
    let metrics = fs::read_to_string(&m.artifacts["metrics"]).unwrap();
    assert!(metrics.starts_with(
        "step,episodes,mean_reward,mean_len,reject_rate,masked_frac,policy_loss,value_loss,entropy,clip_frac\n"
    ));
    let trace = fs::read_to_string(&m.artifacts["trace"]).unwrap();
    let first: Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    for field in [
        "episode",
        "position",
        "candidate",
        "action",
        "logp",
        "value",
        "masked",
        "reward",
    ] {
        assert!(first.get(field).is_some(), "trace lacks {field}");
    }
    assert_eq!(m.seed, 42);
    assert_eq!(m.run_id, format!("{}-42", &m.config_hash[..12]));
}

#[test]
fn binary_train_exit_zero() {
    let (dir, _) = preset(500, |_| {});
    let o = bin(
        dir.path(),
        &["train", "--config", "task/config.json", "--out", "r"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("r/manifest.json").exists());
}

#[test]
fn invalid_p_t_names_the_field() {
    let (dir, _) = preset(500, |c| c["skam"]["p_t"] = json!(1.5));
    let o = bin(
        dir.path(),
        &["train", "--config", "task/config.json", "--out", "r"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("p_t"));
    assert!(!dir.path().join("r").exists());
}

#[test]
fn bad_flags_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bin(dir.path(), &["train"]).status.code(), Some(1));
    assert_eq!(bin(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn same_seed_same_outputs_regardless_of_workers() {
    let (dir, cfg) = preset(3_000, |_| {});
    let a = cmd_train(&cfg, &dir.path().join("a"), Some(5), 1).unwrap();
    let b = cmd_train(&cfg, &dir.path().join("b"), Some(5), 1).unwrap();
    let c = cmd_train(&cfg, &dir.path().join("c"), Some(5), 4).unwrap();
    let read = |m: &proxygate::RunManifest| fs::read(&m.artifacts["metrics"]).unwrap();
    assert_eq!(a.config_hash, b.config_hash);
    assert_eq!(read(&a), read(&b));
    assert_eq!(read(&a), read(&c));
    let d = cmd_train(&cfg, &dir.path().join("d"), Some(6), 1).unwrap();
    assert_ne!(a.config_hash, d.config_hash);
}

#[test]
fn rerun_into_same_directory_is_idempotent() {
    let (dir, cfg) = preset(1_000, |_| {});
    let out = dir.path().join("r");
    cmd_train(&cfg, &out, None, 1).unwrap();
    let first: Vec<Vec<u8>> = [
        "manifest.json",
        "metrics.csv",
        "checkpoint.json",
        "trace.jsonl",
    ]
    .iter()
    .map(|f| fs::read(out.join(f)).unwrap())
    .collect();
    cmd_train(&cfg, &out, None, 1).unwrap();
    for (f, bytes) in [
        "manifest.json",
        "metrics.csv",
        "checkpoint.json",
        "trace.jsonl",
    ]
    .iter()
    .zip(first)
    {
        assert_eq!(fs::read(out.join(f)).unwrap(), bytes, "{f} changed");
    }
}

#[test]
fn seed_precedence() {
    let (_dir, cfg) = preset(500, |c| {
        c.as_object_mut().unwrap().remove("seed");
    });
    assert_eq!(Run::load(&cfg, None).unwrap().seed, 42);
    assert_eq!(Run::load(&cfg, Some(3)).unwrap().seed, 3);
    let (_dir, cfg) = preset(500, |c| c["seed"] = json!(11));
    assert_eq!(Run::load(&cfg, None).unwrap().seed, 11);
    assert_eq!(Run::load(&cfg, Some(3)).unwrap().seed, 3);
}

#[test]
fn manifest_config_reproduces_the_run() {
    let (dir, cfg) = preset(1_000, |_| {});
    let m = cmd_train(&cfg, &dir.path().join("r"), Some(8), 1).unwrap();
    let again = dir.path().join("again.json");
    fs::write(&again, serde_json::to_string(&m.config).unwrap()).unwrap();
    let m2 = cmd_train(&again, &dir.path().join("r2"), None, 1).unwrap();
    assert_eq!(m.config_hash, m2.config_hash);
    assert_eq!(
        fs::read(&m.artifacts["metrics"]).unwrap(),
        fs::read(&m2.artifacts["metrics"]).unwrap()
    );
}

#[test]
fn eval_reports_shift_over_baseline() {
    let (dir, cfg) = preset(20_000, |_| {});
    let m = cmd_train(&cfg, &dir.path().join("r"), None, 1).unwrap();
    let r = cmd_eval(
        &m.artifacts["checkpoint"],
        &cfg,
        &dir.path().join("e"),
        None,
        2,
    )
    .unwrap();
    assert!(r.mean > r.baseline_mean);
    assert!(r.win_rate > 0.5);
    let summary = fs::read_to_string(&r.manifest.artifacts["summary"]).unwrap();
    assert!(summary.starts_with("system,mean,stddev,std_error,count\nproxy,"));
    let hist = fs::read_to_string(&r.manifest.artifacts["histogram"]).unwrap();
    assert!(hist.starts_with("bin_left,bin_right,count\n"));
    let scores = fs::read_to_string(&r.manifest.artifacts["scores"]).unwrap();
    assert_eq!(scores.lines().count(), 32);

    // evaluating twice gives identical summaries
    let r2 = cmd_eval(
        &m.artifacts["checkpoint"],
        &cfg,
        &dir.path().join("e2"),
        None,
        1,
    )
    .unwrap();
    assert_eq!(
        summary,
        fs::read_to_string(&r2.manifest.artifacts["summary"]).unwrap()
    );
}

#[test]
fn eval_with_full_masking_equals_baseline() {
    let (dir, cfg) = preset(2_000, |_| {});
    let m = cmd_train(&cfg, &dir.path().join("r"), None, 1).unwrap();
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["skam"]["p_t"] = json!(1.0);
    let masked = dir.path().join("task/masked.json");
    fs::write(&masked, v.to_string()).unwrap();
    let r = cmd_eval(
        &m.artifacts["checkpoint"],
        &masked,
        &dir.path().join("e"),
        None,
        1,
    )
    .unwrap();
    assert_eq!(r.mean, r.baseline_mean);
    assert_eq!(r.win_rate, 0.5);
}

#[test]
fn incompatible_checkpoints_are_rejected() {
    let (dir, cfg) = preset(500, |_| {});
    let m = cmd_train(&cfg, &dir.path().join("r"), None, 1).unwrap();
    let path = &m.artifacts["checkpoint"];
    let mut ck: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();

    let mut wrong = ck.clone();
    wrong["embed_dim"] = json!(3);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, wrong.to_string()).unwrap();
    let err = cmd_eval(&bad, &cfg, &dir.path().join("e"), None, 1).unwrap_err();
    assert!(matches!(err, CliError::IncompatibleCheckpoint(_)), "{err}");
    assert_eq!(err.exit_code(), 1);

    ck.as_object_mut().unwrap().remove("version");
    fs::write(&bad, ck.to_string()).unwrap();
    let err = cmd_eval(&bad, &cfg, &dir.path().join("e"), None, 1).unwrap_err();
    assert_eq!(err.to_string(), "unversioned checkpoint");
}

#[test]
fn checkpoint_round_trip() {
    let (dir, cfg) = preset(1_000, |_| {});
    let m = cmd_train(&cfg, &dir.path().join("r"), None, 1).unwrap();
    let run = Run::load(&cfg, None).unwrap();
    let model = load_model(&run, &m.artifacts["checkpoint"]).unwrap();
    let ck = formats::read_checkpoint(&m.artifacts["checkpoint"]).unwrap();
    assert_eq!(Checkpoint::from_model(&model), ck);
    assert_eq!(ck.w1.len(), ck.h);
    assert_eq!(ck.w1[0].len(), ck.d);
}

#[test]
fn sweep_emits_one_cell_per_combination() {
    let (dir, cfg) = preset(1_000, |_| {});
    let grid = dir.path().join("grid.json");
    fs::write(&grid, r#"{"p_t": [0.1, 0.001], "budgets": [64, "full"]}"#).unwrap();
    let (table, m) = cmd_sweep(&cfg, &grid, &dir.path().join("s"), None, 2).unwrap();
    assert_eq!(table.cells.len(), 4);
    let csv = fs::read_to_string(&m.artifacts["sweep"]).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "p_t,temperature,64,full");
    assert_eq!(lines.len(), 3);
    let data_cells: usize = lines[1..].iter().map(|l| l.split(',').count() - 2).sum();
    assert_eq!(data_cells, 4);

    fs::write(&grid, r#"{"p_t": [], "budgets": ["full"]}"#).unwrap();
    let err = cmd_sweep(&cfg, &grid, &dir.path().join("s2"), None, 1).unwrap_err();
    assert!(err.to_string().contains("p_t"));
}

#[test]
fn check_passes_on_default_config() {
    let (dir, cfg) = preset(500, |_| {});
    let report = cmd_check(&cfg, None).unwrap();
    assert_eq!(report.checks.len(), 3);
    assert!(report.passed());
    let o = bin(dir.path(), &["check", "--config", "task/config.json"]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 3);
}

#[test]
fn check_catches_corrupted_gradient() {
    let (_dir, cfg) = preset(500, |_| {});
    let run = Run::load(&cfg, None).unwrap();
    let corrupted = |p: &proxygate_core::ProxyParams, f: &[f64], gl: [f64; 2], gv: f64| {
        let mut g = p.backward(f, gl, gv);
        g.b1[0] *= 1.01;
        g
    };
    let report = run_checks(&run, &corrupted, 3).unwrap();
    let grad = report.checks.iter().find(|c| c.name == "gradient").unwrap();
    assert!(!grad.passed);
    assert!(!report.passed());
    assert_eq!(CliError::CheckFailed("gradient".into()).exit_code(), 3);
}

#[test]
fn check_with_full_masking_reports_point_mass() {
    let (_dir, cfg) = preset(500, |c| c["skam"]["p_t"] = json!(1.0));
    let report = cmd_check(&cfg, None).unwrap();
    let sel = report
        .checks
        .iter()
        .find(|c| c.name == "selection_distribution")
        .unwrap();
    assert!(sel.detail.contains("point mass"), "{}", sel.detail);
}

#[test]
fn ngram_generator_from_corpus_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("corpus.txt"), "0 1 2 3\n1 2 3\n\n0 0 1\n").unwrap();
    fs::write(
        dir.path().join("gen.json"),
        r#"{"kind": "ngram", "vocab_size": 4, "eos_id": 3,
            "ngram": {"order": 2, "alpha": 0.5, "corpus_path": "corpus.txt"},
            "hidden_dim": 5}"#,
    )
    .unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"generator": "gen.json",
            "oracle": {"kind": "forbidden", "tokens": [0], "penalty": 1.0},
            "train": {"total_env_steps": 300},
            "prompts": {"train_size": 8, "test_size": 4}}"#,
    )
    .unwrap();
    let m = cmd_train(&dir.path().join("cfg.json"), &dir.path().join("r"), None, 1).unwrap();
    assert_eq!(m.seed, 42);
    // the corpus is inlined in the materialised config
    let text = serde_json::to_string(&m.config).unwrap();
    assert!(
        text.contains("\"corpus\":[[0,1,2,3],[1,2,3],[0,0,1]]"),
        "{text}"
    );

    fs::write(dir.path().join("corpus.txt"), "0 1 x\n").unwrap();
    let err = Run::load(&dir.path().join("cfg.json"), None).unwrap_err();
    assert!(err.to_string().contains("line 1"), "{err}");
}

#[test]
fn unknown_config_fields_are_rejected() {
    let (dir, _) = preset(500, |c| c["bogus"] = json!(1));
    let o = bin(
        dir.path(),
        &["train", "--config", "task/config.json", "--out", "r"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

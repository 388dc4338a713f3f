//! The `train`, `eval`, `sweep`, `check` and `preset` commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use proxygate_core::environment::allowed_actions;
use proxygate_core::experiments::{
    best_of_n, evaluate, mc_oracle_check, summarize, sweep, Budget, ForbiddenTask, SweepGrid,
    SweepTable,
};
use proxygate_core::generator::{PrefixMatch, TableRow};
use proxygate_core::proxy::{gradient_check_with, ProxyParams};
use proxygate_core::rewards::win_rate;
use proxygate_core::trainer::train;
use proxygate_core::{
    AllowedActions, AlwaysAccept, GateEnv, Generator, ProbVector, ProxyModel, TokenId, Vocab,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{GeneratorSource, Run, RunConfig};
use crate::error::{CliError, Result};
use crate::formats::{self, Checkpoint, ScoreRecord};
use crate::genspec::GeneratorSpec;
use crate::pool::Workers;
use crate::precise;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    pub config: RunConfig,
}

struct OutDir {
    root: PathBuf,
    artifacts: BTreeMap<String, PathBuf>,
}

impl OutDir {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(CliError::io(root))?;
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: BTreeMap::new(),
        })
    }

    fn write(&mut self, key: &str, file: &str, contents: &str) -> Result<()> {
        let path = self.root.join(file);
        formats::write(&path, contents)?;
        self.artifacts.insert(key.to_string(), path);
        Ok(())
    }

    fn finish(
        mut self,
        run: &Run,
        command: &str,
        metrics: BTreeMap<String, f64>,
    ) -> Result<RunManifest> {
        let path = self.root.join("manifest.json");
        self.artifacts.insert("manifest".into(), path.clone());
        let manifest = RunManifest {
            run_id: run.run_id(),
            command: command.to_string(),
            config_hash: run.config_hash.clone(),
            seed: run.seed,
            artifacts: self.artifacts,
            metrics,
            config: run.config.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifests serialise");
        formats::write(&path, &text)?;
        Ok(manifest)
    }
}

pub fn cmd_train(
    config_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    workers: usize,
) -> Result<RunManifest> {
    let run = Run::load(config_path, seed)?;
    let outcome = train(&run.setup().train_setup(), &Workers::new(workers))?;
    let mut out = OutDir::create(out_dir)?;
    let checkpoint = Checkpoint::from_model(&outcome.model);
    out.write(
        "checkpoint",
        "checkpoint.json",
        &serde_json::to_string_pretty(&checkpoint).expect("checkpoints serialise"),
    )?;
    out.write(
        "metrics",
        "metrics.csv",
        &formats::metrics_csv(&outcome.metrics),
    )?;
    out.write(
        "trace",
        "trace.jsonl",
        &formats::trace_jsonl(&outcome.last_batch),
    )?;
    let mut metrics = BTreeMap::new();
    if let Some(last) = outcome.metrics.last() {
        metrics.insert("final_mean_reward".into(), last.mean_reward);
        metrics.insert("env_steps".into(), last.step as f64);
        metrics.insert("episodes".into(), last.episodes as f64);
    }
    out.finish(&run, "train", metrics)
}

pub fn load_model(run: &Run, checkpoint: &Path) -> Result<ProxyModel> {
    formats::read_checkpoint(checkpoint)?.to_model(&run.generator, run.config.proxy.embed_dim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean: f64,
    pub baseline_mean: f64,
    pub win_rate: f64,
    pub best_of_n_mean: Option<f64>,
    pub manifest: RunManifest,
}

pub fn cmd_eval(
    checkpoint: &Path,
    config_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    workers: usize,
) -> Result<EvalReport> {
    let run = Run::load(config_path, seed)?;
    let model = load_model(&run, checkpoint)?;
    let pool = Workers::new(workers);
    let env = run.setup().env()?;
    let prompts = &run.test_prompts.prompts;
    let bins = run.config.eval.histogram_bins;

    let gated = evaluate(&env, &model, prompts, bins, &pool)?;
    let baseline = evaluate(&env, &AlwaysAccept, prompts, bins, &pool)?;
    let wr = win_rate(&gated.scores, &baseline.scores)?;
    let bon = match run.config.eval.best_of_n {
        0 => None,
        n => Some(summarize(
            &best_of_n(&env, prompts, n, run.seed, &pool)?,
            bins,
        )),
    };

    let records: Vec<ScoreRecord> = gated
        .episodes
        .iter()
        .zip(&gated.scores)
        .zip(&baseline.scores)
        .enumerate()
        .map(|(i, ((t, &score), &base))| ScoreRecord {
            prompt_index: i,
            prompt: t.prompt.clone(),
            response: t.response.clone(),
            score,
            baseline_score: Some(base),
        })
        .collect();
    let mut rows = vec![
        ("proxy", &gated.summary),
        ("always_accept", &baseline.summary),
    ];
    if let Some(b) = &bon {
        rows.push(("best_of_n", b));
    }

    let mut out = OutDir::create(out_dir)?;
    out.write("scores", "scores.jsonl", &formats::scores_jsonl(&records))?;
    out.write("summary", "summary.csv", &formats::summary_csv(&rows))?;
    out.write(
        "histogram",
        "histogram.csv",
        &formats::histogram_csv(&gated.summary.histogram),
    )?;
    out.write(
        "baseline_histogram",
        "baseline_histogram.csv",
        &formats::histogram_csv(&baseline.summary.histogram),
    )?;
    out.write(
        "trace",
        "trace.jsonl",
        &formats::trace_jsonl(&gated.episodes),
    )?;

    let mut metrics = BTreeMap::from([
        ("mean".to_string(), gated.summary.mean),
        ("baseline_mean".to_string(), baseline.summary.mean),
        ("win_rate".to_string(), wr),
    ]);
    if let Some(b) = &bon {
        metrics.insert("best_of_n_mean".into(), b.mean);
    }
    let manifest = out.finish(&run, "eval", metrics)?;
    Ok(EvalReport {
        mean: gated.summary.mean,
        baseline_mean: baseline.summary.mean,
        win_rate: wr,
        best_of_n_mean: bon.map(|b| b.mean),
        manifest,
    })
}

pub fn load_grid(path: &Path) -> Result<SweepGrid> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let grid: SweepGrid = serde_json::from_str(&text).map_err(CliError::json(path))?;
    grid.validate()?;
    Ok(grid)
}

pub fn cmd_sweep(
    config_path: &Path,
    grid_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    workers: usize,
) -> Result<(SweepTable, RunManifest)> {
    let run = Run::load(config_path, seed)?;
    let grid = load_grid(grid_path)?;
    let table = sweep(&grid, &run.setup(), &Workers::new(workers))?;
    let mut out = OutDir::create(out_dir)?;
    out.write("sweep", "sweep.csv", &table.to_csv())?;
    let cells: String = table
        .cells
        .iter()
        .map(|c| serde_json::to_string(c).expect("cells serialise") + "\n")
        .collect();
    out.write("cells", "sweep_cells.jsonl", &cells)?;
    let manifest = out.finish(&run, "sweep", BTreeMap::new())?;
    Ok((table, manifest))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub checks: Vec<CheckResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                format!("{tag} {}: {}", c.name, c.detail)
            })
            .collect()
    }
}

pub type BackwardFn = dyn Fn(&ProxyParams, &[f64], [f64; 2], f64) -> ProxyParams;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const MC_TOLERANCE: f64 = 0.01;

/// Random parameters with nonzero biases and matching feature vectors.
pub fn random_grad_case(d: usize, h: usize, seed: u64) -> (ProxyParams, Vec<f64>, [f64; 2], f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ProxyParams::init(d, h, rng.random());
    for b in p.b1.iter_mut().chain(p.b_act.iter_mut()) {
        *b = rng.random_range(-0.5..0.5);
    }
    p.b_val = rng.random_range(-0.5..0.5);
    let f = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gl = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    (p, f, gl, rng.random_range(-1.0..1.0))
}

/// Six-token table generator with one fixed, well-spread distribution.
pub fn tiny_generator() -> Generator {
    let vocab = Vocab::new(6, TokenId(5), None).expect("valid vocab");
    Generator::table(
        vocab,
        [(
            Vec::new(),
            TableRow {
                logits: vec![0.9, 0.6, 0.3, 0.1, -0.2, -0.4],
                hidden: None,
            },
        )],
        PrefixMatch::Suffix,
        7,
        8,
    )
    .expect("valid table")
}

/// Runs the gradient, selection-distribution and masking checks at the
/// configured shapes and `p_t`.
pub fn run_checks(run: &Run, backward: &BackwardFn, draws: usize) -> Result<CheckReport> {
    let cfg = &run.config;
    let mut checks = Vec::new();

    let d =
        run.generator.hidden_dim() + cfg.proxy.embed_dim + proxygate_core::proxy::SCALAR_FEATURES;
    let worst = (0..draws as u64)
        .map(|k| {
            let (p, f, gl, gv) = random_grad_case(d, cfg.proxy.hidden_size, run.seed ^ k);
            gradient_check_with(
                &p,
                &f,
                gl,
                gv,
                GRAD_STEP,
                backward,
                precise::slope(&f, gl, gv),
            )
            .max_rel_error
        })
        .fold(0.0, f64::max);
    checks.push(CheckResult {
        name: "gradient",
        passed: worst < GRAD_TOLERANCE,
        detail: format!("{draws} draws, max relative error {worst:.3e}"),
    });

    let tiny = tiny_generator();
    let oracle = proxygate_core::OracleSpec::Forbidden {
        tokens: vec![TokenId(0)],
        penalty: 1.0,
    };
    let skam = proxygate_core::SkamConfig {
        p_t: cfg.skam.p_t,
        ..Default::default()
    };
    let env = GateEnv::new(&tiny, &skam, &oracle)?;
    let proxy = ProxyModel::init(6, 7, cfg.proxy.embed_dim, cfg.proxy.hidden_size, run.seed);
    let report = mc_oracle_check(&env, &proxy, &[], 100_000, run.seed)?;
    let head = report.analytic.get(report.analytic.argmax());
    let shape = if head == 1.0 {
        "point mass".to_string()
    } else {
        format!("max analytic mass {head:.4}")
    };
    checks.push(CheckResult {
        name: "selection_distribution",
        passed: report.max_deviation < MC_TOLERANCE,
        detail: format!(
            "{} trials, max deviation {:.4}, {shape}",
            report.trials, report.max_deviation
        ),
    });

    let violations = mask_property_violations(2_000, run.seed);
    checks.push(CheckResult {
        name: "skam_mask",
        passed: violations == 0,
        detail: format!("2000 random cases, {violations} violations"),
    });
    Ok(CheckReport { checks })
}

/// Compares `allowed_actions` with a direct evaluation of the masking rule
/// on random distributions, rejected sets and thresholds.
pub fn mask_property_violations(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for _ in 0..cases {
        let v = rng.random_range(2..12usize);
        let raw: Vec<f64> = (0..v).map(|_| rng.random::<f64>().powi(3)).collect();
        let total: f64 = raw.iter().sum();
        let probs = match ProbVector::new(raw.iter().map(|x| x / total).collect()) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let pool = probs.ranked();
        let k = rng.random_range(0..v);
        let rejected = &pool[..k];
        let p_t = match rng.random_range(0..3) {
            0 => 1.0 / (v - k) as f64,
            1 => rng.random::<f64>() * 0.2,
            _ => rng.random::<f64>(),
        };
        let remaining: Vec<f64> = pool[k..].iter().map(|&t| probs.get(t)).collect();
        let mass: f64 = remaining.iter().sum();
        let expect_masked = remaining.len() == 1 || mass <= p_t * remaining.len() as f64;
        let got = allowed_actions(&probs, &pool, rejected, p_t);
        if (got == AllowedActions::AcceptOnly) != expect_masked {
            violations += 1;
        }
    }
    violations
}

pub fn cmd_check(config_path: &Path, seed: Option<u64>) -> Result<CheckReport> {
    let run = Run::load(config_path, seed)?;
    let report = run_checks(&run, &|p, f, gl, gv| p.backward(f, gl, gv), 20)?;
    if report.passed() {
        Ok(report)
    } else {
        for line in report.lines() {
            eprintln!("{line}");
        }
        Err(CliError::CheckFailed(
            report
                .checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| c.name)
                .collect::<Vec<_>>()
                .join(", "),
        ))
    }
}

/// Writes `generator.json`, `config.json` and `grid.json` for the
/// forbidden-token task.
pub fn cmd_preset(out_dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    let task = ForbiddenTask::new(seed)?;
    let spec = GeneratorSpec::from_table(&task.generator).expect("the task uses a table generator");
    let config = RunConfig {
        generator: GeneratorSource::Path("generator.json".into()),
        skam: task.skam,
        train: task.train,
        proxy: task.proxy,
        oracle: task.oracle,
        prompts: task.prompts,
        eval: Default::default(),
        seed: Some(seed),
    };
    let grid = SweepGrid {
        p_t: vec![0.1, 0.01, 0.001],
        temperatures: vec![0.25, 1.0],
        budgets: vec![
            Budget::Episodes(500),
            Budget::Episodes(1000),
            Budget::Episodes(2000),
            Budget::FULL,
        ],
    };
    fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    let files = [
        ("generator.json", serde_json::to_string_pretty(&spec)),
        ("config.json", serde_json::to_string_pretty(&config)),
        ("grid.json", serde_json::to_string_pretty(&grid)),
    ];
    let mut paths = Vec::new();
    for (name, text) in files {
        let path = out_dir.join(name);
        formats::write(&path, &text.expect("presets serialise"))?;
        paths.push(path);
    }
    Ok(paths)
}

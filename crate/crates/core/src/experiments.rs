//! Evaluation protocols: gated greedy evaluation, the always-accept and
//! best-of-n baselines, hyper-parameter sweeps, the Monte Carlo check of the
//! per-position selection distribution, and an exhaustive search for the
//! best achievable gate.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{
    allowed_actions, decide, greedy_action, position_selection_distribution, run_episode,
    sample_action, sample_decode, sample_from_pool, Action, AllowedActions, GateEnv, SkamConfig,
};
use crate::error::{invalid, Result};
use crate::generator::{
    apply_temperature, nucleus_filter, Generator, PrefixMatch, ProbVector, TableRow, TokenId, Vocab,
};
use crate::math;
use crate::parallel::ParallelMap;
use crate::proxy::{GatePolicy, ProxyModel};
use crate::rewards::{OracleSpec, RewardOracle};
use crate::trainer::{train, ProxyConfig, TrainConfig, TrainSetup, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub prompts: Vec<Vec<TokenId>>,
    pub split: Split,
}

/// Sizes and lengths of the synthetic prompt sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            train_size: 512,
            test_size: 128,
            min_len: 1,
            max_len: 3,
            seed: 7,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.test_size == 0 {
            return Err(invalid(
                "prompts",
                "train_size and test_size must be positive",
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(invalid("prompts", "need 1 <= min_len <= max_len"));
        }
        Ok(())
    }

    pub fn build(
        &self,
        generator: &Generator,
        skam: &SkamConfig,
    ) -> Result<(PromptSet, PromptSet)> {
        self.validate()?;
        let make = |split, count, stream| {
            synthetic_prompts(
                generator,
                skam.temperature,
                skam.top_p,
                count,
                self.min_len,
                self.max_len,
                math::mix_seed(self.seed, 0x9A, stream),
            )
            .map(|prompts| PromptSet { prompts, split })
        };
        Ok((
            make(Split::Train, self.train_size, 0)?,
            make(Split::Test, self.test_size, 1)?,
        ))
    }
}

/// Random prompts sampled from the generator itself (EOS excluded), with
/// lengths uniform in `[min_len, max_len]`.
pub fn synthetic_prompts(
    generator: &Generator,
    temperature: f64,
    top_p: f64,
    count: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eos = generator.eos();
    (0..count)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            let mut prompt = Vec::with_capacity(len);
            while prompt.len() < len {
                let probs = apply_temperature(&generator.logits(&prompt)?, temperature)?;
                let pool: Vec<TokenId> = nucleus_filter(&probs, top_p)?
                    .into_iter()
                    .filter(|&t| t != eos)
                    .collect();
                let t = if pool.is_empty() {
                    probs
                        .ranked()
                        .into_iter()
                        .find(|&t| t != eos)
                        .unwrap_or(eos)
                } else {
                    sample_from_pool(&probs, &pool, &mut rng)
                };
                prompt.push(t);
            }
            Ok(prompt)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub stddev: f64,
    pub count: usize,
    pub histogram: Vec<HistogramBin>,
}

impl ScoreSummary {
    pub fn standard_error(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.stddev / math::sqrt(self.count as f64)
        }
    }
}

/// Mean, spread and an equal-width histogram over `[min, max]`. A constant
/// sample gets a single unit-width bin centred on the value.
pub fn summarize(scores: &[f64], bins: usize) -> ScoreSummary {
    let n = scores.len();
    let mean = math::mean(scores);
    let stddev = if n > 1 {
        math::sqrt(scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64)
    } else {
        0.0
    };
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let histogram = if n == 0 {
        Vec::new()
    } else if hi - lo <= 0.0 || bins <= 1 {
        let (left, right) = if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        };
        vec![HistogramBin {
            left,
            right,
            count: n,
        }]
    } else {
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &s in scores {
            let i = (((s - lo) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(i, count)| HistogramBin {
                left: lo + i as f64 * width,
                right: if i + 1 == bins {
                    hi
                } else {
                    lo + (i + 1) as f64 * width
                },
                count,
            })
            .collect()
    };
    ScoreSummary {
        mean,
        stddev,
        count: n,
        histogram,
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub scores: Vec<f64>,
    pub episodes: Vec<Trajectory>,
    pub summary: ScoreSummary,
}

impl Evaluation {
    pub fn responses(&self) -> impl Iterator<Item = &[TokenId]> {
        self.episodes.iter().map(|t| t.response.as_slice())
    }
}

pub const DEFAULT_HISTOGRAM_BINS: usize = 20;

/// Greedy gated decoding of every prompt: the proxy takes its more likely
/// action wherever rejection is allowed.
pub fn evaluate<P: GatePolicy + ?Sized, M: ParallelMap>(
    env: &GateEnv<'_>,
    policy: &P,
    prompts: &[Vec<TokenId>],
    bins: usize,
    runner: &M,
) -> Result<Evaluation> {
    let episodes = runner
        .map(prompts, |_, prompt| {
            run_episode(env, policy, prompt, greedy_action)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = episodes
        .iter()
        .map(|t| env.oracle.score(&t.prompt, &t.response))
        .collect();
    let summary = summarize(&scores, bins);
    Ok(Evaluation {
        scores,
        episodes,
        summary,
    })
}

/// Best oracle score among `n` ungated nucleus samples, per prompt.
pub fn best_of_n<M: ParallelMap>(
    env: &GateEnv<'_>,
    prompts: &[Vec<TokenId>],
    n: usize,
    seed: u64,
    runner: &M,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(invalid("n", "best-of-n needs n >= 1"));
    }
    runner
        .map(prompts, |i, prompt| {
            let mut best = f64::NEG_INFINITY;
            for j in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(math::mix_seed(seed, i as u64, j as u64));
                let response = sample_decode(env, prompt, &mut rng)?;
                best = best.max(env.oracle.score(prompt, &response));
            }
            Ok(best)
        })
        .into_iter()
        .collect()
}

/// Best score any sequence of gate decisions can reach from `prompt`.
///
/// Depth-first search over the tokens the gate can select at each position
/// (the pool head, and every later candidate as long as rejection stays
/// allowed), pruned with the oracle's upper bound when it provides one.
/// Fails once `max_nodes` positions have been expanded.
pub fn optimal_gate_score(env: &GateEnv<'_>, prompt: &[TokenId], max_nodes: usize) -> Result<f64> {
    struct Search<'e, 'a> {
        env: &'e GateEnv<'a>,
        prompt: &'e [TokenId],
        best: f64,
        nodes: usize,
        max_nodes: usize,
    }

    impl Search<'_, '_> {
        fn finish(&mut self, response: &[TokenId]) {
            let s = self.env.oracle.score(self.prompt, response);
            if s > self.best {
                self.best = s;
            }
        }

        fn visit(&mut self, response: &mut Vec<TokenId>, decisions: usize) -> Result<()> {
            if let Some(bound) = self.env.oracle.upper_bound(self.prompt, response) {
                if bound <= self.best {
                    return Ok(());
                }
            }
            self.nodes += 1;
            if self.nodes > self.max_nodes {
                return Err(invalid(
                    "max_nodes",
                    "exhaustive gate search exceeded its budget",
                ));
            }
            let cfg = self.env.config;
            let mut prefix = self.prompt.to_vec();
            prefix.extend_from_slice(response);
            let (probs, pool) = self.env.position_distribution(&prefix)?;
            let budget = cfg.max_decisions.unwrap_or(usize::MAX);
            let eos = self.env.generator.eos();

            let mut children = Vec::new();
            for depth in 0..pool.len() {
                let used = decisions + depth + 1;
                children.push((pool[depth], used));
                if used >= budget {
                    // rejecting here would end the episode with the current response
                    self.finish(response);
                    break;
                }
                if allowed_actions(&probs, &pool, &pool[..depth], cfg.p_t)
                    == AllowedActions::AcceptOnly
                {
                    break;
                }
            }
            // most promising first so the bound prunes early
            let mut keyed: Vec<(f64, TokenId, usize)> = children
                .into_iter()
                .map(|(t, used)| {
                    let mut r = response.clone();
                    if t != eos {
                        r.push(t);
                    }
                    let key = self
                        .env
                        .oracle
                        .upper_bound(self.prompt, &r)
                        .unwrap_or(f64::INFINITY);
                    (key, t, used)
                })
                .collect();
            keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(core::cmp::Ordering::Equal));
            for (_, t, used) in keyed {
                if t == eos {
                    self.finish(response);
                    continue;
                }
                response.push(t);
                if response.len() >= cfg.max_response_len || used >= budget {
                    self.finish(response);
                } else {
                    self.visit(response, used)?;
                }
                response.pop();
            }
            Ok(())
        }
    }

    let mut search = Search {
        env,
        prompt,
        best: f64::NEG_INFINITY,
        nodes: 0,
        max_nodes,
    };
    search.visit(&mut Vec::new(), 0)?;
    Ok(search.best)
}

/// Comparison of the analytic selection distribution with Monte Carlo
/// frequencies of the first accepted token.
#[derive(Debug, Clone, PartialEq)]
pub struct McReport {
    pub analytic: ProbVector,
    pub empirical: Vec<f64>,
    pub max_deviation: f64,
    pub trials: usize,
    /// Every token's frequency lies within three standard errors of its
    /// analytic probability (exact match where the probability is 0 or 1).
    pub within_3se: bool,
}

pub fn mc_oracle_check<P: GatePolicy + ?Sized>(
    env: &GateEnv<'_>,
    policy: &P,
    prefix: &[TokenId],
    trials: usize,
    seed: u64,
) -> Result<McReport> {
    if trials == 0 {
        return Err(invalid("trials", "must be positive"));
    }
    let start = env.reset(prefix)?;
    let vocab = env.generator.vocab_size();

    // reject probability of each candidate at the depth where it is proposed
    let mut reject_probs = vec![0.0; vocab];
    let mut walk = start.clone();
    for depth in 0..start.pool.len() {
        walk.rejected = start.pool[..depth].to_vec();
        walk.candidate = start.pool[depth];
        let (_, out) = policy.evaluate(&env.observation(&walk));
        reject_probs[walk.candidate.index()] = out.action_probs[1];
    }
    let analytic =
        position_selection_distribution(&start.probs, &start.pool, env.config.p_t, &reject_probs)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; vocab];
    for _ in 0..trials {
        let mut state = start.clone();
        loop {
            let d = decide(env, policy, &state, |out| sample_action(out, &mut rng))?;
            if d.action == Action::Accept {
                counts[state.candidate.index()] += 1;
                break;
            }
            env.step(&mut state, d.action)?;
        }
    }
    let n = trials as f64;
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let mut max_deviation = 0.0f64;
    let mut within_3se = true;
    for (p, f) in analytic.as_slice().iter().zip(&empirical) {
        let dev = (p - f).abs();
        max_deviation = max_deviation.max(dev);
        let se = math::sqrt(p * (1.0 - p) / n);
        if dev > 3.0 * se && !(se == 0.0 && dev == 0.0) {
            within_3se = false;
        }
    }
    Ok(McReport {
        analytic,
        empirical,
        max_deviation,
        trials,
        within_3se,
    })
}

/// A data budget for one sweep column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Budget {
    Episodes(u64),
    Full(FullBudget),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FullBudget {
    Full,
}

impl Budget {
    pub const FULL: Budget = Budget::Full(FullBudget::Full);

    pub fn label(&self) -> String {
        match self {
            Budget::Episodes(n) => format!("{n}"),
            Budget::Full(_) => String::from("full"),
        }
    }

    fn max_episodes(&self) -> Option<u64> {
        match self {
            Budget::Episodes(n) => Some(*n),
            Budget::Full(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub p_t: Vec<f64>,
    /// Defaults to the base configuration's temperature.
    #[serde(default)]
    pub temperatures: Vec<f64>,
    pub budgets: Vec<Budget>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.p_t.is_empty() {
            return Err(invalid("p_t", "grid needs at least one p_t value"));
        }
        if self.budgets.is_empty() {
            return Err(invalid("budgets", "grid needs at least one data budget"));
        }
        if self.budgets.contains(&Budget::Episodes(0)) {
            return Err(invalid("budgets", "episode budgets must be positive"));
        }
        Ok(())
    }
}

/// Components shared by every cell of a sweep.
#[derive(Clone, Copy)]
pub struct ExperimentSetup<'a> {
    pub generator: &'a Generator,
    pub skam: &'a SkamConfig,
    pub train: &'a TrainConfig,
    pub proxy: &'a ProxyConfig,
    pub oracle: &'a dyn RewardOracle,
    pub train_prompts: &'a [Vec<TokenId>],
    pub test_prompts: &'a [Vec<TokenId>],
}

impl<'a> ExperimentSetup<'a> {
    pub fn train_setup(&self) -> TrainSetup<'a> {
        TrainSetup {
            generator: self.generator,
            skam: self.skam,
            train: self.train,
            proxy: self.proxy,
            oracle: self.oracle,
            prompts: self.train_prompts,
        }
    }

    pub fn env(&self) -> Result<GateEnv<'a>> {
        GateEnv::new(self.generator, self.skam, self.oracle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub p_t: f64,
    pub temperature: f64,
    pub budget: Budget,
    pub mean: f64,
    pub stddev: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub budgets: Vec<Budget>,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn cell(&self, p_t: f64, temperature: f64, budget: Budget) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.p_t == p_t && c.temperature == temperature && c.budget == budget)
    }

    /// `p_t,temperature,<budget>...` with one row per `(p_t, temperature)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("p_t,temperature");
        for b in &self.budgets {
            out.push(',');
            out.push_str(&b.label());
        }
        out.push('\n');
        for row in self.cells.chunks(self.budgets.len().max(1)) {
            let _ = write!(out, "{},{}", row[0].p_t, row[0].temperature);
            for c in row {
                let _ = write!(out, ",{}", c.mean);
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one proxy per grid cell from the base configuration and evaluates
/// it on the test prompts. Cells are independent jobs; every cell uses the
/// base seed, so cells differing only in budget share a training prefix.
pub fn sweep<M: ParallelMap>(
    grid: &SweepGrid,
    base: &ExperimentSetup<'_>,
    runner: &M,
) -> Result<SweepTable> {
    grid.validate()?;
    let temps = if grid.temperatures.is_empty() {
        vec![base.skam.temperature]
    } else {
        grid.temperatures.clone()
    };
    let mut jobs = Vec::new();
    for &p_t in &grid.p_t {
        for &temperature in &temps {
            for &budget in &grid.budgets {
                jobs.push((p_t, temperature, budget));
            }
        }
    }
    let results = runner.map(&jobs, |_, &(p_t, temperature, budget)| {
        let skam = SkamConfig {
            p_t,
            temperature,
            ..base.skam.clone()
        };
        let train_cfg = TrainConfig {
            max_episodes: budget.max_episodes(),
            ..base.train.clone()
        };
        let setup = ExperimentSetup {
            skam: &skam,
            train: &train_cfg,
            ..*base
        };
        let outcome = train(&setup.train_setup(), &crate::parallel::Sequential)?;
        let env = setup.env()?;
        let eval = evaluate(
            &env,
            &outcome.model,
            base.test_prompts,
            DEFAULT_HISTOGRAM_BINS,
            &crate::parallel::Sequential,
        )?;
        Ok(SweepCell {
            p_t,
            temperature,
            budget,
            mean: eval.summary.mean,
            stddev: eval.summary.stddev,
            count: eval.summary.count,
        })
    });
    Ok(SweepTable {
        budgets: grid.budgets.clone(),
        cells: results.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

/// Trains and evaluates a single configuration; returns the trained model
/// and its test evaluation.
pub fn train_and_evaluate<M: ParallelMap>(
    setup: &ExperimentSetup<'_>,
    runner: &M,
) -> Result<(ProxyModel, Evaluation)> {
    let outcome = train(&setup.train_setup(), runner)?;
    let env = setup.env()?;
    let eval = evaluate(
        &env,
        &outcome.model,
        setup.test_prompts,
        DEFAULT_HISTOGRAM_BINS,
        runner,
    )?;
    Ok((outcome.model, eval))
}

/// The forbidden-token toy task: a 16-token suffix-table generator whose
/// most likely next token is always one of three forbidden tokens.
#[derive(Debug, Clone)]
pub struct ForbiddenTask {
    pub generator: Generator,
    pub oracle: OracleSpec,
    pub skam: SkamConfig,
    pub train: TrainConfig,
    pub proxy: ProxyConfig,
    pub prompts: PromptConfig,
}

pub const FORBIDDEN_VOCAB: usize = 16;
pub const FORBIDDEN_TOKENS: [u32; 3] = [0, 1, 2];

impl ForbiddenTask {
    /// In context `c` (the last token) the next-token distribution puts
    /// 0.30 on forbidden token `c mod 3`, 0.03 and 0.02 on the other two,
    /// 0.25 on EOS and 0.40 spread unevenly over the twelve clean tokens.
    pub fn new(seed: u64) -> Result<Self> {
        let v = FORBIDDEN_VOCAB;
        let eos = TokenId(v as u32 - 1);
        let vocab = Vocab::new(v, eos, None)?;
        let mut rng = ChaCha8Rng::seed_from_u64(math::mix_seed(seed, 0xF0, 0));
        let row = |context: usize, rng: &mut ChaCha8Rng| {
            let mut p = vec![0.0; v];
            let lead = context % 3;
            p[lead] = 0.30;
            p[(lead + 1) % 3] = 0.03;
            p[(lead + 2) % 3] = 0.02;
            p[eos.index()] = 0.25;
            let weights: Vec<f64> = (3..v - 1)
                .map(|_| 1.0 + 0.5 * rng.random::<f64>())
                .collect();
            let total: f64 = weights.iter().sum();
            for (i, w) in weights.iter().enumerate() {
                p[3 + i] = 0.40 * w / total;
            }
            TableRow {
                logits: p.iter().map(|&x| math::ln(x)).collect(),
                hidden: None,
            }
        };
        let mut rows = vec![(Vec::new(), row(0, &mut rng))];
        for c in 0..v {
            rows.push((vec![TokenId(c as u32)], row(c, &mut rng)));
        }
        let generator = Generator::table(vocab, rows, PrefixMatch::Suffix, v + 1, 20)?;
        Ok(Self {
            generator,
            oracle: OracleSpec::Forbidden {
                tokens: FORBIDDEN_TOKENS.iter().copied().map(TokenId).collect(),
                penalty: 1.0,
            },
            skam: SkamConfig {
                p_t: 0.001,
                temperature: 1.0,
                top_p: 1.0,
                max_response_len: 16,
                terminal_reward_only: true,
                max_decisions: None,
            },
            train: TrainConfig {
                learning_rate: 0.05,
                entropy_coef: 0.01,
                episodes_per_batch: 32,
                minibatch_size: 128,
                epochs_per_batch: 4,
                total_env_steps: 50_000,
                seed,
                ..TrainConfig::default()
            },
            proxy: ProxyConfig::default(),
            prompts: PromptConfig {
                seed: math::mix_seed(seed, 0x9F, 0),
                ..PromptConfig::default()
            },
        })
    }
}

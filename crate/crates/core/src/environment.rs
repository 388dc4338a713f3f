//! The gating decision process.
//!
//! At every response position the generator's distribution is tempered and
//! nucleus-filtered once, giving a fixed candidate pool. Candidates are
//! proposed from the pool in descending probability order. A rejected
//! candidate joins the position's rejected set and the next-best remaining
//! token is proposed; an accepted candidate is appended to the response and
//! the rejected set is cleared for the next position.
//!
//! Rejection is masked when the mean probability of the remaining candidates
//! is at most `p_t`, or when only one candidate remains.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::generator::{apply_temperature, nucleus_filter, Generator, ProbVector, TokenId};
use crate::proxy::{masked_log_prob, GatePolicy, Observation, PolicyOutput};
use crate::rewards::RewardOracle;
use crate::trainer::{DecisionRecord, Trajectory};

/// Proxy action. `Accept` is `a = 0`, `Reject` is `a = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Accept,
    Reject,
}

impl Action {
    #[inline]
    pub fn index(self) -> usize {
        match self {
            Action::Accept => 0,
            Action::Reject => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllowedActions {
    AcceptOnly,
    AcceptOrReject,
}

impl AllowedActions {
    pub fn contains(self, action: Action) -> bool {
        matches!(
            (self, action),
            (_, Action::Accept) | (AllowedActions::AcceptOrReject, Action::Reject)
        )
    }

    pub fn is_masked(self) -> bool {
        self == AllowedActions::AcceptOnly
    }
}

fn default_terminal_only() -> bool {
    true
}

/// Sampling and masking hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkamConfig {
    /// Rejection is masked when the mean remaining probability is `<= p_t`.
    pub p_t: f64,
    pub temperature: f64,
    pub top_p: f64,
    pub max_response_len: usize,
    /// Reward only at the terminal decision. When false, each accept is
    /// rewarded with the change in oracle score, which telescopes to the same
    /// episode return.
    #[serde(rename = "gamma_terminal_only", default = "default_terminal_only")]
    pub terminal_reward_only: bool,
    /// Optional cap on decisions per episode.
    #[serde(default)]
    pub max_decisions: Option<usize>,
}

impl Default for SkamConfig {
    fn default() -> Self {
        Self {
            p_t: 0.01,
            temperature: 1.0,
            top_p: 1.0,
            max_response_len: 16,
            terminal_reward_only: true,
            max_decisions: None,
        }
    }
}

impl SkamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_t) {
            return Err(invalid("p_t", "must lie in [0, 1]"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature", "must be positive"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(invalid("top_p", "must lie in (0, 1]"));
        }
        if self.max_response_len == 0 {
            return Err(invalid("max_response_len", "must be positive"));
        }
        if self.max_decisions == Some(0) {
            return Err(invalid("max_decisions", "must be positive"));
        }
        Ok(())
    }
}

/// Argmax-probability token of `pool \ rejected`, lowest id on ties.
pub fn next_candidate(
    probs: &ProbVector,
    pool: &[TokenId],
    rejected: &[TokenId],
) -> Result<TokenId> {
    pool.iter()
        .copied()
        .filter(|t| !rejected.contains(t))
        .min_by(|&a, &b| probs.rank_cmp(a, b))
        .ok_or(Error::PoolExhausted)
}

/// The masking rule: only ACCEPT when `Σ p over pool \ rejected <= p_t * n`
/// or when a single candidate is left.
pub fn allowed_actions(
    probs: &ProbVector,
    pool: &[TokenId],
    rejected: &[TokenId],
    p_t: f64,
) -> AllowedActions {
    let (mass, n) = pool
        .iter()
        .filter(|t| !rejected.contains(t))
        .fold((0.0, 0usize), |(m, n), &t| (m + probs.get(t), n + 1));
    if n <= 1 || mass <= p_t * n as f64 {
        AllowedActions::AcceptOnly
    } else {
        AllowedActions::AcceptOrReject
    }
}

/// Distribution of the token finally accepted at one position.
///
/// Walks the pool in candidate order; the candidate at depth `j` is reached
/// only if every earlier candidate was rejected, and is then accepted with
/// probability `1 - reject_probs[t]`, or with probability one where rejection
/// is masked. `reject_probs` is indexed by token id and must cover the
/// vocabulary. The result is over the full vocabulary, zero outside the pool.
pub fn position_selection_distribution(
    probs: &ProbVector,
    pool: &[TokenId],
    p_t: f64,
    reject_probs: &[f64],
) -> Result<ProbVector> {
    if pool.is_empty() {
        return Err(Error::PoolExhausted);
    }
    if let Some(bad) = pool
        .iter()
        .find(|t| !(0.0..=1.0).contains(&reject_probs[t.index()]))
    {
        return Err(invalid(
            "reject_probs",
            alloc::format!("token {} outside [0, 1]", bad.0),
        ));
    }
    let mut order = pool.to_vec();
    order.sort_by(|&a, &b| probs.rank_cmp(a, b));
    let mut out = vec![0.0; probs.len()];
    let mut reach = 1.0;
    for depth in 0..order.len() {
        let t = order[depth];
        let accept = match allowed_actions(probs, &order, &order[..depth], p_t) {
            AllowedActions::AcceptOnly => 1.0,
            AllowedActions::AcceptOrReject => 1.0 - reject_probs[t.index()],
        };
        out[t.index()] = reach * accept;
        reach *= 1.0 - accept;
        if reach == 0.0 {
            break;
        }
    }
    // the last candidate is always force-accepted, so the paths partition
    // the event space
    Ok(ProbVector::from_raw(out))
}

/// Product of the reject probabilities of every pool token ranked above
/// `token`, without a final acceptance factor for `token` itself and without
/// masking. This is the unnormalised chain; compare with
/// [`position_selection_distribution`].
pub fn literal_acceptance_product(
    probs: &ProbVector,
    pool: &[TokenId],
    reject_probs: &[f64],
    token: TokenId,
) -> f64 {
    pool.iter()
        .filter(|&&t| probs.rank_cmp(t, token) == core::cmp::Ordering::Less)
        .map(|t| reject_probs[t.index()])
        .product()
}

/// The gating state at one decision.
#[derive(Debug, Clone, PartialEq)]
pub struct GateState {
    pub prompt: Vec<TokenId>,
    pub accepted: Vec<TokenId>,
    pub candidate: TokenId,
    /// Tokens rejected at the current position, in rejection order.
    pub rejected: Vec<TokenId>,
    /// Candidate pool for the current position in descending probability.
    pub pool: Vec<TokenId>,
    /// Tempered distribution at the current position.
    pub probs: ProbVector,
    /// Generator hidden features at the current position.
    pub hidden: Vec<f64>,
    pub decisions_taken: usize,
    pub finished: bool,
}

impl GateState {
    /// Response position being decided.
    pub fn position(&self) -> usize {
        self.accepted.len()
    }

    pub fn prefix(&self) -> Vec<TokenId> {
        let mut p = self.prompt.clone();
        p.extend_from_slice(&self.accepted);
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub terminal: bool,
    pub reward: f64,
}

/// Binds a generator, configuration and oracle into an environment.
#[derive(Clone, Copy)]
pub struct GateEnv<'a> {
    pub generator: &'a Generator,
    pub config: &'a SkamConfig,
    pub oracle: &'a dyn RewardOracle,
}

impl<'a> GateEnv<'a> {
    pub fn new(
        generator: &'a Generator,
        config: &'a SkamConfig,
        oracle: &'a dyn RewardOracle,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            generator,
            config,
            oracle,
        })
    }

    /// Tempered distribution and nucleus pool at `prefix`.
    pub fn position_distribution(&self, prefix: &[TokenId]) -> Result<(ProbVector, Vec<TokenId>)> {
        let logits = self.generator.logits(prefix)?;
        let probs = apply_temperature(&logits, self.config.temperature)?;
        let pool = nucleus_filter(&probs, self.config.top_p)?;
        Ok((probs, pool))
    }

    pub fn reset(&self, prompt: &[TokenId]) -> Result<GateState> {
        for &t in prompt {
            self.generator.vocab().check(t)?;
        }
        let mut state = GateState {
            prompt: prompt.to_vec(),
            accepted: Vec::new(),
            candidate: TokenId(0),
            rejected: Vec::new(),
            pool: Vec::new(),
            probs: ProbVector::uniform(1),
            hidden: Vec::new(),
            decisions_taken: 0,
            finished: false,
        };
        self.open_position(&mut state)?;
        Ok(state)
    }

    /// Recomputes the distribution for the current prefix, clears the
    /// rejected set and proposes the most probable pool token.
    pub fn open_position(&self, state: &mut GateState) -> Result<()> {
        let prefix = state.prefix();
        let (probs, pool) = self.position_distribution(&prefix)?;
        state.hidden = self.generator.hidden(&prefix)?;
        state.rejected.clear();
        state.candidate = pool[0];
        state.pool = pool;
        state.probs = probs;
        Ok(())
    }

    pub fn allowed(&self, state: &GateState) -> AllowedActions {
        allowed_actions(&state.probs, &state.pool, &state.rejected, self.config.p_t)
    }

    pub fn observation<'s>(&self, state: &'s GateState) -> Observation<'s> {
        Observation {
            hidden: &state.hidden,
            candidate: state.candidate,
            probs: &state.probs,
            pool: &state.pool,
            rejected: &state.rejected,
            position: state.position(),
            max_response_len: self.config.max_response_len,
        }
    }

    pub fn step(&self, state: &mut GateState, action: Action) -> Result<StepOutcome> {
        if state.finished {
            return Err(Error::EpisodeFinished);
        }
        if !self.allowed(state).contains(action) {
            return Err(Error::MaskedAction("reject is masked at this decision"));
        }
        state.decisions_taken += 1;
        let budget_spent = self
            .config
            .max_decisions
            .is_some_and(|m| state.decisions_taken >= m);
        let mut terminal = false;
        let mut reward = 0.0;
        match action {
            Action::Accept => {
                let before = if self.config.terminal_reward_only {
                    0.0
                } else {
                    self.oracle.score(&state.prompt, &state.accepted)
                };
                if state.candidate == self.generator.eos() {
                    terminal = true;
                } else {
                    state.accepted.push(state.candidate);
                    terminal = state.accepted.len() >= self.config.max_response_len;
                }
                if !self.config.terminal_reward_only {
                    reward = self.oracle.score(&state.prompt, &state.accepted) - before;
                }
                if !terminal && !budget_spent {
                    self.open_position(state)?;
                }
            }
            Action::Reject => {
                state.rejected.push(state.candidate);
                state.candidate = next_candidate(&state.probs, &state.pool, &state.rejected)?;
            }
        }
        if budget_spent {
            terminal = true;
        }
        if terminal {
            state.finished = true;
            if self.config.terminal_reward_only {
                reward = self.oracle.score(&state.prompt, &state.accepted);
            }
        }
        Ok(StepOutcome { terminal, reward })
    }
}

/// One decision of the policy at `state`: the action, its masked
/// log-likelihood and the forward outputs.
pub(crate) struct Decision {
    pub action: Action,
    pub logp: f64,
    pub masked: bool,
    pub features: crate::proxy::FeatureVec,
    pub output: PolicyOutput,
}

pub(crate) fn decide<P, F>(
    env: &GateEnv<'_>,
    policy: &P,
    state: &GateState,
    choose: F,
) -> Result<Decision>
where
    P: GatePolicy + ?Sized,
    F: FnOnce(&PolicyOutput) -> Action,
{
    let allowed = env.allowed(state);
    let (features, output) = policy.evaluate(&env.observation(state));
    let action = match allowed {
        AllowedActions::AcceptOnly => Action::Accept,
        AllowedActions::AcceptOrReject => choose(&output),
    };
    let logp = masked_log_prob(&output, action, allowed)?;
    Ok(Decision {
        action,
        logp,
        masked: allowed.is_masked(),
        features,
        output,
    })
}

/// Samples an action from the policy's action probabilities.
pub fn sample_action<R: Rng + ?Sized>(out: &PolicyOutput, rng: &mut R) -> Action {
    if rng.random::<f64>() < out.action_probs[0] {
        Action::Accept
    } else {
        Action::Reject
    }
}

/// Greedy action: accept unless reject is strictly more likely.
pub fn greedy_action(out: &PolicyOutput) -> Action {
    if out.action_probs[1] > out.action_probs[0] {
        Action::Reject
    } else {
        Action::Accept
    }
}

/// Runs one episode from `prompt` to termination, sampling the proxy's
/// actions with `rng`.
pub fn rollout<P, R>(
    env: &GateEnv<'_>,
    policy: &P,
    prompt: &[TokenId],
    rng: &mut R,
) -> Result<Trajectory>
where
    P: GatePolicy + ?Sized,
    R: Rng + ?Sized,
{
    run_episode(env, policy, prompt, |out| sample_action(out, rng))
}

pub(crate) fn run_episode<P, F>(
    env: &GateEnv<'_>,
    policy: &P,
    prompt: &[TokenId],
    mut choose: F,
) -> Result<Trajectory>
where
    P: GatePolicy + ?Sized,
    F: FnMut(&PolicyOutput) -> Action,
{
    let mut state = env.reset(prompt)?;
    let mut decisions = Vec::new();
    loop {
        let position = state.position();
        let candidate = state.candidate;
        let d = decide(env, policy, &state, &mut choose)?;
        let outcome = env.step(&mut state, d.action)?;
        decisions.push(DecisionRecord {
            features: d.features,
            action: d.action,
            logp: d.logp,
            value: d.output.value,
            reward: outcome.reward,
            masked: d.masked,
            position,
            candidate,
        });
        if outcome.terminal {
            break;
        }
    }
    let episode_return = decisions.iter().map(|d| d.reward).sum();
    Ok(Trajectory {
        prompt: state.prompt,
        response: state.accepted,
        decisions,
        episode_return,
    })
}

/// Upper bound on decisions in one episode.
pub fn decision_bound(env: &GateEnv<'_>, max_pool: usize) -> usize {
    let natural = env.config.max_response_len * max_pool.max(1);
    env.config.max_decisions.map_or(natural, |m| m.min(natural))
}

/// Ungated decoding: take the pool head at every position.
pub fn greedy_decode(env: &GateEnv<'_>, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
    let mut prefix = prompt.to_vec();
    let mut response = Vec::new();
    while response.len() < env.config.max_response_len {
        let (_, pool) = env.position_distribution(&prefix)?;
        let t = pool[0];
        if t == env.generator.eos() {
            break;
        }
        response.push(t);
        prefix.push(t);
    }
    Ok(response)
}

/// Ungated sampling from the renormalised nucleus at every position.
pub fn sample_decode<R: Rng + ?Sized>(
    env: &GateEnv<'_>,
    prompt: &[TokenId],
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    let mut prefix = prompt.to_vec();
    let mut response = Vec::new();
    while response.len() < env.config.max_response_len {
        let (probs, pool) = env.position_distribution(&prefix)?;
        let t = sample_from_pool(&probs, &pool, rng);
        if t == env.generator.eos() {
            break;
        }
        response.push(t);
        prefix.push(t);
    }
    Ok(response)
}

pub(crate) fn sample_from_pool<R: Rng + ?Sized>(
    probs: &ProbVector,
    pool: &[TokenId],
    rng: &mut R,
) -> TokenId {
    let mass: f64 = pool.iter().map(|&t| probs.get(t)).sum();
    let mut u = rng.random::<f64>() * mass;
    for &t in pool {
        u -= probs.get(t);
        if u < 0.0 {
            return t;
        }
    }
    *pool.last().expect("nonempty pool")
}

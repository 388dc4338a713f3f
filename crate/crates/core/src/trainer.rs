//! PPO training of the proxy with GAE advantages.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{rollout, Action, GateEnv, SkamConfig};
use crate::error::{invalid, Error, Result};
use crate::generator::{Generator, TokenId};
use crate::math;
use crate::parallel::ParallelMap;
use crate::proxy::{FeatureVec, ProxyModel, ProxyParams};
use crate::rewards::RewardOracle;

/// One proxy decision as recorded during a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub features: FeatureVec,
    pub action: Action,
    /// Masked log-likelihood at decision time; zero for forced accepts.
    pub logp: f64,
    pub value: f64,
    pub reward: f64,
    pub masked: bool,
    pub position: usize,
    pub candidate: TokenId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub decisions: Vec<DecisionRecord>,
    pub episode_return: f64,
}

impl Trajectory {
    pub fn rejections(&self) -> usize {
        self.decisions
            .iter()
            .filter(|d| d.action == Action::Reject)
            .count()
    }
}

/// Proxy network shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxyConfig {
    pub hidden_size: usize,
    pub embed_dim: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            embed_dim: 16,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 {
            return Err(invalid("hidden_size", "must be positive"));
        }
        if self.embed_dim == 0 {
            return Err(invalid("embed_dim", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub epochs_per_batch: usize,
    pub minibatch_size: usize,
    pub episodes_per_batch: usize,
    pub total_env_steps: u64,
    /// Stop after this many episodes even if env steps remain.
    pub max_episodes: Option<u64>,
    /// Use the PPO-style clipped value loss.
    pub clip_value_loss: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            gamma: 1.0,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            epochs_per_batch: 4,
            minibatch_size: 256,
            episodes_per_batch: 32,
            total_env_steps: 50_000,
            max_episodes: None,
            clip_value_loss: false,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", "must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid("gamma", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(invalid("gae_lambda", "must lie in [0, 1]"));
        }
        if self.clip_eps.is_nan() || self.clip_eps <= 0.0 {
            return Err(invalid("clip_eps", "must be positive"));
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return Err(invalid("entropy_coef", "must be nonnegative"));
        }
        if !(self.value_coef > 0.0 && self.value_coef.is_finite()) {
            return Err(invalid("value_coef", "must be positive"));
        }
        for (field, v) in [
            ("epochs_per_batch", self.epochs_per_batch as u64),
            ("minibatch_size", self.minibatch_size as u64),
            ("episodes_per_batch", self.episodes_per_batch as u64),
            ("total_env_steps", self.total_env_steps),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be positive"));
            }
        }
        if self.max_episodes == Some(0) {
            return Err(invalid("max_episodes", "must be positive"));
        }
        Ok(())
    }
}

/// Generalized advantage estimation over one episode, bootstrapping the
/// value after the last decision with zero.
///
/// Returns `(advantages, returns)` where `returns = advantages + values`.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len(), "rewards and values must align");
    let n = rewards.len();
    let mut adv = alloc::vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to zero mean and unit variance (variance floor 1e-8).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let mean = math::mean(adv);
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / adv.len() as f64;
    let std = math::sqrt(var.max(1e-8));
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// A decision prepared for the update step.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub features: &'a [f64],
    pub action: Action,
    pub masked: bool,
    pub logp_old: f64,
    pub value_old: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub kl_estimate: f64,
}

impl UpdateStats {
    pub fn total(&self, cfg: &TrainConfig) -> f64 {
        self.policy_loss + cfg.value_coef * self.value_loss - cfg.entropy_coef * self.entropy
    }

    fn is_finite(&self) -> bool {
        [
            self.policy_loss,
            self.value_loss,
            self.entropy,
            self.kl_estimate,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

/// Builds update samples from trajectories: per-episode GAE, then advantage
/// normalization across the unmasked decisions of the batch.
pub fn prepare_samples<'a>(trajectories: &'a [Trajectory], cfg: &TrainConfig) -> Vec<Sample<'a>> {
    let mut samples = Vec::new();
    for traj in trajectories {
        let rewards: Vec<f64> = traj.decisions.iter().map(|d| d.reward).collect();
        let values: Vec<f64> = traj.decisions.iter().map(|d| d.value).collect();
        let (adv, ret) = gae(&rewards, &values, cfg.gamma, cfg.gae_lambda);
        for (i, d) in traj.decisions.iter().enumerate() {
            samples.push(Sample {
                features: d.features.as_slice(),
                action: d.action,
                masked: d.masked,
                logp_old: d.logp,
                value_old: d.value,
                advantage: adv[i],
                ret: ret[i],
            });
        }
    }
    let mut policy_adv: Vec<f64> = samples
        .iter()
        .filter(|s| !s.masked)
        .map(|s| s.advantage)
        .collect();
    normalize_advantages(&mut policy_adv);
    let mut it = policy_adv.into_iter();
    for s in samples.iter_mut().filter(|s| !s.masked) {
        s.advantage = it.next().unwrap_or_default();
    }
    samples
}

/// Loss and gradient of the PPO objective on one minibatch.
///
/// Minimises `policy_loss + value_coef * value_loss - entropy_coef * entropy`
/// where the policy and entropy terms average over unmasked decisions and the
/// value term averages over all decisions.
pub fn ppo_loss_and_grad(
    params: &ProxyParams,
    batch: &[Sample<'_>],
    cfg: &TrainConfig,
) -> (UpdateStats, ProxyParams) {
    let mut grad = ProxyParams::zeros(params.d, params.h);
    let mut stats = UpdateStats::default();
    let n_all = batch.len().max(1) as f64;
    let n_pol = batch.iter().filter(|s| !s.masked).count();
    let inv_pol = if n_pol > 0 { 1.0 / n_pol as f64 } else { 0.0 };
    let mut clipped = 0usize;
    for s in batch {
        let (out, cache) = params.forward_cached(s.features);

        let err = out.value - s.ret;
        let mut value_grad = 2.0 * err;
        let mut sq = err * err;
        if cfg.clip_value_loss {
            let delta = out.value - s.value_old;
            let v_clip = s.value_old + delta.clamp(-cfg.clip_eps, cfg.clip_eps);
            let sq_clip = (v_clip - s.ret) * (v_clip - s.ret);
            if sq_clip > sq {
                sq = sq_clip;
                value_grad = if delta.abs() < cfg.clip_eps {
                    2.0 * (v_clip - s.ret)
                } else {
                    0.0
                };
            }
        }
        stats.value_loss += sq / n_all;
        let grad_value = cfg.value_coef * value_grad / n_all;

        let mut grad_logits = [0.0; 2];
        if !s.masked {
            let z = out.action_logits;
            let m = z[0].max(z[1]);
            let lse = m + math::ln(math::exp(z[0] - m) + math::exp(z[1] - m));
            let a = s.action.index();
            let logp = z[a] - lse;
            let ratio = math::exp(logp - s.logp_old);
            let surr = ratio * s.advantage;
            let surr_clip = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * s.advantage;
            stats.policy_loss -= surr.min(surr_clip) * inv_pol;
            if (ratio - 1.0).abs() > cfg.clip_eps {
                clipped += 1;
            }
            stats.kl_estimate += (s.logp_old - logp) * inv_pol;
            let p = out.action_probs;
            let d_logp = if surr <= surr_clip {
                -ratio * s.advantage * inv_pol
            } else {
                0.0
            };
            let entropy = out.entropy();
            stats.entropy += entropy * inv_pol;
            for (k, g) in grad_logits.iter_mut().enumerate() {
                let onehot = if k == a { 1.0 } else { 0.0 };
                let log_pk = z[k] - lse;
                let d_entropy = -p[k] * (log_pk + entropy);
                *g = d_logp * (onehot - p[k]) - cfg.entropy_coef * inv_pol * d_entropy;
            }
        }
        params.accumulate_backward_cached(s.features, &cache, grad_logits, grad_value, &mut grad);
    }
    stats.clip_fraction = clipped as f64 * inv_pol;
    (stats, grad)
}

/// Several epochs of minibatch gradient descent on prepared samples.
/// Stats are averaged over every minibatch step.
pub fn ppo_update_samples(
    params: &mut ProxyParams,
    samples: &[Sample<'_>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    if samples.is_empty() {
        return Err(invalid("trajectories", "no decisions to learn from"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut sum = UpdateStats::default();
    let mut steps = 0usize;
    let mut batch = Vec::with_capacity(cfg.minibatch_size);
    for epoch in 0..cfg.epochs_per_batch {
        order.shuffle(rng);
        for (mb, chunk) in order.chunks(cfg.minibatch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| samples[i].clone()));
            let (stats, grad) = ppo_loss_and_grad(params, &batch, cfg);
            if !stats.is_finite() || !grad.iter().all(f64::is_finite) {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch} minibatch {mb}: policy {} value {} entropy {} kl {}",
                    stats.policy_loss, stats.value_loss, stats.entropy, stats.kl_estimate
                )));
            }
            params.add_scaled(&grad, -cfg.learning_rate);
            sum.policy_loss += stats.policy_loss;
            sum.value_loss += stats.value_loss;
            sum.entropy += stats.entropy;
            sum.clip_fraction += stats.clip_fraction;
            sum.kl_estimate += stats.kl_estimate;
            steps += 1;
        }
    }
    let k = steps as f64;
    Ok(UpdateStats {
        policy_loss: sum.policy_loss / k,
        value_loss: sum.value_loss / k,
        entropy: sum.entropy / k,
        clip_fraction: sum.clip_fraction / k,
        kl_estimate: sum.kl_estimate / k,
    })
}

pub fn ppo_update(
    params: &mut ProxyParams,
    trajectories: &[Trajectory],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    let samples = prepare_samples(trajectories, cfg);
    ppo_update_samples(params, &samples, cfg, rng)
}

/// One row of the training metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub episodes: u64,
    pub mean_reward: f64,
    pub mean_len: f64,
    pub reject_rate: f64,
    pub masked_frac: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "step,episodes,mean_reward,mean_len,reject_rate,masked_frac,policy_loss,value_loss,entropy,clip_frac";
}

/// Everything a training run needs.
#[derive(Clone, Copy)]
pub struct TrainSetup<'a> {
    pub generator: &'a Generator,
    pub skam: &'a SkamConfig,
    pub train: &'a TrainConfig,
    pub proxy: &'a ProxyConfig,
    pub oracle: &'a dyn RewardOracle,
    pub prompts: &'a [Vec<TokenId>],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ProxyModel,
    pub metrics: Vec<MetricsRow>,
    pub last_batch: Vec<Trajectory>,
}

pub(crate) const EPISODE_STREAM: u64 = 2;
const UPDATE_STREAM: u64 = 3;

/// Alternates rollout and update phases until `total_env_steps` decisions
/// (or `max_episodes` episodes) have been consumed.
///
/// Prompts are used in order, cycling. Episode `k` samples its actions from a
/// generator seeded by `(seed, k)`, so the result does not depend on how the
/// runner schedules episodes.
pub fn train<M: ParallelMap>(setup: &TrainSetup<'_>, runner: &M) -> Result<TrainOutcome> {
    let cfg = setup.train;
    cfg.validate()?;
    setup.proxy.validate()?;
    if setup.prompts.is_empty() {
        return Err(invalid("prompts", "training prompt set is empty"));
    }
    let env = GateEnv::new(setup.generator, setup.skam, setup.oracle)?;
    let mut model = ProxyModel::init(
        setup.generator.vocab_size(),
        setup.generator.hidden_dim(),
        setup.proxy.embed_dim,
        setup.proxy.hidden_size,
        cfg.seed,
    );
    let max_episodes = cfg.max_episodes.unwrap_or(u64::MAX);
    let mut env_steps = 0u64;
    let mut episodes = 0u64;
    let mut metrics = Vec::new();
    let mut last_batch = Vec::new();
    let mut batch_index = 0u64;
    while env_steps < cfg.total_env_steps && episodes < max_episodes {
        let n = (cfg.episodes_per_batch as u64).min(max_episodes - episodes);
        let jobs: Vec<u64> = (episodes..episodes + n).collect();
        let snapshot = &model;
        let results = runner.map(&jobs, |_, &k| {
            let prompt = &setup.prompts[(k % setup.prompts.len() as u64) as usize];
            let mut rng = ChaCha8Rng::seed_from_u64(math::mix_seed(cfg.seed, EPISODE_STREAM, k));
            rollout(&env, snapshot, prompt, &mut rng)
        });
        let mut trajectories = results.into_iter().collect::<Result<Vec<_>>>()?;
        // whole episodes only, never past the step budget
        let mut decisions = 0usize;
        let fits = trajectories
            .iter()
            .take_while(|t| {
                let next = env_steps + (decisions + t.decisions.len()) as u64;
                let ok = next <= cfg.total_env_steps;
                if ok {
                    decisions += t.decisions.len();
                }
                ok
            })
            .count();
        let exhausted = fits < trajectories.len();
        trajectories.truncate(fits);
        if trajectories.is_empty() {
            break;
        }
        env_steps += decisions as u64;
        episodes += fits as u64;

        let mut rng =
            ChaCha8Rng::seed_from_u64(math::mix_seed(cfg.seed, UPDATE_STREAM, batch_index));
        let stats = ppo_update(&mut model.params, &trajectories, cfg, &mut rng)?;

        let k = trajectories.len() as f64;
        let rejects: usize = trajectories.iter().map(Trajectory::rejections).sum();
        let masked = trajectories
            .iter()
            .flat_map(|t| &t.decisions)
            .filter(|d| d.masked)
            .count();
        metrics.push(MetricsRow {
            step: env_steps,
            episodes,
            mean_reward: trajectories.iter().map(|t| t.episode_return).sum::<f64>() / k,
            mean_len: trajectories
                .iter()
                .map(|t| t.response.len() as f64)
                .sum::<f64>()
                / k,
            reject_rate: rejects as f64 / decisions.max(1) as f64,
            masked_frac: masked as f64 / decisions.max(1) as f64,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_frac: stats.clip_fraction,
        });
        last_batch = trajectories;
        batch_index += 1;
        if exhausted {
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        metrics,
        last_batch,
    })
}

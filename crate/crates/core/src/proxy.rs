//! The proxy policy: candidate features, a tanh MLP trunk, a two-way
//! accept/reject head and a scalar value head, with exact gradients.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{Action, AllowedActions};
use crate::error::{invalid, Error, Result};
use crate::generator::{ProbVector, TokenId};
use crate::math;

/// Number of scalar features appended after the hidden state and the
/// candidate embedding.
pub const SCALAR_FEATURES: usize = 4;

/// What the proxy sees at one decision.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub hidden: &'a [f64],
    pub candidate: TokenId,
    pub probs: &'a ProbVector,
    pub pool: &'a [TokenId],
    pub rejected: &'a [TokenId],
    /// Index of the position being decided (response length so far).
    pub position: usize,
    pub max_response_len: usize,
}

impl Observation<'_> {
    /// Mean probability of the candidates still available, the current one
    /// included.
    pub fn mean_remaining(&self) -> f64 {
        let (sum, n) = self
            .pool
            .iter()
            .filter(|t| !self.rejected.contains(t))
            .fold((0.0, 0usize), |(s, n), &t| (s + self.probs.get(t), n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVec(pub Vec<f64>);

impl FeatureVec {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Builds feature vectors: generator hidden state, a fixed embedding of the
/// candidate token, then candidate probability, mean remaining probability,
/// rejected fraction of the pool and position fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    hidden_dim: usize,
    embed_dim: usize,
    vocab_size: usize,
    seed: u64,
    embedding: Vec<f64>,
}

impl FeatureExtractor {
    /// The embedding rows are orthonormal when `vocab_size <= embed_dim`
    /// (Gram-Schmidt on random vectors) and random unit vectors otherwise.
    pub fn new(vocab_size: usize, hidden_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(math::mix_seed(seed, 0xE3B, 0));
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(vocab_size);
        for _ in 0..vocab_size {
            loop {
                let mut v: Vec<f64> = (0..embed_dim)
                    .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                    .collect();
                if rows.len() < embed_dim {
                    for r in &rows {
                        let dot: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                        v.iter_mut().zip(r).for_each(|(x, y)| *x -= dot * y);
                    }
                }
                let norm = math::sqrt(v.iter().map(|x| x * x).sum());
                if norm > 1e-6 {
                    v.iter_mut().for_each(|x| *x /= norm);
                    rows.push(v);
                    break;
                }
            }
        }
        Self {
            hidden_dim,
            embed_dim,
            vocab_size,
            seed,
            embedding: rows.concat(),
        }
    }

    pub fn dim(&self) -> usize {
        self.hidden_dim + self.embed_dim + SCALAR_FEATURES
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embedding(&self, token: TokenId) -> &[f64] {
        let i = token.index() * self.embed_dim;
        &self.embedding[i..i + self.embed_dim]
    }

    pub fn extract(&self, obs: &Observation<'_>) -> FeatureVec {
        let mut f = Vec::with_capacity(self.dim());
        f.extend_from_slice(obs.hidden);
        f.resize(self.hidden_dim, 0.0);
        f.extend_from_slice(self.embedding(obs.candidate));
        let pool_len = obs.pool.len().max(1) as f64;
        f.push(obs.probs.get(obs.candidate));
        f.push(obs.mean_remaining());
        f.push(obs.rejected.len() as f64 / pool_len);
        f.push(obs.position as f64 / obs.max_response_len.max(1) as f64);
        FeatureVec(f)
    }
}

/// Output of one forward pass. Index 0 is ACCEPT, index 1 is REJECT.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyOutput {
    pub action_logits: [f64; 2],
    pub action_probs: [f64; 2],
    pub value: f64,
}

impl PolicyOutput {
    pub fn from_logits(action_logits: [f64; 2], value: f64) -> Self {
        let p = math::softmax(&action_logits);
        Self {
            action_logits,
            action_probs: [p[0], p[1]],
            value,
        }
    }

    pub fn prob(&self, action: Action) -> f64 {
        self.action_probs[action.index()]
    }

    /// `-Σ p log p` over the two actions.
    pub fn entropy(&self) -> f64 {
        -self
            .action_probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * math::ln(p))
            .sum::<f64>()
    }
}

/// Log-likelihood of `action` under the masked policy. Forced decisions
/// have likelihood one.
pub fn masked_log_prob(out: &PolicyOutput, action: Action, allowed: AllowedActions) -> Result<f64> {
    if !allowed.contains(action) {
        return Err(Error::MaskedAction("action outside the allowed set"));
    }
    Ok(match allowed {
        AllowedActions::AcceptOnly => 0.0,
        AllowedActions::AcceptOrReject => math::ln(out.prob(action)),
    })
}

/// Two-layer MLP parameters; matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyParams {
    pub d: usize,
    pub h: usize,
    /// `h x d`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `2 x h`
    pub w_act: Vec<f64>,
    pub b_act: [f64; 2],
    pub w_val: Vec<f64>,
    pub b_val: f64,
}

/// Intermediate values of a forward pass needed by [`ProxyParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub trunk: Vec<f64>,
}

impl ProxyParams {
    pub fn zeros(d: usize, h: usize) -> Self {
        Self {
            d,
            h,
            w1: vec![0.0; h * d],
            b1: vec![0.0; h],
            w_act: vec![0.0; 2 * h],
            b_act: [0.0; 2],
            w_val: vec![0.0; h],
            b_val: 0.0,
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(d: usize, h: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(math::mix_seed(seed, 0x1417, 1));
        let mut p = Self::zeros(d, h);
        let mut fill = |w: &mut [f64], fan_in: usize| {
            let bound = 1.0 / math::sqrt(fan_in.max(1) as f64);
            w.iter_mut()
                .for_each(|x| *x = (rng.random::<f64>() * 2.0 - 1.0) * bound);
        };
        fill(&mut p.w1, d);
        fill(&mut p.w_act, h);
        fill(&mut p.w_val, h);
        p
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = [
            (self.w1.len(), self.h * self.d),
            (self.b1.len(), self.h),
            (self.w_act.len(), 2 * self.h),
            (self.w_val.len(), self.h),
        ];
        for (actual, expected) in shapes {
            if actual != expected {
                return Err(Error::Dimension { expected, actual });
            }
        }
        if !self.iter().all(f64::is_finite) {
            return Err(invalid("params", "non-finite parameter"));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.h * self.d + self.h + 2 * self.h + 2 + self.h + 1
    }

    /// Every parameter in a fixed order: w1, b1, w_act, b_act, w_val, b_val.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w_act)
            .chain(&self.b_act)
            .chain(&self.w_val)
            .chain(core::iter::once(&self.b_val))
            .copied()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.w1
            .iter_mut()
            .chain(&mut self.b1)
            .chain(&mut self.w_act)
            .chain(&mut self.b_act)
            .chain(&mut self.w_val)
            .chain(core::iter::once(&mut self.b_val))
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ProxyParams, scale: f64) {
        self.iter_mut()
            .zip(other.iter())
            .for_each(|(a, b)| *a += scale * b);
    }

    pub fn forward(&self, f: &[f64]) -> PolicyOutput {
        self.forward_cached(f).0
    }

    pub fn forward_cached(&self, f: &[f64]) -> (PolicyOutput, ForwardCache) {
        debug_assert_eq!(f.len(), self.d);
        let trunk: Vec<f64> = (0..self.h)
            .map(|j| {
                let row = &self.w1[j * self.d..(j + 1) * self.d];
                let z: f64 = row.iter().zip(f).map(|(w, x)| w * x).sum::<f64>() + self.b1[j];
                math::tanh(z)
            })
            .collect();
        let head =
            |row: &[f64], b: f64| row.iter().zip(&trunk).map(|(w, t)| w * t).sum::<f64>() + b;
        let logits = [
            head(&self.w_act[..self.h], self.b_act[0]),
            head(&self.w_act[self.h..], self.b_act[1]),
        ];
        let value = head(&self.w_val, self.b_val);
        (
            PolicyOutput::from_logits(logits, value),
            ForwardCache { trunk },
        )
    }

    /// Gradient of `grad_logits · logits + grad_value · value` with respect
    /// to every parameter.
    pub fn backward(&self, f: &[f64], grad_logits: [f64; 2], grad_value: f64) -> ProxyParams {
        let mut g = ProxyParams::zeros(self.d, self.h);
        self.accumulate_backward(f, grad_logits, grad_value, &mut g);
        g
    }

    /// Adds the gradient of one sample into `grad`.
    pub fn accumulate_backward(
        &self,
        f: &[f64],
        grad_logits: [f64; 2],
        grad_value: f64,
        grad: &mut ProxyParams,
    ) {
        let (_, cache) = self.forward_cached(f);
        self.accumulate_backward_cached(f, &cache, grad_logits, grad_value, grad);
    }

    pub fn accumulate_backward_cached(
        &self,
        f: &[f64],
        cache: &ForwardCache,
        grad_logits: [f64; 2],
        grad_value: f64,
        grad: &mut ProxyParams,
    ) {
        let h = self.h;
        grad.b_act[0] += grad_logits[0];
        grad.b_act[1] += grad_logits[1];
        grad.b_val += grad_value;
        for j in 0..h {
            let t = cache.trunk[j];
            grad.w_act[j] += grad_logits[0] * t;
            grad.w_act[h + j] += grad_logits[1] * t;
            grad.w_val[j] += grad_value * t;
            let d_trunk = grad_logits[0] * self.w_act[j]
                + grad_logits[1] * self.w_act[h + j]
                + grad_value * self.w_val[j];
            let d_pre = d_trunk * (1.0 - t * t);
            if d_pre == 0.0 {
                continue;
            }
            grad.b1[j] += d_pre;
            let row = &mut grad.w1[j * self.d..(j + 1) * self.d];
            row.iter_mut().zip(f).for_each(|(g, x)| *g += d_pre * x);
        }
    }
}

/// Something that can gate candidates.
pub trait GatePolicy: Sync {
    fn evaluate(&self, obs: &Observation<'_>) -> (FeatureVec, PolicyOutput);
}

/// The trainable proxy: feature extractor plus MLP parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyModel {
    pub extractor: FeatureExtractor,
    pub params: ProxyParams,
}

impl ProxyModel {
    pub fn new(extractor: FeatureExtractor, params: ProxyParams) -> Result<Self> {
        params.validate()?;
        if params.d != extractor.dim() {
            return Err(Error::Dimension {
                expected: extractor.dim(),
                actual: params.d,
            });
        }
        Ok(Self { extractor, params })
    }

    /// Fresh model; the same seed drives the embedding and the weights.
    pub fn init(
        vocab_size: usize,
        hidden_dim: usize,
        embed_dim: usize,
        hidden_size: usize,
        seed: u64,
    ) -> Self {
        let extractor = FeatureExtractor::new(vocab_size, hidden_dim, embed_dim, seed);
        let params = ProxyParams::init(extractor.dim(), hidden_size, seed);
        Self { extractor, params }
    }
}

impl GatePolicy for ProxyModel {
    fn evaluate(&self, obs: &Observation<'_>) -> (FeatureVec, PolicyOutput) {
        let f = self.extractor.extract(obs);
        let out = self.params.forward(f.as_slice());
        (f, out)
    }
}

/// Accepts every candidate; equivalent to ungated decoding.
#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysAccept;

impl GatePolicy for AlwaysAccept {
    fn evaluate(&self, _obs: &Observation<'_>) -> (FeatureVec, PolicyOutput) {
        (
            FeatureVec(Vec::new()),
            PolicyOutput {
                action_logits: [0.0, f64::NEG_INFINITY],
                action_probs: [1.0, 0.0],
                value: 0.0,
            },
        )
    }
}

impl<P: GatePolicy + ?Sized> GatePolicy for &P {
    fn evaluate(&self, obs: &Observation<'_>) -> (FeatureVec, PolicyOutput) {
        (**self).evaluate(obs)
    }
}

/// Result of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// `|a - n| / max(|a| + |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `backward` against central finite differences of the scalar
/// probe `grad_logits · logits + grad_value · value`, evaluated in `f64`.
pub fn gradient_check<B>(
    params: &ProxyParams,
    f: &[f64],
    grad_logits: [f64; 2],
    grad_value: f64,
    step: f64,
    backward: B,
) -> GradCheck
where
    B: Fn(&ProxyParams, &[f64], [f64; 2], f64) -> ProxyParams,
{
    let probe = |p: &ProxyParams| {
        let out = p.forward(f);
        grad_logits[0] * out.action_logits[0]
            + grad_logits[1] * out.action_logits[1]
            + grad_value * out.value
    };
    gradient_check_with(
        params,
        f,
        grad_logits,
        grad_value,
        step,
        backward,
        |up, down, x_up, x_down| (probe(up) - probe(down)) / (x_up - x_down),
    )
}

/// Like [`gradient_check`], with the secant slope supplied by the caller.
///
/// `slope(up, down, x_up, x_down)` receives two parameter sets that differ
/// only in the entry under test, whose values are `x_up = θ + step` and
/// `x_down = θ - step`, and returns the probe's slope between them. Useful
/// when the probe must be evaluated in higher precision than `f64`.
pub fn gradient_check_with<B, S>(
    params: &ProxyParams,
    f: &[f64],
    grad_logits: [f64; 2],
    grad_value: f64,
    step: f64,
    backward: B,
    slope: S,
) -> GradCheck
where
    B: Fn(&ProxyParams, &[f64], [f64; 2], f64) -> ProxyParams,
    S: Fn(&ProxyParams, &ProxyParams, f64, f64) -> f64,
{
    let analytic: Vec<f64> = backward(params, f, grad_logits, grad_value)
        .iter()
        .collect();
    let original: Vec<f64> = params.iter().collect();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    let set = |p: &mut ProxyParams, i: usize, v: f64| {
        if let Some(x) = p.iter_mut().nth(i) {
            *x = v;
        }
    };
    let mut up = params.clone();
    let mut down = params.clone();
    for (i, (&a, &x)) in analytic.iter().zip(&original).enumerate() {
        let (x_up, x_down) = (x + step, x - step);
        set(&mut up, i, x_up);
        set(&mut down, i, x_down);
        let err = relative_error(a, slope(&up, &down, x_up, x_down));
        set(&mut up, i, x);
        set(&mut down, i, x);
        if err > worst.max_rel_error {
            worst = GradCheck {
                max_rel_error: err,
                worst_index: i,
            };
        }
    }
    worst
}

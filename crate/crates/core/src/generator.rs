//! Frozen token generators.
//!
//! A [`Generator`] maps a token prefix (prompt followed by the accepted
//! response) to next-token logits and to a hidden feature vector. Two kinds
//! exist: scripted tables, used for fixtures and toy tasks, and add-α smoothed
//! n-gram models estimated from a corpus.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math;

/// Index into the vocabulary.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    eos_id: TokenId,
    labels: Option<Vec<String>>,
}

impl Vocab {
    pub fn new(size: usize, eos_id: TokenId, labels: Option<Vec<String>>) -> Result<Self> {
        if size == 0 {
            return Err(invalid("vocab_size", "must be positive"));
        }
        if eos_id.index() >= size {
            return Err(invalid("eos_id", "must be below vocab_size"));
        }
        if let Some(l) = &labels {
            if l.len() != size {
                return Err(invalid("labels", "must have exactly vocab_size entries"));
            }
        }
        Ok(Self {
            size,
            eos_id,
            labels,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn check(&self, token: TokenId) -> Result<()> {
        if token.index() < self.size {
            Ok(())
        } else {
            Err(Error::InvalidToken {
                token: token.0,
                vocab: self.size,
            })
        }
    }
}

/// A probability distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid("probs", "empty distribution"));
        }
        if entries.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid("probs", "entries must be finite and nonnegative"));
        }
        let total: f64 = entries.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(invalid("probs", "entries must sum to 1"));
        }
        Ok(Self(entries))
    }

    pub(crate) fn from_raw(entries: Vec<f64>) -> Self {
        debug_assert!((entries.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        Self(entries)
    }

    pub fn uniform(size: usize) -> Self {
        Self(vec![1.0 / size as f64; size])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, token: TokenId) -> f64 {
        self.0[token.index()]
    }

    /// Descending-probability order of two tokens; equal probabilities rank
    /// the lower id first.
    pub fn rank_cmp(&self, a: TokenId, b: TokenId) -> Ordering {
        self.get(b)
            .partial_cmp(&self.get(a))
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }

    /// Every token of the vocabulary in descending probability order.
    pub fn ranked(&self) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = (0..self.0.len() as u32).map(TokenId).collect();
        ids.sort_by(|&a, &b| self.rank_cmp(a, b));
        ids
    }

    pub fn argmax(&self) -> TokenId {
        (0..self.0.len() as u32)
            .map(TokenId)
            .min_by(|&a, &b| self.rank_cmp(a, b))
            .expect("nonempty distribution")
    }
}

/// How table rows are matched against a query prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixMatch {
    /// The row key must equal the whole prefix.
    #[default]
    Exact,
    /// The longest row key that is a suffix of the prefix wins; an empty key
    /// acts as a catch-all.
    Suffix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableModel {
    rows: BTreeMap<Vec<TokenId>, TableRow>,
    matching: PrefixMatch,
    max_key_len: usize,
}

impl TableModel {
    pub fn rows(&self) -> impl Iterator<Item = (&[TokenId], &TableRow)> {
        self.rows.iter().map(|(k, v)| (k.as_slice(), v))
    }

    pub fn matching(&self) -> PrefixMatch {
        self.matching
    }

    fn lookup(&self, prefix: &[TokenId]) -> Result<&TableRow> {
        let found = match self.matching {
            PrefixMatch::Exact => self.rows.get(prefix),
            PrefixMatch::Suffix => {
                let longest = self.max_key_len.min(prefix.len());
                (0..=longest)
                    .rev()
                    .find_map(|n| self.rows.get(&prefix[prefix.len() - n..]))
            }
        };
        found.ok_or_else(|| Error::UnscriptedPrefix(prefix.iter().map(|t| t.0).collect()))
    }
}

/// Add-α smoothed n-gram model. The context is the last `order - 1` tokens;
/// near the start of a sequence the shorter available context is used.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    alpha: f64,
    counts: BTreeMap<Vec<TokenId>, Vec<u64>>,
}

impl NgramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn context<'a>(&self, prefix: &'a [TokenId]) -> &'a [TokenId] {
        let n = (self.order - 1).min(prefix.len());
        &prefix[prefix.len() - n..]
    }

    fn conditional(&self, prefix: &[TokenId], vocab: usize) -> Vec<f64> {
        let ctx = self.context(prefix);
        let denom_alpha = self.alpha * vocab as f64;
        match self.counts.get(ctx) {
            Some(counts) => {
                let total: u64 = counts.iter().sum();
                let denom = total as f64 + denom_alpha;
                counts
                    .iter()
                    .map(|&c| (c as f64 + self.alpha) / denom)
                    .collect()
            }
            None => vec![1.0 / vocab as f64; vocab],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorKind {
    Table(TableModel),
    Ngram(NgramModel),
}

/// An immutable next-token model.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    vocab: Vocab,
    kind: GeneratorKind,
    hidden_dim: usize,
    position_scale: usize,
}

impl Generator {
    /// Builds a scripted table generator.
    ///
    /// Rows without a `hidden` vector get the constructed features described
    /// on [`Generator::hidden`].
    pub fn table(
        vocab: Vocab,
        rows: impl IntoIterator<Item = (Vec<TokenId>, TableRow)>,
        matching: PrefixMatch,
        hidden_dim: usize,
        position_scale: usize,
    ) -> Result<Self> {
        Self::check_dims(hidden_dim, position_scale)?;
        let mut map = BTreeMap::new();
        let mut max_key_len = 0;
        for (key, row) in rows {
            for &t in &key {
                vocab.check(t)?;
            }
            if row.logits.len() != vocab.size() {
                return Err(invalid("table", "every row needs vocab_size logits"));
            }
            if row.logits.iter().any(|z| !z.is_finite()) {
                return Err(invalid("table", "logits must be finite"));
            }
            if let Some(h) = &row.hidden {
                if h.len() != hidden_dim {
                    return Err(invalid(
                        "table",
                        "scripted hidden rows need hidden_dim entries",
                    ));
                }
            }
            max_key_len = max_key_len.max(key.len());
            map.insert(key, row);
        }
        if map.is_empty() {
            return Err(invalid("table", "no rows"));
        }
        Ok(Self {
            vocab,
            kind: GeneratorKind::Table(TableModel {
                rows: map,
                matching,
                max_key_len,
            }),
            hidden_dim,
            position_scale,
        })
    }

    /// Estimates an n-gram model from whitespace-free token sequences.
    pub fn ngram(
        vocab: Vocab,
        order: usize,
        alpha: f64,
        corpus: &[Vec<TokenId>],
        hidden_dim: usize,
        position_scale: usize,
    ) -> Result<Self> {
        Self::check_dims(hidden_dim, position_scale)?;
        if order == 0 {
            return Err(invalid("order", "must be at least 1"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid("alpha", "must be positive"));
        }
        let mut counts: BTreeMap<Vec<TokenId>, Vec<u64>> = BTreeMap::new();
        for seq in corpus {
            for (j, &t) in seq.iter().enumerate() {
                vocab.check(t)?;
                let start = j.saturating_sub(order - 1);
                counts
                    .entry(seq[start..j].to_vec())
                    .or_insert_with(|| vec![0; vocab.size()])[t.index()] += 1;
            }
        }
        Ok(Self {
            vocab,
            kind: GeneratorKind::Ngram(NgramModel {
                order,
                alpha,
                counts,
            }),
            hidden_dim,
            position_scale,
        })
    }

    fn check_dims(hidden_dim: usize, position_scale: usize) -> Result<()> {
        if hidden_dim == 0 {
            return Err(invalid("hidden_dim", "must be positive"));
        }
        if position_scale == 0 {
            return Err(invalid("max_len", "must be positive"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn eos(&self) -> TokenId {
        self.vocab.eos_id()
    }

    pub fn kind(&self) -> &GeneratorKind {
        &self.kind
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Length used to normalise the position scalar in hidden features.
    pub fn position_scale(&self) -> usize {
        self.position_scale
    }

    fn check_prefix(&self, prefix: &[TokenId]) -> Result<()> {
        prefix.iter().try_for_each(|&t| self.vocab.check(t))
    }

    /// Next-token logits for `prefix`.
    pub fn logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.check_prefix(prefix)?;
        match &self.kind {
            GeneratorKind::Table(t) => Ok(t.lookup(prefix)?.logits.clone()),
            GeneratorKind::Ngram(m) => Ok(m
                .conditional(prefix, self.vocab.size())
                .into_iter()
                .map(math::ln)
                .collect()),
        }
    }

    /// Hidden feature vector for `prefix`.
    ///
    /// Constructed features are the untempered next-token distribution,
    /// padded with zeros or truncated to `hidden_dim - 1` entries, followed by
    /// `prefix.len() / position_scale`. Table rows with a scripted `hidden`
    /// vector return it verbatim.
    pub fn hidden(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.check_prefix(prefix)?;
        let probs = match &self.kind {
            GeneratorKind::Table(t) => {
                let row = t.lookup(prefix)?;
                if let Some(h) = &row.hidden {
                    return Ok(h.clone());
                }
                math::softmax(&row.logits)
            }
            GeneratorKind::Ngram(m) => m.conditional(prefix, self.vocab.size()),
        };
        let mut out = vec![0.0; self.hidden_dim];
        let n = (self.hidden_dim - 1).min(probs.len());
        out[..n].copy_from_slice(&probs[..n]);
        out[self.hidden_dim - 1] = prefix.len() as f64 / self.position_scale as f64;
        Ok(out)
    }
}

/// Softmax of `logits / temperature`.
pub fn apply_temperature(logits: &[f64], temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidTemperature(temperature));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(invalid("logits", "must be finite"));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    Ok(ProbVector(math::softmax(&scaled)))
}

/// Smallest descending-probability prefix of the vocabulary whose cumulative
/// mass reaches `top_p`. Returned in candidate order (most probable first).
/// Zero-probability tokens are never included.
pub fn nucleus_filter(probs: &ProbVector, top_p: f64) -> Result<Vec<TokenId>> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(invalid("top_p", "must lie in (0, 1]"));
    }
    let mut pool = Vec::new();
    let mut mass = 0.0;
    for t in probs.ranked() {
        let p = probs.get(t);
        if p <= 0.0 && !pool.is_empty() {
            break;
        }
        pool.push(t);
        mass += p;
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().copied().map(TokenId).collect()
    }

    fn two_token_table() -> Generator {
        let vocab = Vocab::new(2, TokenId(1), None).unwrap();
        let rows = vec![(
            vec![],
            TableRow {
                logits: vec![0.0, libm::log(3.0)],
                hidden: Some(vec![0.5, -0.5, 1.0]),
            },
        )];
        Generator::table(vocab, rows, PrefixMatch::Exact, 3, 8).unwrap()
    }

    #[test]
    fn table_reads_back_scripted_logits() {
        let g = two_token_table();
        let z = g.logits(&[]).unwrap();
        assert_eq!(z[0], 0.0);
        assert!((z[1] - 1.0986122886681098).abs() < 1e-12);
        assert_eq!(g.logits(&[]).unwrap(), z);
        assert_eq!(g.hidden(&[]).unwrap(), vec![0.5, -0.5, 1.0]);
    }

    #[test]
    fn table_unscripted_prefix_is_an_error() {
        let g = two_token_table();
        assert!(matches!(
            g.logits(&ids(&[0])),
            Err(Error::UnscriptedPrefix(p)) if p == [0]
        ));
    }

    #[test]
    fn suffix_table_prefers_longest_key() {
        let vocab = Vocab::new(2, TokenId(1), None).unwrap();
        let rows = vec![
            (
                vec![],
                TableRow {
                    logits: vec![0.0, 0.0],
                    hidden: None,
                },
            ),
            (
                ids(&[1]),
                TableRow {
                    logits: vec![1.0, 0.0],
                    hidden: None,
                },
            ),
            (
                ids(&[0, 1]),
                TableRow {
                    logits: vec![2.0, 0.0],
                    hidden: None,
                },
            ),
        ];
        let g = Generator::table(vocab, rows, PrefixMatch::Suffix, 2, 4).unwrap();
        assert_eq!(g.logits(&ids(&[0, 0])).unwrap()[0], 0.0);
        assert_eq!(g.logits(&ids(&[1, 1])).unwrap()[0], 1.0);
        assert_eq!(g.logits(&ids(&[1, 0, 1])).unwrap()[0], 2.0);
    }

    #[test]
    fn unigram_counts_match_hand_count() {
        // corpus "0 0 0": (3 + 1) / (3 + 2) and (0 + 1) / (3 + 2)
        let vocab = Vocab::new(2, TokenId(1), None).unwrap();
        let g = Generator::ngram(vocab, 1, 1.0, &[ids(&[0, 0, 0])], 3, 10).unwrap();
        let z = g.logits(&ids(&[1, 0])).unwrap();
        assert!((libm::exp(z[0]) - 0.8).abs() < 1e-12);
        assert!((libm::exp(z[1]) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn bigram_uses_last_token_context() {
        let vocab = Vocab::new(3, TokenId(2), None).unwrap();
        let corpus = [ids(&[0, 1, 0, 1]), ids(&[0, 2])];
        let g = Generator::ngram(vocab, 2, 0.5, &corpus, 4, 10).unwrap();
        // after 0: next 1 twice, next 2 once
        let p: Vec<f64> = g
            .logits(&ids(&[0]))
            .unwrap()
            .into_iter()
            .map(libm::exp)
            .collect();
        assert!((p[0] - 0.5 / 4.5).abs() < 1e-12);
        assert!((p[1] - 2.5 / 4.5).abs() < 1e-12);
        assert!((p[2] - 1.5 / 4.5).abs() < 1e-12);
        // empty context: sequence starts, both were token 0
        let p0: Vec<f64> = g.logits(&[]).unwrap().into_iter().map(libm::exp).collect();
        assert!((p0[0] - 2.5 / 3.5).abs() < 1e-12);
    }

    #[test]
    fn ngram_hidden_for_unseen_context_is_uniform_plus_position() {
        let vocab = Vocab::new(4, TokenId(3), None).unwrap();
        let g = Generator::ngram(vocab, 2, 1.0, &[ids(&[0, 1])], 5, 8).unwrap();
        // context 3 never seen
        let h = g.hidden(&ids(&[2, 3])).unwrap();
        assert_eq!(h, vec![0.25, 0.25, 0.25, 0.25, 2.0 / 8.0]);
    }

    #[test]
    fn invalid_prefix_token_rejected() {
        let g = two_token_table();
        assert!(matches!(
            g.logits(&ids(&[7])),
            Err(Error::InvalidToken { .. })
        ));
    }

    #[test]
    fn temperature_closed_forms() {
        let z = [0.0, libm::log(3.0)];
        let p = apply_temperature(&z, 1.0).unwrap();
        assert!((p.as_slice()[0] - 0.25).abs() < 1e-12);
        assert!((p.as_slice()[1] - 0.75).abs() < 1e-12);
        // exp(2 ln 3) = 9, so 1/10 and 9/10
        let p = apply_temperature(&z, 0.5).unwrap();
        assert!((p.as_slice()[0] - 0.1).abs() < 1e-12);
        assert!((p.as_slice()[1] - 0.9).abs() < 1e-12);
        let p = apply_temperature(&[2.0; 5], 0.3).unwrap();
        assert!(p.as_slice().iter().all(|&x| (x - 0.2).abs() < 1e-15));
        assert_eq!(
            apply_temperature(&z, 0.0),
            Err(Error::InvalidTemperature(0.0))
        );
        assert!(apply_temperature(&z, -1.0).is_err());
    }

    #[test]
    fn nucleus_examples() {
        let p = ProbVector::new(vec![0.5, 0.3, 0.2]).unwrap();
        assert_eq!(nucleus_filter(&p, 0.7).unwrap(), ids(&[0, 1]));
        assert_eq!(nucleus_filter(&p, 1.0).unwrap(), ids(&[0, 1, 2]));
        let p = ProbVector::new(vec![0.9, 0.1]).unwrap();
        assert_eq!(nucleus_filter(&p, 0.5).unwrap(), ids(&[0]));
        let p = ProbVector::new(vec![0.2, 0.4, 0.4]).unwrap();
        assert_eq!(nucleus_filter(&p, 0.5).unwrap(), ids(&[1, 2]));
        assert!(nucleus_filter(&p, 0.0).is_err());
    }

    #[test]
    fn nucleus_skips_zero_mass_tokens() {
        let p = ProbVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(nucleus_filter(&p, 1.0).unwrap(), ids(&[1]));
    }

    #[test]
    fn vocab_invariants() {
        assert!(Vocab::new(3, TokenId(3), None).is_err());
        assert!(Vocab::new(2, TokenId(0), Some(vec!["a".into()])).is_err());
        assert!(Vocab::new(0, TokenId(0), None).is_err());
    }

    proptest! {
        #[test]
        fn temperature_preserves_ranking(
            logits in prop::collection::vec(-8.0f64..8.0, 1..12),
            temp in 0.05f64..5.0,
        ) {
            let base = apply_temperature(&logits, 1.0).unwrap();
            let hot = apply_temperature(&logits, temp).unwrap();
            prop_assert_eq!(base.argmax(), hot.argmax());
            for i in 0..logits.len() {
                for j in 0..logits.len() {
                    if logits[i] > logits[j] {
                        prop_assert!(hot.as_slice()[i] >= hot.as_slice()[j]);
                    }
                }
            }
            let s: f64 = hot.as_slice().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }

        #[test]
        fn nucleus_contains_argmax_and_reaches_mass(
            logits in prop::collection::vec(-6.0f64..6.0, 1..12),
            top_p in 0.01f64..=1.0,
        ) {
            let p = apply_temperature(&logits, 1.0).unwrap();
            let pool = nucleus_filter(&p, top_p).unwrap();
            prop_assert!(!pool.is_empty());
            prop_assert_eq!(pool[0], p.argmax());
            let mass: f64 = pool.iter().map(|&t| p.get(t)).sum();
            prop_assert!(mass >= top_p - 1e-9);
            // minimal: dropping the last member falls short
            let short: f64 = pool[..pool.len() - 1].iter().map(|&t| p.get(t)).sum();
            prop_assert!(short < top_p + 1e-9);
        }

        #[test]
        fn ngram_rows_normalise(
            corpus in prop::collection::vec(prop::collection::vec(0u32..5, 0..8), 0..6),
            order in 1usize..4,
            alpha in 0.01f64..3.0,
            prefix in prop::collection::vec(0u32..5, 0..6),
        ) {
            let vocab = Vocab::new(5, TokenId(4), None).unwrap();
            let corpus: Vec<Vec<TokenId>> =
                corpus.into_iter().map(|s| s.into_iter().map(TokenId).collect()).collect();
            let g = Generator::ngram(vocab, order, alpha, &corpus, 3, 10).unwrap();
            let prefix: Vec<TokenId> = prefix.into_iter().map(TokenId).collect();
            let z = g.logits(&prefix).unwrap();
            let s: f64 = z.iter().map(|&x| libm::exp(x)).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert_eq!(g.logits(&prefix).unwrap(), z);
            prop_assert_eq!(g.hidden(&prefix).unwrap(), g.hidden(&prefix).unwrap());
        }
    }
}

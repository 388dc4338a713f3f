//! Reward oracles and the pairwise judge.

use alloc::boxed::Box;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::generator::TokenId;

/// Deterministic scorer of a completed `(prompt, response)` pair.
pub trait RewardOracle: Sync {
    fn score(&self, prompt: &[TokenId], response: &[TokenId]) -> f64;

    /// An upper bound on the score of any continuation of `partial`, if one
    /// is known. Used to prune exhaustive gate searches.
    fn upper_bound(&self, _prompt: &[TokenId], _partial: &[TokenId]) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedOracle {
    pub weight: f64,
    pub spec: OracleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleSpec {
    /// `-penalty` per occurrence of any listed token.
    Forbidden {
        tokens: Vec<TokenId>,
        penalty: f64,
    },
    /// `+bonus` per non-overlapping, left-to-right occurrence of each n-gram.
    Pattern {
        ngrams: Vec<Vec<TokenId>>,
        bonus: f64,
    },
    /// `-((len - target) / width)^2`.
    LengthShaped {
        target: f64,
        width: f64,
    },
    Composite {
        parts: Vec<WeightedOracle>,
    },
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            OracleSpec::Forbidden { penalty, .. } => {
                if !penalty.is_finite() {
                    return Err(invalid("penalty", "must be finite"));
                }
            }
            OracleSpec::Pattern { ngrams, bonus } => {
                if !bonus.is_finite() {
                    return Err(invalid("bonus", "must be finite"));
                }
                if ngrams.iter().any(|g| g.is_empty()) {
                    return Err(invalid("ngrams", "patterns must be nonempty"));
                }
            }
            OracleSpec::LengthShaped { target, width } => {
                if !target.is_finite() {
                    return Err(invalid("target", "must be finite"));
                }
                if !(*width > 0.0 && width.is_finite()) {
                    return Err(invalid("width", "must be positive"));
                }
            }
            OracleSpec::Composite { parts } => {
                for p in parts {
                    if !p.weight.is_finite() {
                        return Err(invalid("weight", "must be finite"));
                    }
                    p.spec.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Checks every token mentioned by the oracle against a vocabulary size.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        let check = |t: &TokenId| {
            if t.index() < vocab_size {
                Ok(())
            } else {
                Err(Error::InvalidToken {
                    token: t.0,
                    vocab: vocab_size,
                })
            }
        };
        match self {
            OracleSpec::Forbidden { tokens, .. } => tokens.iter().try_for_each(check),
            OracleSpec::Pattern { ngrams, .. } => ngrams.iter().flatten().try_for_each(check),
            OracleSpec::LengthShaped { .. } => Ok(()),
            OracleSpec::Composite { parts } => parts
                .iter()
                .try_for_each(|p| p.spec.check_vocab(vocab_size)),
        }
    }

    pub fn composite(parts: impl IntoIterator<Item = (f64, OracleSpec)>) -> Self {
        OracleSpec::Composite {
            parts: parts
                .into_iter()
                .map(|(weight, spec)| WeightedOracle { weight, spec })
                .collect(),
        }
    }
}

fn count_non_overlapping(haystack: &[TokenId], needle: &[TokenId]) -> usize {
    let mut count = 0;
    let mut i = 0;
    while i + needle.len() <= haystack.len() {
        if &haystack[i..i + needle.len()] == needle {
            count += 1;
            i += needle.len();
        } else {
            i += 1;
        }
    }
    count
}

impl RewardOracle for OracleSpec {
    #[allow(clippy::only_used_in_recursion)]
    fn score(&self, prompt: &[TokenId], response: &[TokenId]) -> f64 {
        match self {
            OracleSpec::Forbidden { tokens, penalty } => {
                let hits = response.iter().filter(|t| tokens.contains(t)).count();
                0.0 - penalty * hits as f64
            }
            OracleSpec::Pattern { ngrams, bonus } => {
                let hits: usize = ngrams
                    .iter()
                    .map(|g| count_non_overlapping(response, g))
                    .sum();
                bonus * hits as f64
            }
            OracleSpec::LengthShaped { target, width } => {
                let z = (response.len() as f64 - target) / width;
                -z * z
            }
            OracleSpec::Composite { parts } => parts
                .iter()
                .map(|p| p.weight * p.spec.score(prompt, response))
                .sum(),
        }
    }

    fn upper_bound(&self, prompt: &[TokenId], partial: &[TokenId]) -> Option<f64> {
        match self {
            // appending tokens can only add penalties
            OracleSpec::Forbidden { penalty, .. } if *penalty >= 0.0 => {
                Some(self.score(prompt, partial))
            }
            OracleSpec::Pattern { bonus, .. } if *bonus <= 0.0 => Some(self.score(prompt, partial)),
            OracleSpec::Composite { parts } => parts.iter().try_fold(0.0, |acc, p| {
                if p.weight >= 0.0 {
                    Some(acc + p.weight * p.spec.upper_bound(prompt, partial)?)
                } else {
                    None
                }
            }),
            _ => None,
        }
    }
}

impl<T: RewardOracle + ?Sized + Send> RewardOracle for Box<T> {
    fn score(&self, prompt: &[TokenId], response: &[TokenId]) -> f64 {
        (**self).score(prompt, response)
    }

    fn upper_bound(&self, prompt: &[TokenId], partial: &[TokenId]) -> Option<f64> {
        (**self).upper_bound(prompt, partial)
    }
}

/// Fraction of aligned pairs where `a` beats `b`; ties count one half.
pub fn win_rate(scores_a: &[f64], scores_b: &[f64]) -> Result<f64> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::LengthMismatch(scores_a.len(), scores_b.len()));
    }
    if scores_a.is_empty() {
        return Err(invalid("scores", "no pairs to compare"));
    }
    // count in half-wins so the complement identity is exact
    let halves: u64 = scores_a
        .iter()
        .zip(scores_b)
        .map(|(a, b)| match a.partial_cmp(b) {
            Some(core::cmp::Ordering::Greater) => 2,
            Some(core::cmp::Ordering::Equal) => 1,
            _ => 0,
        })
        .sum();
    Ok(halves as f64 / (2 * scores_a.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().copied().map(TokenId).collect()
    }

    fn forbidden3() -> OracleSpec {
        OracleSpec::Forbidden {
            tokens: ids(&[3]),
            penalty: 1.0,
        }
    }

    fn pattern12() -> OracleSpec {
        OracleSpec::Pattern {
            ngrams: vec![ids(&[1, 2])],
            bonus: 1.0,
        }
    }

    #[test]
    fn forbidden_counts_occurrences() {
        assert_eq!(forbidden3().score(&[], &ids(&[1, 3, 3, 2])), -2.0);
    }

    #[test]
    fn pattern_counts_non_overlapping() {
        assert_eq!(pattern12().score(&[], &ids(&[1, 2, 1, 2])), 2.0);
        let aa = OracleSpec::Pattern {
            ngrams: vec![ids(&[1, 1])],
            bonus: 1.0,
        };
        assert_eq!(aa.score(&[], &ids(&[1, 1, 1])), 1.0);
    }

    #[test]
    fn composite_is_weighted_sum() {
        let c = OracleSpec::composite([(0.5, forbidden3()), (0.5, pattern12())]);
        let f = c.score(&[], &ids(&[1, 3, 3, 2]));
        let p = c.score(&[], &ids(&[1, 2, 1, 2]));
        assert_eq!(f, -1.0 + 0.5 * 0.0);
        assert_eq!(p, 1.0);
        // both effects in one response: 0.5 * (-2) + 0.5 * 2
        assert_eq!(c.score(&[], &ids(&[1, 2, 3, 3, 1, 2])), 0.0);
    }

    #[test]
    fn length_shaped_peaks_at_target() {
        let o = OracleSpec::LengthShaped {
            target: 4.0,
            width: 2.0,
        };
        assert_eq!(o.score(&[], &ids(&[0, 0, 0, 0])), 0.0);
        assert_eq!(o.score(&[], &ids(&[0, 0])), -1.0);
    }

    #[test]
    fn validation() {
        assert!(OracleSpec::LengthShaped {
            target: 1.0,
            width: 0.0
        }
        .validate()
        .is_err());
        assert!(OracleSpec::composite([(f64::NAN, forbidden3())])
            .validate()
            .is_err());
        assert!(forbidden3().check_vocab(3).is_err());
        assert!(forbidden3().check_vocab(4).is_ok());
    }

    #[test]
    fn win_rate_examples() {
        assert_eq!(win_rate(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(win_rate(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.5);
        assert_eq!(win_rate(&[1.0, 0.0, 2.0], &[0.0, 1.0, 2.0]).unwrap(), 0.5);
        assert_eq!(win_rate(&[1.0], &[]), Err(Error::LengthMismatch(1, 0)));
    }

    #[test]
    fn forbidden_upper_bound_is_partial_score() {
        let o = forbidden3();
        assert_eq!(o.upper_bound(&[], &ids(&[3, 1])), Some(-1.0));
        assert_eq!(pattern12().upper_bound(&[], &[]), None);
    }

    proptest! {
        #[test]
        fn win_rate_complements(
            pairs in prop::collection::vec((-3i32..3, -3i32..3), 1..40)
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            let w = win_rate(&a, &b).unwrap() + win_rate(&b, &a).unwrap();
            prop_assert_eq!(w, 1.0);
        }

        #[test]
        fn score_is_pure(resp in prop::collection::vec(0u32..6, 0..20)) {
            let o = OracleSpec::composite([(0.3, forbidden3()), (1.2, pattern12())]);
            let r = ids(&resp);
            prop_assert_eq!(o.score(&[], &r), o.score(&[], &r));
            let bound = forbidden3().upper_bound(&[], &r).unwrap();
            let mut longer = r.clone();
            longer.push(TokenId(3));
            prop_assert!(forbidden3().score(&[], &longer) <= bound);
        }
    }
}

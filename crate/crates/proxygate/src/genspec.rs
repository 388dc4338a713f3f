//! JSON generator specifications and token corpora.

use std::fs;
use std::path::{Path, PathBuf};

use proxygate_core::generator::{GeneratorKind, PrefixMatch, TableRow};
use proxygate_core::{Generator, TokenId, Vocab};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecKind {
    Table,
    Ngram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableEntry {
    pub prefix: Vec<TokenId>,
    pub logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NgramSpec {
    pub order: usize,
    pub alpha: f64,
    /// Relative paths resolve against the spec file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_path: Option<PathBuf>,
    /// Inline corpus; filled from `corpus_path` on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<Vec<Vec<TokenId>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: SpecKind,
    pub vocab_size: usize,
    pub eos_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<TableEntry>>,
    #[serde(default, rename = "match")]
    pub matching: PrefixMatch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ngram: Option<NgramSpec>,
    pub hidden_dim: usize,
    /// Normaliser of the position feature in constructed hidden vectors.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_max_len() -> usize {
    32
}

impl GeneratorSpec {
    /// Reads a spec and inlines its corpus so the result no longer depends
    /// on the filesystem.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut spec: GeneratorSpec = serde_json::from_str(&text).map_err(CliError::json(path))?;
        if let Some(ngram) = spec.ngram.as_mut() {
            if let Some(rel) = ngram.corpus_path.take() {
                let full = path.parent().unwrap_or(Path::new(".")).join(rel);
                let text = fs::read_to_string(&full).map_err(CliError::io(&full))?;
                ngram.corpus = Some(parse_corpus(&text, &full)?);
            }
        }
        Ok(spec)
    }

    pub fn build(&self) -> Result<Generator> {
        let vocab = Vocab::new(self.vocab_size, TokenId(self.eos_id), self.labels.clone())?;
        let generator = match self.kind {
            SpecKind::Table => {
                let rows = self.table.as_ref().ok_or(CliError::Config {
                    field: "table",
                    reason: "table generators need a \"table\" array".into(),
                })?;
                Generator::table(
                    vocab,
                    rows.iter().map(|e| {
                        (
                            e.prefix.clone(),
                            TableRow {
                                logits: e.logits.clone(),
                                hidden: e.hidden.clone(),
                            },
                        )
                    }),
                    self.matching,
                    self.hidden_dim,
                    self.max_len,
                )?
            }
            SpecKind::Ngram => {
                let ngram = self.ngram.as_ref().ok_or(CliError::Config {
                    field: "ngram",
                    reason: "ngram generators need an \"ngram\" object".into(),
                })?;
                let corpus = ngram.corpus.as_ref().ok_or(CliError::Config {
                    field: "corpus_path",
                    reason: "no corpus given".into(),
                })?;
                Generator::ngram(
                    vocab,
                    ngram.order,
                    ngram.alpha,
                    corpus,
                    self.hidden_dim,
                    self.max_len,
                )?
            }
        };
        Ok(generator)
    }

    /// Spec of an n-gram model is not recoverable from its counts, so only
    /// table generators round-trip.
    pub fn from_table(generator: &Generator) -> Option<Self> {
        let GeneratorKind::Table(table) = generator.kind() else {
            return None;
        };
        Some(Self {
            kind: SpecKind::Table,
            vocab_size: generator.vocab_size(),
            eos_id: generator.eos().0,
            labels: generator.vocab().labels().map(<[String]>::to_vec),
            table: Some(
                table
                    .rows()
                    .map(|(prefix, row)| TableEntry {
                        prefix: prefix.to_vec(),
                        logits: row.logits.clone(),
                        hidden: row.hidden.clone(),
                    })
                    .collect(),
            ),
            matching: table.matching(),
            ngram: None,
            hidden_dim: generator.hidden_dim(),
            max_len: generator.position_scale(),
        })
    }
}

/// Whitespace-separated token ids, one sequence per line; blank lines are
/// skipped.
pub fn parse_corpus(text: &str, path: &Path) -> Result<Vec<Vec<TokenId>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|w| {
                    w.parse::<u32>().map(TokenId).map_err(|e| CliError::Corpus {
                        path: path.to_path_buf(),
                        line: i + 1,
                        reason: format!("{w:?}: {e}"),
                    })
                })
                .collect()
        })
        .collect()
}

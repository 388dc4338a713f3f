//! On-disk formats: checkpoints, metrics logs, traces and result tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use proxygate_core::experiments::{HistogramBin, ScoreSummary};
use proxygate_core::proxy::FeatureExtractor;
use proxygate_core::trainer::MetricsRow;
use proxygate_core::{Action, Generator, ProxyModel, ProxyParams, TokenId, Trajectory};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Proxy checkpoint. Matrices are row-major nested arrays. The embedding
/// table is not stored: it is regenerated from `seed`, `vocab_size`,
/// `hidden_dim` and `embed_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub d: usize,
    pub h: usize,
    pub seed: u64,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w_act: Vec<Vec<f64>>,
    pub b_act: Vec<f64>,
    pub w_val: Vec<f64>,
    pub b_val: f64,
}

impl Checkpoint {
    pub fn from_model(model: &ProxyModel) -> Self {
        let p = &model.params;
        let ex = &model.extractor;
        Self {
            version: CHECKPOINT_VERSION,
            d: p.d,
            h: p.h,
            seed: ex.seed(),
            vocab_size: ex.vocab_size(),
            hidden_dim: ex.hidden_dim(),
            embed_dim: ex.embed_dim(),
            w1: p.w1.chunks(p.d.max(1)).map(<[f64]>::to_vec).collect(),
            b1: p.b1.clone(),
            w_act: p.w_act.chunks(p.h.max(1)).map(<[f64]>::to_vec).collect(),
            b_act: p.b_act.to_vec(),
            w_val: p.w_val.clone(),
            b_val: p.b_val,
        }
    }

    /// Rebuilds the model, checking it fits `generator` and the expected
    /// embedding width.
    pub fn to_model(&self, generator: &Generator, embed_dim: usize) -> Result<ProxyModel> {
        let incompatible = |what: String| Err(CliError::IncompatibleCheckpoint(what));
        if self.vocab_size != generator.vocab_size() {
            return incompatible(format!(
                "vocab_size {} but the generator has {}",
                self.vocab_size,
                generator.vocab_size()
            ));
        }
        if self.hidden_dim != generator.hidden_dim() {
            return incompatible(format!(
                "hidden_dim {} but the generator has {}",
                self.hidden_dim,
                generator.hidden_dim()
            ));
        }
        if self.embed_dim != embed_dim {
            return incompatible(format!(
                "embed_dim {} but the config asks for {embed_dim}",
                self.embed_dim
            ));
        }
        let extractor =
            FeatureExtractor::new(self.vocab_size, self.hidden_dim, self.embed_dim, self.seed);
        if self.d != extractor.dim() {
            return incompatible(format!(
                "d = {} but features have {}",
                self.d,
                extractor.dim()
            ));
        }
        let rows_ok = |m: &[Vec<f64>], rows: usize, cols: usize| {
            m.len() == rows && m.iter().all(|r| r.len() == cols)
        };
        if !rows_ok(&self.w1, self.h, self.d)
            || !rows_ok(&self.w_act, 2, self.h)
            || self.b1.len() != self.h
            || self.b_act.len() != 2
            || self.w_val.len() != self.h
        {
            return incompatible(format!(
                "weights do not match d = {}, h = {}",
                self.d, self.h
            ));
        }
        let params = ProxyParams {
            d: self.d,
            h: self.h,
            w1: self.w1.concat(),
            b1: self.b1.clone(),
            w_act: self.w_act.concat(),
            b_act: [self.b_act[0], self.b_act[1]],
            w_val: self.w_val.clone(),
            b_val: self.b_val,
        };
        ProxyModel::new(extractor, params)
            .map_err(|e| CliError::IncompatibleCheckpoint(e.to_string()))
    }
}

pub fn parse_checkpoint(text: &str, path: &Path) -> Result<Checkpoint> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(CliError::json(path))?;
    match value.get("version") {
        None => return Err(CliError::UnversionedCheckpoint),
        Some(v) if v.as_u64() != Some(CHECKPOINT_VERSION as u64) => {
            return Err(CliError::IncompatibleCheckpoint(format!("version {v}")));
        }
        Some(_) => {}
    }
    serde_json::from_value(value).map_err(CliError::json(path))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    parse_checkpoint(&text, path)
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(MetricsRow::HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.episodes,
            r.mean_reward,
            r.mean_len,
            r.reject_rate,
            r.masked_frac,
            r.policy_loss,
            r.value_loss,
            r.entropy,
            r.clip_frac
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode: usize,
    pub position: usize,
    pub candidate: TokenId,
    pub action: Action,
    pub logp: f64,
    pub value: f64,
    pub masked: bool,
    pub reward: f64,
}

/// One JSON object per decision, episodes in order.
pub fn trace_jsonl(episodes: &[Trajectory]) -> String {
    let mut out = String::new();
    for (episode, t) in episodes.iter().enumerate() {
        for d in &t.decisions {
            let rec = TraceRecord {
                episode,
                position: d.position,
                candidate: d.candidate,
                action: d.action,
                logp: d.logp,
                value: d.value,
                masked: d.masked,
                reward: d.reward,
            };
            out.push_str(&serde_json::to_string(&rec).expect("trace records serialise"));
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub prompt_index: usize,
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_score: Option<f64>,
}

pub fn scores_jsonl(records: &[ScoreRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("score records serialise"));
        out.push('\n');
    }
    out
}

pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut out = String::from("bin_left,bin_right,count\n");
    for b in bins {
        let _ = writeln!(out, "{},{},{}", b.left, b.right, b.count);
    }
    out
}

/// `system,mean,stddev,std_error,count` rows.
pub fn summary_csv(rows: &[(&str, &ScoreSummary)]) -> String {
    let mut out = String::from("system,mean,stddev,std_error,count\n");
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{name},{},{},{},{}",
            s.mean,
            s.stddev,
            s.standard_error(),
            s.count
        );
    }
    out
}

pub(crate) fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(CliError::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_gate() {
        let p = Path::new("ck.json");
        assert!(matches!(
            parse_checkpoint("{\"d\": 1}", p),
            Err(CliError::UnversionedCheckpoint)
        ));
        assert!(matches!(
            parse_checkpoint("{\"version\": 9}", p),
            Err(CliError::IncompatibleCheckpoint(_))
        ));
    }

    #[test]
    fn histogram_layout() {
        let csv = histogram_csv(&[HistogramBin {
            left: -1.0,
            right: 0.5,
            count: 3,
        }]);
        assert_eq!(csv, "bin_left,bin_right,count\n-1,0.5,3\n");
    }
}

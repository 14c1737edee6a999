//! OOD score functions. Larger scores mean "more in-distribution".
//!
//! Every softmax-style score is computed from `f64` logits `h·z / τ` with a
//! max shift, so temperatures as small as 1e-3 over hundreds of thousands of
//! labels neither overflow nor lose the positive mass.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_io::{check_dims, dot, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::mining::group_negatives;

/// A typical CLIP pretraining temperature (0.01) divided by ten.
pub const DEFAULT_TAU: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub tau: f64,
    pub group_size: Option<usize>,
    pub seed: u64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            group_size: None,
            seed: 0,
        }
    }
}

impl ScoreConfig {
    pub fn with_tau(tau: f64) -> Result<Self> {
        let cfg = Self { tau, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if self.group_size == Some(0) {
            return Err(Error::invalid("group size must be >= 1"));
        }
        Ok(())
    }
}

fn check_positives(images: &EmbeddingMatrix, pos: &EmbeddingMatrix) -> Result<()> {
    check_dims(images, pos)?;
    if pos.is_empty() {
        return Err(Error::EmptyPositives);
    }
    Ok(())
}

/// `(max, Σ exp(x - max))` over the logits `h·z / τ`.
fn shifted_sum(h: &[f32], text: &EmbeddingMatrix, tau: f64) -> (f64, f64) {
    let logits: Vec<f64> = text.iter_rows().map(|z| dot(h, z) / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum = logits.iter().map(|&l| (l - max).exp()).sum();
    (max, sum)
}

fn log_sum_exp(h: &[f32], text: &EmbeddingMatrix, tau: f64) -> f64 {
    let (max, sum) = shifted_sum(h, text, tau);
    max + sum.ln()
}

fn per_image<F>(images: &EmbeddingMatrix, f: F) -> Vec<f64>
where
    F: Fn(&[f32]) -> f64 + Sync,
{
    (0..images.rows()).into_par_iter().map(|i| f(images.row(i))).collect()
}

/// Positive share of the softmax mass over positives and negatives.
///
/// Computed as `1 / (1 + exp(lse_neg - lse_pos))` so that tiny scores keep
/// full relative precision. An empty negative set gives exactly 1.
pub fn score_posneg(
    images: &EmbeddingMatrix,
    pos_text: &EmbeddingMatrix,
    neg_text: &EmbeddingMatrix,
    cfg: &ScoreConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_positives(images, pos_text)?;
    check_dims(images, neg_text)?;
    let tau = cfg.tau;
    Ok(per_image(images, |h| {
        if neg_text.is_empty() {
            return 1.0;
        }
        let gap = log_sum_exp(h, neg_text, tau) - log_sum_exp(h, pos_text, tau);
        1.0 / (1.0 + gap.exp())
    }))
}

/// Mean of [`score_posneg`] over negative groups.
pub fn score_grouped(
    images: &EmbeddingMatrix,
    pos_text: &EmbeddingMatrix,
    neg_groups: &[EmbeddingMatrix],
    cfg: &ScoreConfig,
) -> Result<Vec<f64>> {
    if neg_groups.is_empty() {
        return Err(Error::invalid("grouped score needs at least one group"));
    }
    let mut total = vec![0f64; images.rows()];
    for g in neg_groups {
        for (t, s) in total.iter_mut().zip(score_posneg(images, pos_text, g, cfg)?) {
            *t += s;
        }
    }
    let n = neg_groups.len() as f64;
    Ok(total.into_iter().map(|t| t / n).collect())
}

/// Splits `neg_text` rows into random groups of `cfg.group_size` (seeded by
/// `cfg.seed`) and scores with [`score_grouped`]. Without a group size this is
/// plain [`score_posneg`].
pub fn score_grouped_random(
    images: &EmbeddingMatrix,
    pos_text: &EmbeddingMatrix,
    neg_text: &EmbeddingMatrix,
    cfg: &ScoreConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let Some(size) = cfg.group_size else {
        return score_posneg(images, pos_text, neg_text, cfg);
    };
    if neg_text.is_empty() {
        return score_posneg(images, pos_text, neg_text, cfg);
    }
    let all: Vec<usize> = (0..neg_text.rows()).collect();
    let groups = group_negatives(&all, size, cfg.seed)?
        .iter()
        .map(|g| neg_text.select_rows(g))
        .collect::<Result<Vec<_>>>()?;
    score_grouped(images, pos_text, &groups, cfg)
}

/// Maximum softmax probability over the positive labels.
pub fn score_mcm(images: &EmbeddingMatrix, pos_text: &EmbeddingMatrix, cfg: &ScoreConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_positives(images, pos_text)?;
    Ok(per_image(images, |h| 1.0 / shifted_sum(h, pos_text, cfg.tau).1))
}

/// Largest cosine similarity to any positive label.
pub fn score_maxlogit(images: &EmbeddingMatrix, pos_text: &EmbeddingMatrix) -> Result<Vec<f64>> {
    check_positives(images, pos_text)?;
    Ok(per_image(images, |h| {
        pos_text
            .iter_rows()
            .map(|z| dot(h, z))
            .fold(f64::NEG_INFINITY, f64::max)
    }))
}

/// `τ · log Σ exp(h·z / τ)` over the positives.
pub fn score_energy(images: &EmbeddingMatrix, pos_text: &EmbeddingMatrix, cfg: &ScoreConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_positives(images, pos_text)?;
    Ok(per_image(images, |h| cfg.tau * log_sum_exp(h, pos_text, cfg.tau)))
}

/// `index,score` CSV with 17 significant digits.
pub fn write_scores_csv(scores: &[f64], mut w: impl Write) -> Result<()> {
    writeln!(w, "index,score")?;
    for (i, s) in scores.iter().enumerate() {
        writeln!(w, "{i},{s:.16e}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "index,score" => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "expected header \"index,score\"".into(),
            })
        }
    }
    let mut scores = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        let (idx, val) = line.split_once(',').ok_or_else(|| parse_err("missing comma"))?;
        let idx: usize = idx.trim().parse().map_err(|_| parse_err("bad index"))?;
        if idx != scores.len() {
            return Err(parse_err("indices must be consecutive from 0"));
        }
        let v: f64 = val.trim().parse().map_err(|_| parse_err("bad score"))?;
        if !v.is_finite() {
            return Err(parse_err("non-finite score"));
        }
        scores.push(v);
    }
    if scores.is_empty() {
        return Err(Error::invalid("score file has no rows"));
    }
    Ok(scores)
}

//! Positive and negative label mining from a corpus.
//!
//! Positive miners ([`posmine`], [`clustermine`]) pick the corpus labels that
//! describe the in-distribution images; the negatives default to the
//! complement of the positives and can be pruned to the `K` labels most
//! dissimilar from the positives with [`negative_mine`].

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterAssignment;
use crate::corpus::Corpus;
use crate::embedding_io::{check_dims, dot, EmbeddingMatrix, LabelList};
use crate::error::{Error, Result};

/// Default minimum assignment count for PosMine.
pub const DEFAULT_MIN_COUNT: usize = 100;
/// Default cluster count for ClusterMine at ImageNet scale.
pub const DEFAULT_CLUSTERS: usize = 4000;
pub const DEFAULT_PERCENTILE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningMethod {
    Posmine,
    Clustermine,
    GivenGt,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningParams {
    #[serde(rename = "C", skip_serializing_if = "Option::is_none", default)]
    pub clusters: Option<usize>,
    #[serde(rename = "M", skip_serializing_if = "Option::is_none", default)]
    pub min_count: Option<usize>,
    #[serde(rename = "K", skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub percentile: Option<f64>,
}

/// Disjoint positive and negative index sets into a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedLabelSets {
    pub method: MiningMethod,
    pub params: MiningParams,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

impl MinedLabelSets {
    /// Positives with complement negatives.
    pub fn with_complement(
        method: MiningMethod,
        params: MiningParams,
        mut pos: Vec<usize>,
        corpus_len: usize,
    ) -> Result<Self> {
        pos.sort_unstable();
        pos.dedup();
        let neg = complement_negatives(&pos, corpus_len)?;
        Ok(Self {
            method,
            params,
            pos,
            neg,
        })
    }

    /// Checks sortedness, disjointness and range against a corpus size.
    pub fn validate(&self, corpus_len: usize) -> Result<()> {
        for (name, set) in [("pos", &self.pos), ("neg", &self.neg)] {
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!("{name} indices not strictly sorted")));
            }
            if set.last().is_some_and(|&i| i >= corpus_len) {
                return Err(Error::invalid(format!(
                    "{name} index out of range for corpus of {corpus_len}"
                )));
            }
        }
        let mut i = 0;
        for &n in &self.neg {
            while i < self.pos.len() && self.pos[i] < n {
                i += 1;
            }
            if i < self.pos.len() && self.pos[i] == n {
                return Err(Error::invalid(format!("label {n} is both positive and negative")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_json(&s)
    }

    /// Writes the JSON file and a companion `<stem>.labels.txt` listing the
    /// positive label strings.
    pub fn save(&self, path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
        let path = path.as_ref();
        let mut json = self.to_json()?;
        json.push('\n');
        std::fs::write(path, json).map_err(|e| Error::io_at(path, e))?;
        let dump = path.with_extension("labels.txt");
        let mut text = String::new();
        for &i in &self.pos {
            text.push_str(corpus.labels.get(i).unwrap_or_default());
            text.push('\n');
        }
        std::fs::write(&dump, text).map_err(|e| Error::io_at(dump, e))
    }

    pub fn pos_labels(&self, corpus: &Corpus) -> Result<LabelList> {
        corpus.labels.select(&self.pos)
    }
}

/// Per-image top-1 corpus label under zero-shot inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotAssignment {
    pub top1: Vec<usize>,
    pub similarity: Vec<f64>,
}

impl ZeroShotAssignment {
    pub fn len(&self) -> usize {
        self.top1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.top1.is_empty()
    }
}

/// Argmax-cosine corpus label for every image; ties go to the lower index.
pub fn zero_shot_assign(images: &EmbeddingMatrix, text: &EmbeddingMatrix) -> Result<ZeroShotAssignment> {
    check_dims(images, text)?;
    if text.is_empty() {
        return Err(Error::invalid("zero-shot inference needs at least one text row"));
    }
    let (top1, similarity) = (0..images.rows())
        .into_par_iter()
        .map(|i| {
            let h = images.row(i);
            let mut best = (0usize, f64::NEG_INFINITY);
            for (j, z) in text.iter_rows().enumerate() {
                let s = dot(h, z);
                if s > best.1 {
                    best = (j, s);
                }
            }
            best
        })
        .unzip();
    Ok(ZeroShotAssignment { top1, similarity })
}

fn check_assignment(assign: &ZeroShotAssignment, corpus_len: usize) -> Result<()> {
    if let Some(&bad) = assign.top1.iter().find(|&&i| i >= corpus_len) {
        return Err(Error::invalid(format!(
            "zero-shot label {bad} out of range for corpus of {corpus_len}"
        )));
    }
    Ok(())
}

/// Labels that receive at least `min_count` zero-shot assignments.
pub fn posmine(assign: &ZeroShotAssignment, corpus: &Corpus, min_count: usize) -> Result<MinedLabelSets> {
    if min_count == 0 {
        return Err(Error::invalid("M must be >= 1"));
    }
    check_assignment(assign, corpus.len())?;
    let mut counts = vec![0usize; corpus.len()];
    for &l in &assign.top1 {
        counts[l] += 1;
    }
    let pos: Vec<usize> = (0..corpus.len()).filter(|&l| counts[l] >= min_count).collect();
    if pos.is_empty() {
        return Err(Error::NoPositivesMined(min_count));
    }
    MinedLabelSets::with_complement(
        MiningMethod::Posmine,
        MiningParams {
            min_count: Some(min_count),
            ..Default::default()
        },
        pos,
        corpus.len(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMineOutput {
    pub sets: MinedLabelSets,
    /// Voted corpus label per cluster; `None` for empty clusters.
    pub cluster_labels: Vec<Option<usize>>,
}

impl ClusterMineOutput {
    /// Labels of the non-empty clusters, in cluster order.
    pub fn voted_labels(&self) -> Vec<usize> {
        self.cluster_labels.iter().flatten().copied().collect()
    }
}

/// Majority vote of zero-shot labels within each cluster.
pub fn clustermine(
    assign: &ZeroShotAssignment,
    clusters: &ClusterAssignment,
    corpus: &Corpus,
) -> Result<ClusterMineOutput> {
    if assign.len() != clusters.assignment.len() {
        return Err(Error::LengthMismatch {
            what: "zero-shot assignment vs cluster assignment",
            left: assign.len(),
            right: clusters.assignment.len(),
        });
    }
    check_assignment(assign, corpus.len())?;

    // cluster -> (label -> votes); BTreeMap so ties resolve to the lowest index
    let mut votes: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); clusters.n_clusters];
    for (&c, &l) in clusters.assignment.iter().zip(&assign.top1) {
        *votes[c].entry(l).or_default() += 1;
    }
    let cluster_labels: Vec<Option<usize>> = votes
        .iter()
        .map(|v| {
            v.iter()
                .fold(None, |best: Option<(usize, usize)>, (&l, &n)| match best {
                    Some((_, bn)) if bn >= n => best,
                    _ => Some((l, n)),
                })
                .map(|(l, _)| l)
        })
        .collect();

    let pos: Vec<usize> = cluster_labels.iter().flatten().copied().collect();
    if pos.is_empty() {
        return Err(Error::EmptyPositives);
    }
    let sets = MinedLabelSets::with_complement(
        MiningMethod::Clustermine,
        MiningParams {
            clusters: Some(clusters.n_clusters),
            ..Default::default()
        },
        pos,
        corpus.len(),
    )?;
    Ok(ClusterMineOutput { sets, cluster_labels })
}

/// All corpus indices not in `pos`, ascending.
pub fn complement_negatives(pos: &[usize], corpus_len: usize) -> Result<Vec<usize>> {
    let mut is_pos = vec![false; corpus_len];
    for &p in pos {
        *is_pos
            .get_mut(p)
            .ok_or_else(|| Error::invalid(format!("positive index {p} outside corpus")))? = true;
    }
    Ok((0..corpus_len).filter(|&i| !is_pos[i]).collect())
}

/// Nearest-rank quantile of an ascending-sorted, non-empty slice.
pub(crate) fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Keeps the `k` candidates farthest from the positives.
///
/// A candidate's distance score is the `percentile` nearest-rank quantile
/// of its cosine distances `1 - cos` to every positive. Returns ascending
/// candidate indices; `k >= candidates` keeps everything.
pub fn negative_mine(
    pos_text: &EmbeddingMatrix,
    candidates: &EmbeddingMatrix,
    k: usize,
    percentile: f64,
) -> Result<Vec<usize>> {
    check_dims(pos_text, candidates)?;
    if !(percentile > 0.0 && percentile <= 1.0) {
        return Err(Error::invalid(format!(
            "percentile must be in (0, 1], got {percentile}"
        )));
    }
    if k == 0 {
        return Err(Error::invalid("K must be >= 1"));
    }
    if pos_text.is_empty() {
        return Err(Error::EmptyPositives);
    }
    let n = candidates.rows();
    if k >= n {
        return Ok((0..n).collect());
    }
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|j| {
            let c = candidates.row(j);
            let mut d: Vec<f64> = pos_text.iter_rows().map(|z| 1.0 - dot(c, z)).collect();
            d.sort_by(f64::total_cmp);
            nearest_rank(&d, percentile)
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Prunes `sets.neg` to the `k` labels farthest from the positives, using
/// the corpus text embeddings.
pub fn prune_negatives(
    sets: &MinedLabelSets,
    corpus_text: &EmbeddingMatrix,
    k: usize,
    percentile: f64,
) -> Result<MinedLabelSets> {
    let pos_text = corpus_text.select_rows(&sets.pos)?;
    let candidates = corpus_text.select_rows(&sets.neg)?;
    let kept = negative_mine(&pos_text, &candidates, k, percentile)?;
    let mut out = sets.clone();
    out.neg = kept.into_iter().map(|j| sets.neg[j]).collect();
    out.params.k = Some(k);
    out.params.percentile = Some(percentile);
    Ok(out)
}

/// Random partition of `neg` into groups of `group_size` (last one may be
/// smaller). Each group is returned in ascending index order.
pub fn group_negatives(neg: &[usize], group_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if group_size == 0 {
        return Err(Error::invalid("group size must be >= 1"));
    }
    let mut shuffled = neg.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(shuffled
        .chunks(group_size)
        .map(|g| {
            let mut g = g.to_vec();
            g.sort_unstable();
            g
        })
        .collect())
}

//! Detection metrics and mined-label quality metrics.
//!
//! Scores are oriented so that larger means more in-distribution; ID
//! samples are the positive class throughout.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::fold_key;
use crate::embedding_io::{check_dims, dot, EmbeddingMatrix, LabelList};
use crate::error::{Error, Result};

fn check_nonempty(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::invalid("ID and OOD score lists must be non-empty"));
    }
    if id.iter().chain(ood).any(|v| v.is_nan()) {
        return Err(Error::invalid("scores must not be NaN"));
    }
    Ok(())
}

/// Area under the ROC curve: `P(id > ood) + 0.5·P(id = ood)` over all pairs.
///
/// Computed from mid-ranks in O(n log n). All intermediate counts are kept
/// as integers (doubled), so the result equals the pairwise definition.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_nonempty(id_scores, ood_scores)?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // twice the rank-sum of ID samples, using 1-based mid-ranks
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let n_id_tied = all[i..j].iter().filter(|x| x.1).count() as u128;
        // mid-rank of positions i+1..=j is (i+1+j)/2
        twice_rank_sum += n_id_tied * (i as u128 + 1 + j as u128);
        i = j;
    }
    let n1 = id_scores.len() as u128;
    let n2 = ood_scores.len() as u128;
    // twice the number of (id > ood) pairs plus tied pairs
    let twice_u = twice_rank_sum - n1 * (n1 + 1);
    let twice_total = 2 * n1 * n2;
    Ok(symmetric_ratio(twice_u, twice_total))
}

/// `num / den` computed so that `ratio(x, d) + ratio(d - x, d) == 1.0`.
fn symmetric_ratio(num: u128, den: u128) -> f64 {
    if 2 * num <= den {
        num as f64 / den as f64
    } else {
        1.0 - (den - num) as f64 / den as f64
    }
}

/// OOD false-positive rate at the threshold where at least `tpr` of the ID
/// scores are accepted.
///
/// The threshold is the largest `t` with at least `ceil(tpr·n_id)` ID scores
/// `>= t`; the result is the fraction of OOD scores `>= t`.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<f64> {
    check_nonempty(id_scores, ood_scores)?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::invalid(format!("tpr must be in (0, 1], got {tpr}")));
    }
    let needed = required_id_count(tpr, id_scores.len());
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[needed - 1];
    let accepted = ood_scores.iter().filter(|&&s| s >= threshold).count();
    Ok(accepted as f64 / ood_scores.len() as f64)
}

/// `ceil(tpr·n)` clamped to `1..=n`, ignoring float noise such as
/// `0.95 * 60 = 57.00000000000001`.
pub(crate) fn required_id_count(tpr: f64, n: usize) -> usize {
    let x = tpr * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (k as usize).clamp(1, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelQuality {
    pub overlap: f64,
    pub f1: f64,
}

fn folded_set(labels: &LabelList) -> BTreeSet<String> {
    labels.iter().map(fold_key).collect()
}

/// Overlap `|gt ∩ pos| / |gt|` and F1 between case-folded label sets.
pub fn label_f1_overlap(pos: &[String], gt: &LabelList) -> Result<LabelQuality> {
    let gt_set = folded_set(gt);
    let pos_set: BTreeSet<String> = pos.iter().map(|s| fold_key(s)).collect();
    let inter = pos_set.intersection(&gt_set).count() as f64;
    let recall = inter / gt_set.len() as f64;
    let precision = if pos_set.is_empty() {
        0.0
    } else {
        inter / pos_set.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(LabelQuality { overlap: recall, f1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` uniform edges over [-1, 1].
    pub edges: Vec<f64>,
    /// Fraction of samples per bin; sums to 1.
    pub mass: Vec<f64>,
}

/// Bin index over [-1, 1]: left-closed, right-open, last bin closed.
/// Values outside the range are clamped into the end bins.
pub(crate) fn bin_of(v: f64, bins: usize) -> usize {
    let pos = ((v + 1.0) / 2.0 * bins as f64).floor();
    if pos < 0.0 {
        0
    } else {
        (pos as usize).min(bins - 1)
    }
}

/// Histogram over positives of their best cosine to any ground-truth label.
pub fn text_similarity_histogram(
    pos_text: &EmbeddingMatrix,
    gt_text: &EmbeddingMatrix,
    bins: usize,
) -> Result<Histogram> {
    check_dims(pos_text, gt_text)?;
    if bins == 0 {
        return Err(Error::invalid("bins must be >= 1"));
    }
    if pos_text.is_empty() || gt_text.is_empty() {
        return Err(Error::invalid("similarity histogram needs non-empty inputs"));
    }
    let mut counts = vec![0usize; bins];
    for p in pos_text.iter_rows() {
        let best = gt_text.iter_rows().map(|g| dot(p, g)).fold(f64::NEG_INFINITY, f64::max);
        counts[bin_of(best, bins)] += 1;
    }
    let n = pos_text.rows() as f64;
    Ok(Histogram {
        edges: (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect(),
        mass: counts.iter().map(|&c| c as f64 / n).collect(),
    })
}

/// Undirected simple graph over label names.
#[derive(Debug, Clone, Default)]
pub struct HierarchyGraph {
    index: HashMap<String, usize>,
    adjacency: Vec<BTreeSet<usize>>,
}

impl HierarchyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    fn node(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.adjacency.len();
        self.index.insert(name.to_string(), i);
        self.adjacency.push(BTreeSet::new());
        i
    }

    /// Adds an undirected edge; repeated edges are merged, self-loops rejected.
    pub fn add_edge(&mut self, a: &str, b: &str) -> Result<()> {
        if a == b {
            return Err(Error::invalid(format!("self-loop on {a:?}")));
        }
        let (ia, ib) = (self.node(a), self.node(b));
        self.adjacency[ia].insert(ib);
        self.adjacency[ib].insert(ia);
        Ok(())
    }

    /// One `nodeA<TAB>nodeB` edge per line; blank lines are skipped.
    pub fn read_from(reader: impl BufRead) -> Result<Self> {
        let mut g = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let (a, b) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected nodeA<TAB>nodeB".into(),
            })?;
            if b.contains('\t') {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "too many fields".into(),
                });
            }
            g.add_edge(a, b)?;
        }
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// BFS distances from every source to all nodes.
    fn distances_from(&self, sources: &[usize]) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.adjacency.len()];
        let mut queue = VecDeque::new();
        for &s in sources {
            if dist[s].is_none() {
                dist[s] = Some(0);
                queue.push_back(s);
            }
        }
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap();
            for &v in &self.adjacency[u] {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Shortest hop count between two named nodes.
    pub fn hops(&self, a: &str, b: &str) -> Option<usize> {
        let (&ia, &ib) = (self.index.get(a)?, self.index.get(b)?);
        self.distances_from(&[ia])[ib]
    }
}

/// For every positive label, the fewest hops to any ground-truth label
/// (`None` when unreachable or absent from the graph). A positive that is
/// itself a ground-truth label is 0 hops.
pub fn hierarchy_hops(pos: &[String], gt: &LabelList, graph: &HierarchyGraph) -> Vec<Option<usize>> {
    let gt_names: BTreeSet<&str> = gt.iter().collect();
    let sources: Vec<usize> = gt.iter().filter_map(|g| graph.index.get(g).copied()).collect();
    let dist = graph.distances_from(&sources);
    pos.iter()
        .map(|p| {
            if gt_names.contains(p.as_str()) {
                Some(0)
            } else {
                graph.index.get(p).and_then(|&i| dist[i])
            }
        })
        .collect()
}

/// Detection quality of one method on one OOD set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub ood_set: String,
    pub auroc: f64,
    pub fpr_at_95tpr: f64,
    pub n_id: usize,
    pub n_ood: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label_quality: Option<LabelQuality>,
}

pub fn evaluate(
    method: impl Into<String>,
    ood_set: impl Into<String>,
    id_scores: &[f64],
    ood_scores: &[f64],
) -> Result<EvalReport> {
    Ok(EvalReport {
        method: method.into(),
        ood_set: ood_set.into(),
        auroc: auroc(id_scores, ood_scores)?,
        fpr_at_95tpr: fpr_at_tpr(id_scores, ood_scores, 0.95)?,
        n_id: id_scores.len(),
        n_ood: ood_scores.len(),
        label_quality: None,
    })
}

/// Relative AUROC change in percent: `100·(shifted - ref) / ref`.
pub fn robustness_delta(reference: &EvalReport, shifted: &EvalReport) -> Result<f64> {
    if reference.auroc == 0.0 {
        return Err(Error::invalid("reference AUROC is zero"));
    }
    Ok(100.0 * (shifted.auroc - reference.auroc) / reference.auroc)
}

/// Markdown grid with one row per method and one column per OOD set plus an
/// average column; cells are `AUROC / FPR95` in percent with two decimals.
/// Rows and columns keep first-appearance order.
pub fn markdown_table(reports: &[EvalReport]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut sets: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(&str, &str), &EvalReport> = BTreeMap::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        if !sets.contains(&r.ood_set.as_str()) {
            sets.push(&r.ood_set);
        }
        cells.insert((&r.method, &r.ood_set), r);
    }
    let cell = |auroc: f64, fpr: f64| format!("{:.2} / {:.2}", 100.0 * auroc, 100.0 * fpr);

    let mut out = String::from("| Method |");
    for s in &sets {
        out.push_str(&format!(" {s} |"));
    }
    out.push_str(" Average |\n|---|");
    out.push_str(&"---|".repeat(sets.len() + 1));
    out.push('\n');
    for m in &methods {
        out.push_str(&format!("| {m} |"));
        let (mut sa, mut sf, mut n) = (0.0, 0.0, 0usize);
        for s in &sets {
            match cells.get(&(*m, *s)) {
                Some(r) => {
                    out.push_str(&format!(" {} |", cell(r.auroc, r.fpr_at_95tpr)));
                    sa += r.auroc;
                    sf += r.fpr_at_95tpr;
                    n += 1;
                }
                None => out.push_str(" - |"),
            }
        }
        out.push_str(&format!(" {} |\n", cell(sa / n as f64, sf / n as f64)));
    }
    out
}

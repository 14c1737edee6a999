//! Spherical k-means over image features, externally computed cluster
//! assignments, and cluster-quality diagnostics.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::embedding_io::{dot, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::mining::{clustermine, zero_shot_assign, ZeroShotAssignment};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub assignment: Vec<usize>,
    pub n_clusters: usize,
    pub centroids: Option<EmbeddingMatrix>,
    pub seed: Option<u64>,
    pub iterations_run: usize,
    /// Mean sample-to-centroid cosine after each assignment step.
    pub objective_trace: Vec<f64>,
}

impl ClusterAssignment {
    /// Wraps precomputed indices. `n_clusters` defaults to `1 + max index`.
    pub fn from_indices(assignment: Vec<usize>, n_clusters: Option<usize>) -> Result<Self> {
        let max = assignment
            .iter()
            .copied()
            .max()
            .ok_or_else(|| Error::invalid("empty cluster assignment"))?;
        let n_clusters = n_clusters.unwrap_or(max + 1);
        if max >= n_clusters {
            return Err(Error::invalid(format!(
                "cluster index {max} out of range for {n_clusters} clusters"
            )));
        }
        Ok(Self {
            assignment,
            n_clusters,
            centroids: None,
            seed: None,
            iterations_run: 0,
            objective_trace: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }

    /// One cluster index per line.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for c in &self.assignment {
            writeln!(w, "{c}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io_at(path, e))
    }
}

/// Reads one non-negative cluster index per line; expects exactly `n` lines.
pub fn read_assignments(reader: impl BufRead, n: usize) -> Result<ClusterAssignment> {
    let mut assignment = Vec::with_capacity(n);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        let c: usize = t.parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("expected a non-negative integer, got {t:?}"),
        })?;
        assignment.push(c);
    }
    if assignment.len() != n {
        return Err(Error::LengthMismatch {
            what: "assignment lines vs samples",
            left: assignment.len(),
            right: n,
        });
    }
    ClusterAssignment::from_indices(assignment, None)
}

pub fn import_assignments(path: impl AsRef<Path>, n: usize) -> Result<ClusterAssignment> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    read_assignments(BufReader::new(f), n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub clusters: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(clusters: usize, seed: u64) -> Self {
        Self {
            clusters,
            seed,
            max_iter: 100,
            tol: 1e-4,
        }
    }
}

fn dot64(a: &[f32], c: &[f64]) -> f64 {
    a.iter().zip(c).map(|(&x, &y)| x as f64 * y).sum()
}

fn argmax_centroid(x: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let s = dot64(x, mu);
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}

fn unit(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// k-means++ seeding with cosine distance `1 - cos` as the sampling weight.
fn seed_centroids(features: &EmbeddingMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = features.rows();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![unit(features.row(first))];
    let mut dist: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| (1.0 - dot(features.row(i), features.row(first))).max(0.0))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().zip(&chosen).filter(|(_, &c)| !c).map(|(d, _)| d).sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for i in 0..n {
                if chosen[i] || dist[i] <= 0.0 {
                    continue;
                }
                pick = Some(i);
                target -= dist[i];
                if target < 0.0 {
                    break;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every remaining point coincides with a centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let new = features.row(pick);
        dist.par_iter_mut().enumerate().for_each(|(i, d)| {
            let di = (1.0 - dot(features.row(i), new)).max(0.0);
            if di < *d {
                *d = di;
            }
        });
        centroids.push(unit(new));
    }
    centroids
}

/// Spherical k-means: assign each sample to its highest-cosine centroid,
/// move each centroid to the normalized mean of its members, repeat until
/// the largest centroid movement `1 - cos(old, new)` is at most `tol`.
///
/// Empty (or zero-mean) clusters are reseeded with the sample that has the
/// lowest cosine to its current centroid.
pub fn spherical_kmeans(features: &EmbeddingMatrix, cfg: &KMeansConfig) -> Result<ClusterAssignment> {
    let n = features.rows();
    let k = cfg.clusters;
    if k == 0 {
        return Err(Error::invalid("number of clusters must be >= 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("{k} clusters requested for {n} samples")));
    }
    if cfg.max_iter == 0 {
        return Err(Error::invalid("max_iter must be >= 1"));
    }
    if cfg.tol.is_nan() || cfg.tol < 0.0 {
        return Err(Error::invalid("tol must be >= 0"));
    }
    let dims = features.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = seed_centroids(features, k, &mut rng);

    let assign_step = |centroids: &[Vec<f64>]| -> (Vec<usize>, Vec<f64>) {
        (0..n)
            .into_par_iter()
            .map(|i| argmax_centroid(features.row(i), centroids))
            .unzip()
    };

    let mut trace = Vec::new();
    let mut iterations = 0;
    let (mut assignment, mut sims);
    loop {
        (assignment, sims) = assign_step(&centroids);
        trace.push(sims.iter().sum::<f64>() / n as f64);
        iterations += 1;

        let mut sums = vec![vec![0f64; dims]; k];
        for (i, &c) in assignment.iter().enumerate() {
            for (s, &v) in sums[c].iter_mut().zip(features.row(i)) {
                *s += v as f64;
            }
        }
        let mut reseeded = vec![false; n];
        let mut movement = 0f64;
        for (c, sum) in sums.iter_mut().enumerate() {
            let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
            let new = if norm > 1e-12 {
                sum.iter().map(|v| v / norm).collect::<Vec<_>>()
            } else {
                let far = (0..n)
                    .filter(|&i| !reseeded[i])
                    .min_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)))
                    .expect("k <= n leaves a sample to reseed with");
                reseeded[far] = true;
                unit(features.row(far))
            };
            let cos: f64 = centroids[c].iter().zip(&new).map(|(a, b)| a * b).sum();
            movement = movement.max(1.0 - cos);
            centroids[c] = new;
        }
        if movement <= cfg.tol || iterations >= cfg.max_iter {
            break;
        }
    }
    // final assignment against the final centroids
    (assignment, sims) = assign_step(&centroids);
    trace.push(sims.iter().sum::<f64>() / n as f64);

    let flat: Vec<f32> = centroids.iter().flatten().map(|&v| v as f32).collect();
    Ok(ClusterAssignment {
        assignment,
        n_clusters: k,
        centroids: Some(EmbeddingMatrix::from_flat(k, dims, flat)?),
        seed: Some(cfg.seed),
        iterations_run: iterations,
        objective_trace: trace,
    })
}

fn check_lengths(assign: &ClusterAssignment, labels: &[usize]) -> Result<()> {
    if assign.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "cluster assignment vs labels",
            left: assign.len(),
            right: labels.len(),
        });
    }
    Ok(())
}

/// Label histogram of every cluster.
fn label_counts(assign: &ClusterAssignment, labels: &[usize]) -> Vec<HashMap<usize, usize>> {
    let mut counts = vec![HashMap::new(); assign.n_clusters];
    for (&c, &l) in assign.assignment.iter().zip(labels) {
        *counts[c].entry(l).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurityReport {
    /// `None` for empty clusters.
    pub per_cluster: Vec<Option<f64>>,
    /// Size-weighted mean over non-empty clusters.
    pub weighted_mean: f64,
}

/// Fraction of each cluster carrying its most frequent reference label.
pub fn cluster_purity(assign: &ClusterAssignment, ref_labels: &[usize]) -> Result<PurityReport> {
    check_lengths(assign, ref_labels)?;
    let counts = label_counts(assign, ref_labels);
    let mut majority_total = 0usize;
    let per_cluster = counts
        .iter()
        .map(|h| {
            let size: usize = h.values().sum();
            let majority = h.values().copied().max()?;
            majority_total += majority;
            Some(majority as f64 / size as f64)
        })
        .collect();
    Ok(PurityReport {
        per_cluster,
        weighted_mean: majority_total as f64 / assign.len() as f64,
    })
}

/// Shannon entropy (natural log) of the label distribution in each cluster;
/// `None` for empty clusters.
pub fn cluster_entropy(assign: &ClusterAssignment, mined_labels: &[usize]) -> Result<Vec<Option<f64>>> {
    check_lengths(assign, mined_labels)?;
    Ok(label_counts(assign, mined_labels)
        .iter()
        .map(|h| {
            let size: usize = h.values().sum();
            if size == 0 {
                return None;
            }
            let mut counts: Vec<usize> = h.values().copied().collect();
            counts.sort_unstable();
            Some(
                counts
                    .iter()
                    .map(|&c| {
                        let p = c as f64 / size as f64;
                        -p * p.ln()
                    })
                    .sum::<f64>()
                    .max(0.0),
            )
        })
        .collect())
}

/// Fraction of distinct cluster labels that label more than one cluster.
pub fn redundancy_ratio(cluster_labels: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in cluster_labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.is_empty() {
        return 0.0;
    }
    counts.values().filter(|&&c| c > 1).count() as f64 / counts.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowRow {
    #[serde(rename = "C")]
    pub clusters: usize,
    pub n_pos: usize,
    pub ratio: f64,
    pub redundancy: f64,
}

/// Runs clustering plus ClusterMine at every requested cluster count.
pub fn elbow_sweep(
    features: &EmbeddingMatrix,
    text: &EmbeddingMatrix,
    corpus: &Corpus,
    c_values: &[usize],
    seed: u64,
) -> Result<Vec<ElbowRow>> {
    let zs = zero_shot_assign(features, text)?;
    elbow_sweep_with(features, &zs, corpus, c_values, seed)
}

/// [`elbow_sweep`] with a precomputed zero-shot assignment.
pub fn elbow_sweep_with(
    features: &EmbeddingMatrix,
    zs: &ZeroShotAssignment,
    corpus: &Corpus,
    c_values: &[usize],
    seed: u64,
) -> Result<Vec<ElbowRow>> {
    if c_values.is_empty() {
        return Err(Error::invalid("elbow sweep needs at least one cluster count"));
    }
    c_values
        .iter()
        .map(|&c| {
            let clusters = spherical_kmeans(features, &KMeansConfig::new(c, seed))?;
            let mined = clustermine(zs, &clusters, corpus)?;
            let n_pos = mined.sets.pos.len();
            Ok(ElbowRow {
                clusters: c,
                n_pos,
                ratio: n_pos as f64 / c as f64,
                redundancy: redundancy_ratio(&mined.voted_labels()),
            })
        })
        .collect()
}

pub fn write_elbow_csv(rows: &[ElbowRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "C,n_pos,ratio,redundancy")?;
    for r in rows {
        writeln!(w, "{},{},{:.17},{:.17}", r.clusters, r.n_pos, r.ratio, r.redundancy)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_circle(angles: &[f64]) -> EmbeddingMatrix {
        let rows: Vec<[f32; 2]> = angles.iter().map(|a| [a.cos() as f32, a.sin() as f32]).collect();
        EmbeddingMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn each_point_its_own_cluster_when_c_equals_n() {
        let x = unit_circle(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let a = spherical_kmeans(&x, &KMeansConfig::new(5, 3)).unwrap();
        let mut seen = a.assignment.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        let cents = a.centroids.unwrap();
        for (i, &c) in a.assignment.iter().enumerate() {
            assert!((dot(x.row(i), cents.row(c)) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_cluster_centroid_is_normalized_mean() {
        let x = unit_circle(&[0.0, 0.5, 1.0]);
        let a = spherical_kmeans(&x, &KMeansConfig::new(1, 0)).unwrap();
        assert_eq!(a.assignment, vec![0, 0, 0]);
        let c = a.centroids.unwrap();
        assert!((c.row(0)[0] as f64 - 0.5f64.cos()).abs() < 1e-6);
        assert!((c.row(0)[1] as f64 - 0.5f64.sin()).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_cluster_counts() {
        let x = unit_circle(&[0.0, 1.0]);
        assert!(spherical_kmeans(&x, &KMeansConfig::new(0, 0)).is_err());
        assert!(spherical_kmeans(&x, &KMeansConfig::new(3, 0)).is_err());
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster_seed() {
        let x = unit_circle(&[0.0, 0.0, 0.0, 0.0]);
        let a = spherical_kmeans(&x, &KMeansConfig::new(3, 1)).unwrap();
        assert_eq!(a.n_clusters, 3);
        assert!(a.assignment.iter().all(|&c| c < 3));
    }

    #[test]
    fn import_parsing() {
        let a = read_assignments("0\n1\n0\n".as_bytes(), 3).unwrap();
        assert_eq!(a.assignment, vec![0, 1, 0]);
        assert_eq!(a.n_clusters, 2);
        assert!(a.centroids.is_none());
        assert!(matches!(
            read_assignments("0\n-1\n0\n".as_bytes(), 3),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            read_assignments("0\n1\n0\n1\n".as_bytes(), 3),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(read_assignments("0\nx\n".as_bytes(), 2).is_err());
    }

    #[test]
    fn purity_examples() {
        let one = ClusterAssignment::from_indices(vec![0; 4], None).unwrap();
        let p = cluster_purity(&one, &[0, 0, 1, 1]).unwrap();
        assert_eq!(p.per_cluster, vec![Some(0.5)]);
        assert_eq!(p.weighted_mean, 0.5);

        let a = ClusterAssignment::from_indices(vec![0, 0, 1, 2, 2], Some(4)).unwrap();
        let p = cluster_purity(&a, &[3, 3, 1, 0, 0]).unwrap();
        assert_eq!(p.per_cluster, vec![Some(1.0), Some(1.0), Some(1.0), None]);
        assert_eq!(p.weighted_mean, 1.0);
        assert!(cluster_purity(&a, &[0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        let a = ClusterAssignment::from_indices(vec![0, 0, 1, 1], None).unwrap();
        let e = cluster_entropy(&a, &[4, 4, 1, 2]).unwrap();
        assert_eq!(e[0], Some(0.0));
        assert!((e[1].unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(cluster_entropy(&a, &[1]).is_err());
    }

    #[test]
    fn redundancy_examples() {
        assert_eq!(redundancy_ratio(&[0, 1, 2]), 0.0);
        assert_eq!(redundancy_ratio(&[0, 0, 1]), 0.5);
        assert!((redundancy_ratio(&[0, 0, 1, 1, 2]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn elbow_rejects_empty_sweep() {
        let x = unit_circle(&[0.0, 1.0]);
        let corpus = Corpus::from_labels(
            crate::embedding_io::LabelList::new(vec!["a".into(), "b".into()]).unwrap(),
            "t",
        );
        assert!(elbow_sweep(&x, &x, &corpus, &[], 0).is_err());
        let rows = elbow_sweep(&x, &x, &corpus, &[2], 0).unwrap();
        assert!(rows[0].n_pos <= 2);
    }
}

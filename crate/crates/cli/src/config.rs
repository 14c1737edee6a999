use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use oodmine::clustering::import_assignments;
use oodmine::mining::{clustermine, posmine, prune_negatives, zero_shot_assign};
use oodmine::scoring::write_scores_csv;
use oodmine::ScoreConfig;
use serde::{Deserialize, Serialize};

use crate::commands::{cluster_features, compute_scores, save_mined, EvalSummary};
use crate::io::{self, write_with};
use crate::ScoreMethod;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMethod {
    Clustermine,
    Posmine,
}

/// Single-file description of a full ingest-free pipeline run. Relative
/// paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub id_emb: PathBuf,
    /// OOD set name -> image embeddings.
    pub ood: BTreeMap<String, PathBuf>,
    pub corpus: PathBuf,
    pub text_emb: PathBuf,
    pub method: RunMethod,
    #[serde(rename = "C", default)]
    pub clusters: Option<usize>,
    #[serde(rename = "M", default)]
    pub min_count: Option<usize>,
    /// Prune negatives to K when set.
    #[serde(rename = "K", default)]
    pub k: Option<usize>,
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub group_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// External cluster assignments used instead of k-means.
    #[serde(default)]
    pub assign: Option<PathBuf>,
    pub out_dir: PathBuf,
}

fn default_percentile() -> f64 {
    oodmine::mining::DEFAULT_PERCENTILE
}

fn default_tau() -> f64 {
    oodmine::scoring::DEFAULT_TAU
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&s).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.id_emb);
        fix(&mut cfg.corpus);
        fix(&mut cfg.text_emb);
        fix(&mut cfg.out_dir);
        cfg.ood.values_mut().for_each(fix);
        if let Some(a) = cfg.assign.as_mut() {
            fix(a);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            RunMethod::Clustermine => ensure!(
                self.clusters.is_some() || self.assign.is_some(),
                "clustermine needs \"C\" or \"assign\""
            ),
            RunMethod::Posmine => ensure!(self.min_count.is_some(), "posmine needs \"M\""),
        }
        if self.k == Some(0) {
            bail!("\"K\" must be >= 1");
        }
        ensure!(!self.ood.is_empty(), "no OOD sets configured");
        ScoreConfig {
            tau: self.tau,
            group_size: self.group_size,
            seed: self.seed,
        }
        .validate()?;
        Ok(())
    }
}

pub fn run_all(path: &Path) -> Result<()> {
    let cfg = RunConfig::load(path)?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let (corpus, text) = io::corpus_with_text(&cfg.corpus, &cfg.text_emb)?;
    let images = io::emb(&cfg.id_emb)?;
    let zs = zero_shot_assign(&images, &text)?;

    let mut sets = match cfg.method {
        RunMethod::Clustermine => {
            let ca = match (&cfg.assign, cfg.clusters) {
                (Some(a), _) => import_assignments(a, images.rows())?,
                (None, Some(c)) => {
                    let ca = cluster_features(&images, c, cfg.seed, 100, 1e-4)?;
                    write_with(&out.join("assign.txt"), |w| ca.write_to(w))?;
                    ca
                }
                (None, None) => unreachable!("validated"),
            };
            clustermine(&zs, &ca, &corpus)?.sets
        }
        RunMethod::Posmine => posmine(&zs, &corpus, cfg.min_count.expect("validated"))?,
    };
    if let Some(k) = cfg.k {
        sets = prune_negatives(&sets, &text, k, cfg.percentile)?;
    }
    save_mined(&sets, &out.join("mined.json"), &corpus)?;

    let pos = text.select_rows(&sets.pos)?;
    let neg = text.select_rows(&sets.neg)?;
    let score_cfg = ScoreConfig {
        tau: cfg.tau,
        group_size: cfg.group_size,
        seed: cfg.seed,
    };
    let method = if cfg.group_size.is_some() {
        ScoreMethod::Grouped
    } else {
        ScoreMethod::Posneg
    };
    let method_name = match cfg.method {
        RunMethod::Clustermine => "clustermine",
        RunMethod::Posmine => "posmine",
    };

    let id_scores = compute_scores(method, &images, &pos, &neg, &score_cfg)?;
    write_with(&out.join("scores_id.csv"), |w| write_scores_csv(&id_scores, w))?;
    let mut reports = Vec::new();
    for (name, p) in &cfg.ood {
        let ood = compute_scores(method, &io::emb(p)?, &pos, &neg, &score_cfg)?;
        write_with(&out.join(format!("scores_{name}.csv")), |w| write_scores_csv(&ood, w))?;
        reports.push(oodmine::metrics::evaluate(method_name, name.clone(), &id_scores, &ood)?);
    }
    let summary = EvalSummary::new(method_name.into(), reports)?;
    summary.save(&out.join("eval.json"))?;
    crate::io::write_atomic(
        &out.join("eval.md"),
        oodmine::metrics::markdown_table(&summary.reports).as_bytes(),
    )
}

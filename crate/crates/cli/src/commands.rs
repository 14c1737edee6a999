use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use oodmine::clustering::{
    elbow_sweep_with, import_assignments, spherical_kmeans, write_elbow_csv, ClusterAssignment, KMeansConfig,
};
use oodmine::corpus::{aggregate_prompt_embeddings, expand_prompts, ingest_corpus, PromptSet};
use oodmine::embedding_io::{encode_embeddings, load_labels};
use oodmine::metrics::{evaluate, label_f1_overlap, markdown_table, robustness_delta, EvalReport};
use oodmine::mining::{clustermine, posmine, prune_negatives, zero_shot_assign, MinedLabelSets};
use oodmine::scoring::{
    score_energy, score_grouped_random, score_maxlogit, score_mcm, score_posneg, write_scores_csv, ScoreConfig,
};
use oodmine::synth::{generate_planted_instance, OodMode, PlantedParams};
use oodmine::{EmbeddingMatrix, Error};
use serde::{Deserialize, Serialize};

use crate::io::{self, write_atomic, write_with};
use crate::{
    ClusterArgs, Command, EvalArgs, IngestArgs, MineCommand, MineInputs, ReportArgs, ScoreArgs, ScoreMethod,
    SweepCommand, SynthArgs,
};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest(a) => ingest(a),
        Command::Cluster(a) => cluster(a),
        Command::Mine(m) => mine(m),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(s) => sweep(s),
        Command::Synth(a) => synth(a),
        Command::Report(a) => report(a),
        Command::RunAll(a) => crate::config::run_all(&a.config),
    }
}

pub fn prompt_set(arg: &str) -> Result<PromptSet> {
    if let Some(p) = PromptSet::builtin(arg) {
        return Ok(p);
    }
    let json = std::fs::read_to_string(arg).with_context(|| format!("unknown prompt set {arg:?}"))?;
    let name = Path::new(arg)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(PromptSet::from_json(name, &json)?)
}

fn ingest(a: IngestArgs) -> Result<()> {
    let raw = std::fs::File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let tag = a.source_tag.clone().unwrap_or_else(|| {
        a.input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let corpus = ingest_corpus(std::io::BufReader::new(raw), a.policy.into(), tag)?;
    write_with(&a.output, |w| corpus.labels.write_to(w))?;
    log::info!("{} labels after ingestion", corpus.len());

    if let Some(arg) = &a.prompts {
        let prompts = prompt_set(arg)?;
        if let Some(q) = &a.queries_out {
            let queries = expand_prompts(&corpus, &prompts);
            write_with(q, |w| queries.write_to(w))?;
        }
        if let (Some(per_query), Some(out)) = (&a.per_query_emb, &a.text_out) {
            let m = io::emb(per_query)?;
            let agg = aggregate_prompt_embeddings(&m, corpus.len(), prompts.len())?;
            write_atomic(out, &encode_embeddings(&agg))?;
        }
    }
    Ok(())
}

pub fn cluster_features(
    features: &EmbeddingMatrix,
    clusters: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterAssignment> {
    let cfg = KMeansConfig {
        clusters,
        seed,
        max_iter,
        tol,
    };
    Ok(spherical_kmeans(features, &cfg)?)
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let features = io::emb(&a.emb)?;
    let assign = match (&a.import, a.clusters) {
        (Some(path), clusters) => {
            let mut imported = import_assignments(path, features.rows())?;
            if let Some(c) = clusters {
                ensure!(c >= imported.n_clusters, "--clusters {c} smaller than imported indices");
                imported.n_clusters = c;
            }
            imported
        }
        (None, Some(c)) => cluster_features(&features, c, a.seed, a.max_iter, a.tol)?,
        (None, None) => unreachable!("clap requires --clusters without --import"),
    };
    write_with(&a.out, |w| assign.write_to(w))?;
    if let Some(path) = &a.centroids_out {
        let cents = assign
            .centroids
            .as_ref()
            .context("imported assignments carry no centroids")?;
        write_atomic(path, &encode_embeddings(cents))?;
    }
    Ok(())
}

pub fn save_mined(sets: &MinedLabelSets, path: &Path, corpus: &oodmine::Corpus) -> Result<()> {
    let mut json = sets.to_json()?;
    json.push('\n');
    write_atomic(path, json.as_bytes())?;
    let mut dump = String::new();
    for &i in &sets.pos {
        dump.push_str(corpus.labels.get(i).unwrap_or_default());
        dump.push('\n');
    }
    write_atomic(&path.with_extension("labels.txt"), dump.as_bytes())
}

fn mine(m: MineCommand) -> Result<()> {
    match m {
        MineCommand::Posmine { inputs, min_count } => {
            let MineInputs { img, text, corpus, out } = inputs;
            let (corpus, text) = io::corpus_with_text(&corpus, &text)?;
            let zs = zero_shot_assign(&io::emb(&img)?, &text)?;
            let sets = posmine(&zs, &corpus, min_count)?;
            save_mined(&sets, &out, &corpus)
        }
        MineCommand::Clustermine {
            inputs,
            assign,
            clusters,
        } => {
            let MineInputs { img, text, corpus, out } = inputs;
            let (corpus, text) = io::corpus_with_text(&corpus, &text)?;
            let images = io::emb(&img)?;
            let mut ca = import_assignments(&assign, images.rows())?;
            if let Some(c) = clusters {
                ensure!(c >= ca.n_clusters, "--clusters {c} smaller than assignment indices");
                ca.n_clusters = c;
            }
            let zs = zero_shot_assign(&images, &text)?;
            let mined = clustermine(&zs, &ca, &corpus)?;
            save_mined(&mined.sets, &out, &corpus)
        }
        MineCommand::Neg {
            mined,
            text,
            corpus,
            k,
            percentile,
            out,
        } => {
            let (corpus, text) = io::corpus_with_text(&corpus, &text)?;
            let sets = MinedLabelSets::load(&mined)?;
            sets.validate(corpus.len())?;
            let pruned = prune_negatives(&sets, &text, k, percentile)?;
            save_mined(&pruned, &out, &corpus)
        }
    }
}

/// Positive and negative text banks from either mined sets or explicit files.
fn text_banks(a: &ScoreArgs) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    match (&a.text, &a.mined, &a.pos_emb) {
        (Some(text), Some(mined), _) => {
            let text = io::emb(text)?;
            let sets = MinedLabelSets::load(mined)?;
            sets.validate(text.rows())?;
            Ok((text.select_rows(&sets.pos)?, text.select_rows(&sets.neg)?))
        }
        (_, _, Some(pos)) => {
            let pos = io::emb(pos)?;
            let neg = match &a.neg_emb {
                Some(p) => io::emb(p)?,
                None => EmbeddingMatrix::empty(pos.dims())?,
            };
            Ok((pos, neg))
        }
        _ => bail!("need --text with --mined, or --pos-emb"),
    }
}

pub fn compute_scores(
    method: ScoreMethod,
    images: &EmbeddingMatrix,
    pos: &EmbeddingMatrix,
    neg: &EmbeddingMatrix,
    cfg: &ScoreConfig,
) -> oodmine::Result<Vec<f64>> {
    match method {
        ScoreMethod::Posneg => score_posneg(images, pos, neg, cfg),
        ScoreMethod::Grouped => {
            if cfg.group_size.is_none() {
                return Err(Error::InvalidArgument("grouped scoring needs --group-size".into()));
            }
            score_grouped_random(images, pos, neg, cfg)
        }
        ScoreMethod::Mcm => score_mcm(images, pos, cfg),
        ScoreMethod::Maxlogit => score_maxlogit(images, pos),
        ScoreMethod::Energy => score_energy(images, pos, cfg),
    }
}

fn score(a: ScoreArgs) -> Result<()> {
    let images = io::emb(&a.img)?;
    let (pos, neg) = text_banks(&a)?;
    let cfg = ScoreConfig {
        tau: a.tau,
        group_size: a.group_size,
        seed: a.seed,
    };
    let scores = compute_scores(a.method, &images, &pos, &neg, &cfg)?;
    write_with(&a.out, |w| write_scores_csv(&scores, w))
}

/// One method evaluated on several OOD sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub method: String,
    pub reports: Vec<EvalReport>,
    pub mean_auroc: f64,
    pub mean_fpr_at_95tpr: f64,
}

impl EvalSummary {
    pub fn new(method: String, reports: Vec<EvalReport>) -> Result<Self> {
        ensure!(!reports.is_empty(), "no OOD sets evaluated");
        let n = reports.len() as f64;
        Ok(Self {
            mean_auroc: reports.iter().map(|r| r.auroc).sum::<f64>() / n,
            mean_fpr_at_95tpr: reports.iter().map(|r| r.fpr_at_95tpr).sum::<f64>() / n,
            method,
            reports,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&s).with_context(|| format!("parsing eval report {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        write_atomic(path, json.as_bytes())
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let id = io::scores(&a.id)?;
    let quality = match (&a.mined, &a.corpus, &a.gt_labels) {
        (Some(m), Some(c), Some(g)) => {
            let corpus = io::corpus(c)?;
            let sets = MinedLabelSets::load(m)?;
            let gt = load_labels(g)?;
            Some(label_f1_overlap(sets.pos_labels(&corpus)?.as_slice(), &gt)?)
        }
        _ => None,
    };
    let mut reports = Vec::new();
    for arg in &a.ood {
        let (name, path) = io::named_path(arg)?;
        let ood = io::scores(&path)?;
        let mut r = evaluate(&a.method, name, &id, &ood)?;
        if a.tpr != 0.95 {
            r.fpr_at_95tpr = oodmine::fpr_at_tpr(&id, &ood, a.tpr)?;
        }
        r.label_quality = quality.clone();
        reports.push(r);
    }
    let summary = EvalSummary::new(a.method.clone(), reports)?;
    summary.save(&a.out)?;
    if let Some(md) = &a.markdown {
        write_atomic(md, markdown_table(&summary.reports).as_bytes())?;
    }
    Ok(())
}

fn parse_k_values(k: &[usize], fractions: &[f64], n_neg: usize) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = k.to_vec();
    for &f in fractions {
        ensure!(f > 0.0 && f <= 1.0, "K fraction must be in (0, 1], got {f}");
        out.push(((f * n_neg as f64).round() as usize).max(1));
    }
    ensure!(!out.is_empty(), "give --k and/or --k-fraction");
    Ok(out)
}

pub struct NegKRow {
    pub k: usize,
    pub ood_set: String,
    pub auroc: f64,
    pub fpr95: f64,
}

/// AUROC / FPR95 of the pos/neg score for every K, per OOD set plus a mean
/// row per K.
pub fn neg_k_sweep(
    images: &EmbeddingMatrix,
    oods: &[(String, EmbeddingMatrix)],
    text: &EmbeddingMatrix,
    sets: &MinedLabelSets,
    k_values: &[usize],
    percentile: f64,
    tau: f64,
) -> Result<Vec<NegKRow>> {
    let cfg = ScoreConfig::with_tau(tau)?;
    let pos = text.select_rows(&sets.pos)?;
    let mut rows = Vec::new();
    for &k in k_values {
        let pruned = prune_negatives(sets, text, k, percentile)?;
        let neg = text.select_rows(&pruned.neg)?;
        let id = score_posneg(images, &pos, &neg, &cfg)?;
        let (mut sa, mut sf) = (0.0, 0.0);
        for (name, ood) in oods {
            let o = score_posneg(ood, &pos, &neg, &cfg)?;
            let r = evaluate("posneg", name.clone(), &id, &o)?;
            sa += r.auroc;
            sf += r.fpr_at_95tpr;
            rows.push(NegKRow {
                k,
                ood_set: name.clone(),
                auroc: r.auroc,
                fpr95: r.fpr_at_95tpr,
            });
        }
        let n = oods.len() as f64;
        rows.push(NegKRow {
            k,
            ood_set: "mean".into(),
            auroc: sa / n,
            fpr95: sf / n,
        });
    }
    Ok(rows)
}

pub fn neg_k_csv(rows: &[NegKRow]) -> String {
    let mut s = String::from("K,ood_set,auroc,fpr95\n");
    for r in rows {
        writeln!(s, "{},{},{:.17},{:.17}", r.k, r.ood_set, r.auroc, r.fpr95).unwrap();
    }
    s
}

fn sweep(s: SweepCommand) -> Result<()> {
    match s {
        SweepCommand::Elbow {
            img,
            text,
            corpus,
            clusters,
            seed,
            out,
        } => {
            let (corpus, text) = io::corpus_with_text(&corpus, &text)?;
            let images = io::emb(&img)?;
            let zs = zero_shot_assign(&images, &text)?;
            let rows = elbow_sweep_with(&images, &zs, &corpus, &clusters, seed)?;
            write_with(&out, |w| write_elbow_csv(&rows, w))
        }
        SweepCommand::NegK {
            img,
            ood,
            text,
            corpus,
            mined,
            k,
            k_fraction,
            percentile,
            tau,
            out,
        } => {
            let (corpus, text) = io::corpus_with_text(&corpus, &text)?;
            let sets = MinedLabelSets::load(&mined)?;
            sets.validate(corpus.len())?;
            let images = io::emb(&img)?;
            let oods = ood
                .iter()
                .map(|arg| {
                    let (name, path) = io::named_path(arg)?;
                    Ok((name, io::emb(&path)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let ks = parse_k_values(&k, &k_fraction, sets.neg.len())?;
            let rows = neg_k_sweep(&images, &oods, &text, &sets, &ks, percentile, tau)?;
            write_atomic(&out, neg_k_csv(&rows).as_bytes())
        }
        SweepCommand::MinCount {
            img,
            text,
            corpus,
            min_count,
            out,
        } => {
            let (corpus, text) = io::corpus_with_text(&corpus, &text)?;
            let zs = zero_shot_assign(&io::emb(&img)?, &text)?;
            let mut csv = String::from("M,n_pos\n");
            for m in min_count {
                let n = match posmine(&zs, &corpus, m) {
                    Ok(s) => s.pos.len(),
                    Err(Error::NoPositivesMined(_)) => 0,
                    Err(e) => return Err(e.into()),
                };
                writeln!(csv, "{m},{n}").unwrap();
            }
            write_atomic(&out, csv.as_bytes())
        }
    }
}

#[derive(Serialize)]
struct SynthTruth<'a> {
    params: &'a PlantedParams,
    planted: Vec<usize>,
    distractors: Vec<usize>,
    concept_ids: &'a [usize],
}

fn synth(a: SynthArgs) -> Result<()> {
    let params = PlantedParams {
        n_concepts: a.concepts,
        samples_per_concept: a.samples,
        n_distractors: a.distractors,
        dims: a.dims,
        margin: a.margin,
        noise: a.noise,
        seed: a.seed,
        n_ood: a.n_ood,
        ood_mode: if a.ood_near_distractors {
            OodMode::NearDistractors
        } else {
            OodMode::Fresh
        },
        ..Default::default()
    };
    let inst = generate_planted_instance(&params)?;
    let dir = &a.out_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join("id.emb"), &encode_embeddings(&inst.images))?;
    write_atomic(&dir.join("ood.emb"), &encode_embeddings(&inst.ood))?;
    write_atomic(&dir.join("corpus.emb"), &encode_embeddings(&inst.text))?;
    write_with(&dir.join("corpus.txt"), |w| inst.corpus.labels.write_to(w))?;
    let gt = inst.corpus.labels.select(&inst.planted_labels())?;
    write_with(&dir.join("gt_labels.txt"), |w| gt.write_to(w))?;
    let truth = SynthTruth {
        params: &inst.params,
        planted: inst.planted_labels(),
        distractors: inst.distractor_labels(),
        concept_ids: &inst.concept_ids,
    };
    let mut json = serde_json::to_string_pretty(&truth)?;
    json.push('\n');
    write_atomic(&dir.join("truth.json"), json.as_bytes())
}

fn report(a: ReportArgs) -> Result<()> {
    let summaries = a
        .inputs
        .iter()
        .map(|p| EvalSummary::load(p))
        .collect::<Result<Vec<_>>>()?;
    let text = match &a.robust_reference {
        Some(reference) => robust_csv(&EvalSummary::load(reference)?, &a.inputs, &summaries)?,
        None => {
            let all: Vec<EvalReport> = summaries.into_iter().flat_map(|s| s.reports).collect();
            markdown_table(&all)
        }
    };
    match &a.out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Relative AUROC change of each shifted eval against the reference, per
/// matching (method, OOD set) cell and for the mean.
fn robust_csv(reference: &EvalSummary, paths: &[std::path::PathBuf], shifted: &[EvalSummary]) -> Result<String> {
    let mut s = String::from("shifted_id,method,ood_set,reference_auroc,shifted_auroc,delta_pct\n");
    for (path, sh) in paths.iter().zip(shifted) {
        let id_name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for r in &sh.reports {
            let Some(base) = reference
                .reports
                .iter()
                .find(|b| b.method == r.method && b.ood_set == r.ood_set)
            else {
                continue;
            };
            let d = robustness_delta(base, r)?;
            writeln!(
                s,
                "{id_name},{},{},{:.17},{:.17},{:.17}",
                r.method, r.ood_set, base.auroc, r.auroc, d
            )?;
        }
        let mean_ref = mean_report(reference);
        let mean_sh = mean_report(sh);
        let d = robustness_delta(&mean_ref, &mean_sh)?;
        writeln!(
            s,
            "{id_name},{},mean,{:.17},{:.17},{:.17}",
            sh.method, mean_ref.auroc, mean_sh.auroc, d
        )?;
    }
    Ok(s)
}

fn mean_report(s: &EvalSummary) -> EvalReport {
    EvalReport {
        method: s.method.clone(),
        ood_set: "mean".into(),
        auroc: s.mean_auroc,
        fpr_at_95tpr: s.mean_fpr_at_95tpr,
        n_id: s.reports.first().map_or(0, |r| r.n_id),
        n_ood: s.reports.iter().map(|r| r.n_ood).sum(),
        label_quality: None,
    }
}

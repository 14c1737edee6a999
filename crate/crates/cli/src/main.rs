//! `oodmine`: file-based pipeline for corpus label mining and OOD scoring.
//!
//! Stages talk to each other only through files (EMB1 embeddings, label
//! text, JSON, CSV), so every command is a pure function of its inputs.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "oodmine",
    version,
    about = "Label mining and OOD scoring on precomputed CLIP embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean a raw label corpus; optionally expand prompts or aggregate
    /// per-prompt text embeddings.
    Ingest(IngestArgs),
    /// Cluster ID image features (spherical k-means) or import assignments.
    Cluster(ClusterArgs),
    /// Mine positive / negative label sets.
    #[command(subcommand)]
    Mine(MineCommand),
    /// Compute per-image OOD scores.
    Score(ScoreArgs),
    /// AUROC / FPR95 of ID vs OOD score files.
    Eval(EvalArgs),
    /// Parameter sweeps.
    #[command(subcommand)]
    Sweep(SweepCommand),
    /// Generate a planted-concept synthetic instance.
    Synth(SynthArgs),
    /// Render eval reports as a markdown grid or robustness deltas.
    Report(ReportArgs),
    /// Run cluster, mine, score and eval from one JSON config.
    RunAll(RunAllArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    NoDuplicatesOneLemma,
    DuplicatesAllLemmas,
    DuplicatesOneLemma,
}

impl From<Policy> for oodmine::DedupPolicy {
    fn from(p: Policy) -> Self {
        match p {
            Policy::NoDuplicatesOneLemma => Self::NoDuplicatesOneLemma,
            Policy::DuplicatesAllLemmas => Self::DuplicatesAllLemmas,
            Policy::DuplicatesOneLemma => Self::DuplicatesOneLemma,
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    /// Raw corpus, one label per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "no-duplicates-one-lemma")]
    policy: Policy,
    #[arg(long)]
    source_tag: Option<String>,
    /// Cleaned corpus output.
    #[arg(long)]
    output: PathBuf,
    /// Built-in prompt set name ("simple") or a JSON array file of templates.
    #[arg(long)]
    prompts: Option<String>,
    /// Where to write label-major prompt queries for the text exporter.
    #[arg(long, requires = "prompts")]
    queries_out: Option<PathBuf>,
    /// Per-query text embeddings (EMB1) produced by the exporter.
    #[arg(long, requires_all = ["prompts", "text_out"])]
    per_query_emb: Option<PathBuf>,
    /// Aggregated per-label text embeddings output.
    #[arg(long, requires = "per_query_emb")]
    text_out: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    /// ID image features (EMB1).
    #[arg(long)]
    emb: PathBuf,
    #[arg(long, required_unless_present = "import")]
    clusters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Import external assignments (one index per line) instead of clustering.
    #[arg(long)]
    import: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    centroids_out: Option<PathBuf>,
}

#[derive(Args)]
struct MineInputs {
    /// ID image features (EMB1).
    #[arg(long)]
    img: PathBuf,
    /// Corpus text features (EMB1), row i = corpus line i.
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum MineCommand {
    /// Labels with at least M zero-shot assignments.
    Posmine {
        #[command(flatten)]
        inputs: MineInputs,
        #[arg(long, default_value_t = oodmine::mining::DEFAULT_MIN_COUNT)]
        min_count: usize,
    },
    /// Majority-voted cluster labels.
    Clustermine {
        #[command(flatten)]
        inputs: MineInputs,
        #[arg(long)]
        assign: PathBuf,
        /// Cluster count when it exceeds 1 + the largest index in the file.
        #[arg(long)]
        clusters: Option<usize>,
    },
    /// Prune negatives to the K labels farthest from the positives.
    Neg {
        #[arg(long)]
        mined: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = oodmine::mining::DEFAULT_PERCENTILE)]
        percentile: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreMethod {
    Posneg,
    Grouped,
    Mcm,
    Maxlogit,
    Energy,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(value_enum)]
    method: ScoreMethod,
    /// Image features to score (EMB1).
    #[arg(long)]
    img: PathBuf,
    /// Corpus text features; used with --mined.
    #[arg(long, requires = "mined")]
    text: Option<PathBuf>,
    /// Mined label sets JSON; used with --text.
    #[arg(long, requires = "text")]
    mined: Option<PathBuf>,
    /// Positive text features, as an alternative to --text/--mined.
    #[arg(long, conflicts_with = "mined", required_unless_present = "mined")]
    pos_emb: Option<PathBuf>,
    /// Negative text features (may have zero rows).
    #[arg(long, conflicts_with = "mined")]
    neg_emb: Option<PathBuf>,
    #[arg(long, default_value_t = oodmine::scoring::DEFAULT_TAU)]
    tau: f64,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// ID score CSV.
    #[arg(long)]
    id: PathBuf,
    /// OOD score CSV as NAME=PATH (or PATH, named by file stem); repeatable.
    #[arg(long, required = true)]
    ood: Vec<String>,
    #[arg(long, default_value = "method")]
    method: String,
    #[arg(long, default_value_t = 0.95)]
    tpr: f64,
    /// Attach label quality: mined sets JSON (needs --corpus and --gt-labels).
    #[arg(long, requires_all = ["corpus", "gt_labels"])]
    mined: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    gt_labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the markdown grid here.
    #[arg(long)]
    markdown: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SweepCommand {
    /// |Ypos|, |Ypos|/C and redundancy for several cluster counts.
    Elbow {
        #[arg(long)]
        img: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        clusters: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// AUROC / FPR95 as the number of kept negatives K varies.
    NegK {
        #[arg(long)]
        img: PathBuf,
        #[arg(long, required = true)]
        ood: Vec<String>,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        mined: PathBuf,
        /// Absolute K values.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        /// K as fractions of |Yneg|.
        #[arg(long, value_delimiter = ',')]
        k_fraction: Vec<f64>,
        #[arg(long, default_value_t = oodmine::mining::DEFAULT_PERCENTILE)]
        percentile: f64,
        #[arg(long, default_value_t = oodmine::scoring::DEFAULT_TAU)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// |Ypos| of PosMine as M varies.
    MinCount {
        #[arg(long)]
        img: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        min_count: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    concepts: usize,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 480)]
    distractors: usize,
    #[arg(long, default_value_t = 64)]
    dims: usize,
    #[arg(long, default_value_t = 0.1)]
    margin: f64,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 1000)]
    n_ood: usize,
    /// Centre OOD samples on distractor labels instead of fresh directions.
    #[arg(long)]
    ood_near_distractors: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Eval JSON files written by `eval`.
    #[arg(long, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Emit the markdown grid (the default).
    #[arg(long)]
    markdown: bool,
    /// Emit robustness deltas of every input against this reference eval.
    #[arg(long, conflicts_with = "markdown")]
    robust_reference: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunAllArgs {
    #[arg(long)]
    config: PathBuf,
}

fn init_threads() {
    if let Some(n) = std::env::var("OODMINE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if n > 0 {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not cap threads at {n}: {e}");
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    init_threads();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

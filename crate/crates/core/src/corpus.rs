//! Label corpus ingestion and prompt-ensemble text embeddings.

use std::collections::HashSet;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::embedding_io::{EmbeddingMatrix, LabelList};
use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{label}";

/// The seven-template "simple" prompt ensemble.
pub const SIMPLE_PROMPTS: [&str; 7] = [
    "itap of a {label}",
    "a bad photo of the {label}",
    "an origami {label}",
    "a photo of the large {label}",
    "a {label} in a video game",
    "art of the {label}",
    "a photo of the small {label}",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupPolicy {
    NoDuplicatesOneLemma,
    DuplicatesAllLemmas,
    DuplicatesOneLemma,
}

impl DedupPolicy {
    /// Only the no-duplicates policy removes surface-form duplicates. Lemma
    /// selection happens upstream, so the two duplicate-keeping policies
    /// behave identically here.
    pub fn deduplicates(self) -> bool {
        matches!(self, DedupPolicy::NoDuplicatesOneLemma)
    }
}

impl std::str::FromStr for DedupPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "no_duplicates_one_lemma" => Ok(Self::NoDuplicatesOneLemma),
            "duplicates_all_lemmas" => Ok(Self::DuplicatesAllLemmas),
            "duplicates_one_lemma" => Ok(Self::DuplicatesOneLemma),
            _ => Err(Error::invalid(format!("unknown dedup policy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub labels: LabelList,
    pub source_tag: String,
    pub policy: DedupPolicy,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Wraps an already-clean label list, e.g. a corpus file written by
    /// [`ingest_corpus`].
    pub fn from_labels(labels: LabelList, source_tag: impl Into<String>) -> Self {
        Self {
            labels,
            source_tag: source_tag.into(),
            policy: DedupPolicy::DuplicatesAllLemmas,
        }
    }
}

pub(crate) fn fold_key(label: &str) -> String {
    label.trim().to_lowercase()
}

/// Reads one label per line, trims, drops blank lines and (under
/// [`DedupPolicy::NoDuplicatesOneLemma`]) keeps only the first occurrence of
/// each case-folded label.
pub fn ingest_corpus(raw: impl BufRead, policy: DedupPolicy, source_tag: impl Into<String>) -> Result<Corpus> {
    let mut seen = HashSet::new();
    let mut labels = Vec::new();
    for line in raw.lines() {
        let line = line?;
        let label = line.trim();
        if label.is_empty() {
            continue;
        }
        if policy.deduplicates() && !seen.insert(fold_key(label)) {
            continue;
        }
        labels.push(label.to_string());
    }
    if labels.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(Corpus {
        labels: LabelList::new(labels)?,
        source_tag: source_tag.into(),
        policy,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    name: String,
    templates: Vec<String>,
}

impl PromptSet {
    pub fn new(name: impl Into<String>, templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::invalid("prompt set needs at least one template"));
        }
        for t in &templates {
            if t.matches(PLACEHOLDER).count() != 1 {
                return Err(Error::invalid(format!(
                    "template {t:?} must contain exactly one {PLACEHOLDER}"
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            templates,
        })
    }

    pub fn simple() -> Self {
        Self::new("simple", SIMPLE_PROMPTS.iter().map(|s| s.to_string()).collect())
            .expect("built-in templates are valid")
    }

    /// Parses a JSON array of template strings.
    pub fn from_json(name: impl Into<String>, json: &str) -> Result<Self> {
        let templates: Vec<String> = serde_json::from_str(json)?;
        Self::new(name, templates)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "simple" => Some(Self::simple()),
            _ => None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// Label-major query strings: all templates for label 0, then label 1, ...
pub fn expand_prompts(corpus: &Corpus, prompts: &PromptSet) -> LabelList {
    let queries = corpus
        .labels
        .iter()
        .flat_map(|label| prompts.templates.iter().map(move |t| t.replacen(PLACEHOLDER, label, 1)))
        .collect();
    LabelList::new(queries).expect("non-empty corpus and prompt set")
}

/// Averages each label's `prompts` consecutive query embeddings and
/// renormalizes the mean.
pub fn aggregate_prompt_embeddings(
    per_query: &EmbeddingMatrix,
    labels: usize,
    prompts: usize,
) -> Result<EmbeddingMatrix> {
    if prompts == 0 || !per_query.rows().is_multiple_of(prompts) {
        return Err(Error::invalid(format!(
            "{} query rows not divisible by {prompts} prompts",
            per_query.rows()
        )));
    }
    if per_query.rows() != labels * prompts {
        return Err(Error::LengthMismatch {
            what: "query rows vs labels*prompts",
            left: per_query.rows(),
            right: labels * prompts,
        });
    }
    let dims = per_query.dims();
    let mut data = Vec::with_capacity(labels * dims);
    let mut mean = vec![0f64; dims];
    for l in 0..labels {
        mean.iter_mut().for_each(|m| *m = 0.0);
        for p in 0..prompts {
            for (m, &v) in mean.iter_mut().zip(per_query.row(l * prompts + p)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= prompts as f64);
        let norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return Err(Error::invalid(format!(
                "mean prompt embedding of label {l} has near-zero norm"
            )));
        }
        data.extend(mean.iter().map(|m| (m / norm) as f32));
    }
    EmbeddingMatrix::from_flat(labels, dims, data)
}

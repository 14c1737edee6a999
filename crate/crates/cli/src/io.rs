use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use oodmine::embedding_io::load_labels;
use oodmine::scoring::read_scores_csv;
use oodmine::{load_embeddings, Corpus, EmbeddingMatrix};

/// Writes via a sibling temp file and rename, so a failed command never
/// leaves a partial output behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> oodmine::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)
}

pub fn emb(path: &Path) -> Result<EmbeddingMatrix> {
    load_embeddings(path).with_context(|| format!("loading embeddings {}", path.display()))
}

pub fn corpus(path: &Path) -> Result<Corpus> {
    let labels = load_labels(path).with_context(|| format!("loading corpus {}", path.display()))?;
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Corpus::from_labels(labels, tag))
}

/// Corpus plus its text embeddings, checked for row correspondence.
pub fn corpus_with_text(corpus_path: &Path, text_path: &Path) -> Result<(Corpus, EmbeddingMatrix)> {
    let c = corpus(corpus_path)?;
    let t = emb(text_path)?;
    c.labels
        .check_paired(&t)
        .with_context(|| format!("{} vs {}", corpus_path.display(), text_path.display()))?;
    Ok((c, t))
}

pub fn scores(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    read_scores_csv(&text).with_context(|| format!("parsing scores {}", path.display()))
}

/// `NAME=PATH`, or a bare path named by its file stem.
pub fn named_path(arg: &str) -> Result<(String, PathBuf)> {
    if let Some((name, path)) = arg.split_once('=') {
        if name.is_empty() || path.is_empty() {
            bail!("expected NAME=PATH, got {arg:?}");
        }
        return Ok((name.to_string(), PathBuf::from(path)));
    }
    let path = PathBuf::from(arg);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty())
        .with_context(|| format!("cannot derive a name from {arg:?}"))?;
    Ok((name, path))
}

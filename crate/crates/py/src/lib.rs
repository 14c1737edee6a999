//! Python bindings. Matrices cross the boundary as nested lists (any
//! sequence of float sequences is accepted, numpy arrays included).

use std::io::BufReader;

use oodmine::clustering as cl;
use oodmine::corpus as cp;
use oodmine::embedding_io as eio;
use oodmine::metrics as mt;
use oodmine::mining as mn;
use oodmine::scoring as sc;
use oodmine::synth as sy;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

pyo3::create_exception!(pyoodmine, OodmineError, PyValueError);

fn err(e: oodmine::Error) -> PyErr {
    match e {
        oodmine::Error::Io(_) | oodmine::Error::IoPath { .. } => PyOSError::new_err(e.to_string()),
        e => OodmineError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for oodmine::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

/// Row-normalized float32 matrix.
#[pyclass(name = "EmbeddingMatrix", module = "pyoodmine", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyEmbeddings(pub eio::EmbeddingMatrix);

#[pymethods]
impl PyEmbeddings {
    /// Rows are renormalized to unit length. Pass `dims` to build an empty
    /// matrix.
    #[new]
    #[pyo3(signature = (rows, dims=None))]
    fn new(rows: Vec<Vec<f32>>, dims: Option<usize>) -> PyResult<Self> {
        if rows.is_empty() {
            let dims = dims.ok_or_else(|| OodmineError::new_err("empty matrix needs dims"))?;
            return eio::EmbeddingMatrix::empty(dims).py().map(Self);
        }
        let m = eio::EmbeddingMatrix::from_rows(&rows).py()?;
        if let Some(d) = dims {
            if d != m.dims() {
                return Err(OodmineError::new_err(format!("dims {d} but rows have {}", m.dims())));
            }
        }
        Ok(Self(m))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        eio::load_embeddings(path).py().map(Self)
    }

    /// Loads and also returns how many rows were renormalized beyond the
    /// load tolerance.
    #[staticmethod]
    fn load_with_report(path: &str) -> PyResult<(Self, usize)> {
        let (m, off) = eio::load_embeddings_with_report(path).py()?;
        Ok((Self(m), off))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        eio::decode_embeddings(data).py().map(|(m, _)| Self(m))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        eio::save_embeddings(&self.0, path).py()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &eio::encode_embeddings(&self.0))
    }

    #[getter]
    fn rows(&self) -> usize {
        self.0.rows()
    }

    #[getter]
    fn dims(&self) -> usize {
        self.0.dims()
    }

    fn row(&self, i: usize) -> PyResult<Vec<f32>> {
        if i >= self.0.rows() {
            return Err(pyo3::exceptions::PyIndexError::new_err(i));
        }
        Ok(self.0.row(i).to_vec())
    }

    fn to_list(&self) -> Vec<Vec<f32>> {
        self.0.iter_rows().map(<[f32]>::to_vec).collect()
    }

    fn select_rows(&self, indices: Vec<usize>) -> PyResult<Self> {
        self.0.select_rows(&indices).py().map(Self)
    }

    fn __len__(&self) -> usize {
        self.0.rows()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("EmbeddingMatrix(rows={}, dims={})", self.0.rows(), self.0.dims())
    }
}

/// Deduplicated label corpus.
#[pyclass(name = "Corpus", module = "pyoodmine", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyCorpus(pub cp::Corpus);

#[pymethods]
impl PyCorpus {
    #[new]
    #[pyo3(signature = (labels, source_tag="corpus"))]
    fn new(labels: Vec<String>, source_tag: &str) -> PyResult<Self> {
        let l = eio::LabelList::new(labels).py()?;
        Ok(Self(cp::Corpus::from_labels(l, source_tag)))
    }

    /// Reads a raw label file: trims, drops blanks, applies the dedup policy.
    #[staticmethod]
    #[pyo3(signature = (path, policy="no_duplicates_one_lemma", source_tag=None))]
    fn ingest(path: &str, policy: &str, source_tag: Option<String>) -> PyResult<Self> {
        let policy: cp::DedupPolicy = policy.parse().py()?;
        let f = std::fs::File::open(path).map_err(|e| err(oodmine::Error::Io(e)))?;
        let tag = source_tag.unwrap_or_else(|| path.to_string());
        cp::ingest_corpus(BufReader::new(f), policy, tag).py().map(Self)
    }

    /// Reads an already-clean label file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let l = eio::load_labels(path).py()?;
        Ok(Self(cp::Corpus::from_labels(l, path)))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        eio::save_labels(&self.0.labels, path).py()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.0.labels.as_slice().to_vec()
    }

    #[getter]
    fn source_tag(&self) -> String {
        self.0.source_tag.clone()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Corpus(len={}, source_tag={:?})", self.0.len(), self.0.source_tag)
    }
}

/// Disjoint positive / negative index sets into a corpus.
#[pyclass(name = "MinedLabelSets", module = "pyoodmine", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyMined(pub mn::MinedLabelSets);

#[pymethods]
impl PyMined {
    #[getter]
    fn method(&self) -> String {
        match self.0.method {
            mn::MiningMethod::Posmine => "posmine",
            mn::MiningMethod::Clustermine => "clustermine",
            mn::MiningMethod::GivenGt => "given_gt",
        }
        .into()
    }

    #[getter]
    fn pos(&self) -> Vec<usize> {
        self.0.pos.clone()
    }

    #[getter]
    fn neg(&self) -> Vec<usize> {
        self.0.neg.clone()
    }

    /// Mining parameters as `(C, M, K, percentile)`; unset ones are `None`.
    #[getter]
    fn params(&self) -> (Option<usize>, Option<usize>, Option<usize>, Option<f64>) {
        let p = &self.0.params;
        (p.clusters, p.min_count, p.k, p.percentile)
    }

    fn pos_labels(&self, corpus: &PyCorpus) -> PyResult<Vec<String>> {
        self.0.pos_labels(&corpus.0).py().map(|l| l.into_inner())
    }

    fn validate(&self, corpus_len: usize) -> PyResult<()> {
        self.0.validate(corpus_len).py()
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().py()
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        mn::MinedLabelSets::from_json(s).py().map(Self)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        mn::MinedLabelSets::load(path).py().map(Self)
    }

    fn save(&self, path: &str, corpus: &PyCorpus) -> PyResult<()> {
        self.0.save(path, &corpus.0).py()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!(
            "MinedLabelSets(method={:?}, pos={}, neg={})",
            self.method(),
            self.0.pos.len(),
            self.0.neg.len()
        )
    }
}

/// Cluster indices per sample plus k-means diagnostics.
#[pyclass(name = "ClusterAssignment", module = "pyoodmine", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyClusters(pub cl::ClusterAssignment);

#[pymethods]
impl PyClusters {
    #[new]
    #[pyo3(signature = (assignment, n_clusters=None))]
    fn new(assignment: Vec<usize>, n_clusters: Option<usize>) -> PyResult<Self> {
        cl::ClusterAssignment::from_indices(assignment, n_clusters)
            .py()
            .map(Self)
    }

    #[staticmethod]
    fn load(path: &str, n: usize) -> PyResult<Self> {
        cl::import_assignments(path, n).py().map(Self)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).py()
    }

    #[getter]
    fn assignment(&self) -> Vec<usize> {
        self.0.assignment.clone()
    }

    #[getter]
    fn n_clusters(&self) -> usize {
        self.0.n_clusters
    }

    #[getter]
    fn centroids(&self) -> Option<PyEmbeddings> {
        self.0.centroids.clone().map(PyEmbeddings)
    }

    #[getter]
    fn objective_trace(&self) -> Vec<f64> {
        self.0.objective_trace.clone()
    }

    #[getter]
    fn iterations_run(&self) -> usize {
        self.0.iterations_run
    }

    fn cluster_sizes(&self) -> Vec<usize> {
        self.0.cluster_sizes()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Planted-concept synthetic instance.
#[pyclass(name = "PlantedInstance", module = "pyoodmine", frozen, skip_from_py_object)]
pub struct PyPlanted(pub sy::PlantedInstance);

#[pymethods]
impl PyPlanted {
    #[getter]
    fn images(&self) -> PyEmbeddings {
        PyEmbeddings(self.0.images.clone())
    }

    #[getter]
    fn text(&self) -> PyEmbeddings {
        PyEmbeddings(self.0.text.clone())
    }

    #[getter]
    fn ood(&self) -> PyEmbeddings {
        PyEmbeddings(self.0.ood.clone())
    }

    #[getter]
    fn corpus(&self) -> PyCorpus {
        PyCorpus(self.0.corpus.clone())
    }

    #[getter]
    fn concept_ids(&self) -> Vec<usize> {
        self.0.concept_ids.clone()
    }

    fn planted_labels(&self) -> Vec<usize> {
        self.0.planted_labels()
    }

    fn distractor_labels(&self) -> Vec<usize> {
        self.0.distractor_labels()
    }
}

#[pyfunction]
fn cosine_sim(a: &PyEmbeddings, b: &PyEmbeddings) -> PyResult<Vec<Vec<f64>>> {
    let s = eio::cosine_sim(&a.0, &b.0).py()?;
    Ok((0..s.rows).map(|i| s.row(i).to_vec()).collect())
}

#[pyfunction]
fn load_labels(path: &str) -> PyResult<Vec<String>> {
    eio::load_labels(path).py().map(|l| l.into_inner())
}

#[pyfunction]
fn save_labels(labels: Vec<String>, path: &str) -> PyResult<()> {
    eio::save_labels(&eio::LabelList::new(labels).py()?, path).py()
}

fn prompts_from(prompts: Option<Vec<String>>) -> PyResult<cp::PromptSet> {
    match prompts {
        None => Ok(cp::PromptSet::simple()),
        Some(t) => cp::PromptSet::new("custom", t).py(),
    }
}

/// Label-major prompt queries; the default template set is "simple".
#[pyfunction]
#[pyo3(signature = (corpus, templates=None))]
fn expand_prompts(corpus: &PyCorpus, templates: Option<Vec<String>>) -> PyResult<Vec<String>> {
    Ok(cp::expand_prompts(&corpus.0, &prompts_from(templates)?).into_inner())
}

#[pyfunction]
fn simple_prompts() -> Vec<String> {
    cp::PromptSet::simple().templates().to_vec()
}

#[pyfunction]
fn aggregate_prompt_embeddings(per_query: &PyEmbeddings, n_labels: usize, n_prompts: usize) -> PyResult<PyEmbeddings> {
    cp::aggregate_prompt_embeddings(&per_query.0, n_labels, n_prompts)
        .py()
        .map(PyEmbeddings)
}

#[pyfunction]
fn zero_shot_assign(images: &PyEmbeddings, text: &PyEmbeddings) -> PyResult<Vec<usize>> {
    mn::zero_shot_assign(&images.0, &text.0).py().map(|z| z.top1)
}

#[pyfunction]
#[pyo3(signature = (features, clusters, seed=0, max_iter=100, tol=1e-4))]
fn spherical_kmeans(
    py: Python<'_>,
    features: &PyEmbeddings,
    clusters: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> PyResult<PyClusters> {
    let cfg = cl::KMeansConfig {
        clusters,
        seed,
        max_iter,
        tol,
    };
    py.detach(|| cl::spherical_kmeans(&features.0, &cfg))
        .py()
        .map(PyClusters)
}

#[pyfunction]
#[pyo3(signature = (images, text, corpus, min_count=mn::DEFAULT_MIN_COUNT))]
fn posmine(images: &PyEmbeddings, text: &PyEmbeddings, corpus: &PyCorpus, min_count: usize) -> PyResult<PyMined> {
    let zs = mn::zero_shot_assign(&images.0, &text.0).py()?;
    mn::posmine(&zs, &corpus.0, min_count).py().map(PyMined)
}

#[pyfunction]
fn clustermine(
    images: &PyEmbeddings,
    text: &PyEmbeddings,
    corpus: &PyCorpus,
    clusters: &PyClusters,
) -> PyResult<PyMined> {
    let zs = mn::zero_shot_assign(&images.0, &text.0).py()?;
    mn::clustermine(&zs, &clusters.0, &corpus.0)
        .py()
        .map(|o| PyMined(o.sets))
}

#[pyfunction]
#[pyo3(signature = (sets, text, k, percentile=mn::DEFAULT_PERCENTILE))]
fn prune_negatives(sets: &PyMined, text: &PyEmbeddings, k: usize, percentile: f64) -> PyResult<PyMined> {
    mn::prune_negatives(&sets.0, &text.0, k, percentile).py().map(PyMined)
}

#[pyfunction]
#[pyo3(signature = (pos_text, candidates, k, percentile=mn::DEFAULT_PERCENTILE))]
fn negative_mine(
    pos_text: &PyEmbeddings,
    candidates: &PyEmbeddings,
    k: usize,
    percentile: f64,
) -> PyResult<Vec<usize>> {
    mn::negative_mine(&pos_text.0, &candidates.0, k, percentile).py()
}

fn score_cfg(tau: f64, group_size: Option<usize>, seed: u64) -> PyResult<sc::ScoreConfig> {
    let cfg = sc::ScoreConfig { tau, group_size, seed };
    cfg.validate().py()?;
    Ok(cfg)
}

#[pyfunction]
#[pyo3(signature = (images, pos_text, neg_text, tau=sc::DEFAULT_TAU))]
fn score_posneg(
    images: &PyEmbeddings,
    pos_text: &PyEmbeddings,
    neg_text: &PyEmbeddings,
    tau: f64,
) -> PyResult<Vec<f64>> {
    sc::score_posneg(&images.0, &pos_text.0, &neg_text.0, &score_cfg(tau, None, 0)?).py()
}

#[pyfunction]
#[pyo3(signature = (images, pos_text, neg_text, group_size, seed=0, tau=sc::DEFAULT_TAU))]
fn score_grouped(
    images: &PyEmbeddings,
    pos_text: &PyEmbeddings,
    neg_text: &PyEmbeddings,
    group_size: usize,
    seed: u64,
    tau: f64,
) -> PyResult<Vec<f64>> {
    sc::score_grouped_random(
        &images.0,
        &pos_text.0,
        &neg_text.0,
        &score_cfg(tau, Some(group_size), seed)?,
    )
    .py()
}

#[pyfunction]
#[pyo3(signature = (images, pos_text, tau=sc::DEFAULT_TAU))]
fn score_mcm(images: &PyEmbeddings, pos_text: &PyEmbeddings, tau: f64) -> PyResult<Vec<f64>> {
    sc::score_mcm(&images.0, &pos_text.0, &score_cfg(tau, None, 0)?).py()
}

#[pyfunction]
fn score_maxlogit(images: &PyEmbeddings, pos_text: &PyEmbeddings) -> PyResult<Vec<f64>> {
    sc::score_maxlogit(&images.0, &pos_text.0).py()
}

#[pyfunction]
#[pyo3(signature = (images, pos_text, tau=sc::DEFAULT_TAU))]
fn score_energy(images: &PyEmbeddings, pos_text: &PyEmbeddings, tau: f64) -> PyResult<Vec<f64>> {
    sc::score_energy(&images.0, &pos_text.0, &score_cfg(tau, None, 0)?).py()
}

#[pyfunction]
fn auroc(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> PyResult<f64> {
    mt::auroc(&id_scores, &ood_scores).py()
}

#[pyfunction]
#[pyo3(signature = (id_scores, ood_scores, tpr=0.95))]
fn fpr_at_tpr(id_scores: Vec<f64>, ood_scores: Vec<f64>, tpr: f64) -> PyResult<f64> {
    mt::fpr_at_tpr(&id_scores, &ood_scores, tpr).py()
}

/// `(overlap, f1)` of mined label strings against ground truth.
#[pyfunction]
fn label_f1_overlap(pos: Vec<String>, gt: Vec<String>) -> PyResult<(f64, f64)> {
    let q = mt::label_f1_overlap(&pos, &eio::LabelList::new(gt).py()?).py()?;
    Ok((q.overlap, q.f1))
}

#[pyfunction]
#[pyo3(signature = (
    n_concepts=20, samples_per_concept=200, n_distractors=480, dims=64, margin=0.1,
    noise=0.3, seed=0, n_ood=1000, ood_near_distractors=false, max_text_cos=0.7,
))]
#[allow(clippy::too_many_arguments)]
fn generate_planted_instance(
    n_concepts: usize,
    samples_per_concept: usize,
    n_distractors: usize,
    dims: usize,
    margin: f64,
    noise: f64,
    seed: u64,
    n_ood: usize,
    ood_near_distractors: bool,
    max_text_cos: f64,
) -> PyResult<PyPlanted> {
    let params = sy::PlantedParams {
        n_concepts,
        samples_per_concept,
        n_distractors,
        dims,
        margin,
        noise,
        seed,
        n_ood,
        ood_mode: if ood_near_distractors {
            sy::OodMode::NearDistractors
        } else {
            sy::OodMode::Fresh
        },
        max_text_cos,
    };
    sy::generate_planted_instance(&params).py().map(PyPlanted)
}

#[pymodule]
pub fn pyoodmine(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("OodmineError", m.py().get_type::<OodmineError>())?;
    m.add("DEFAULT_TAU", sc::DEFAULT_TAU)?;
    m.add("DEFAULT_MIN_COUNT", mn::DEFAULT_MIN_COUNT)?;
    m.add("DEFAULT_PERCENTILE", mn::DEFAULT_PERCENTILE)?;
    m.add_class::<PyEmbeddings>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyMined>()?;
    m.add_class::<PyClusters>()?;
    m.add_class::<PyPlanted>()?;
    m.add_function(wrap_pyfunction!(cosine_sim, m)?)?;
    m.add_function(wrap_pyfunction!(load_labels, m)?)?;
    m.add_function(wrap_pyfunction!(save_labels, m)?)?;
    m.add_function(wrap_pyfunction!(expand_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(simple_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_prompt_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(zero_shot_assign, m)?)?;
    m.add_function(wrap_pyfunction!(spherical_kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(posmine, m)?)?;
    m.add_function(wrap_pyfunction!(clustermine, m)?)?;
    m.add_function(wrap_pyfunction!(prune_negatives, m)?)?;
    m.add_function(wrap_pyfunction!(negative_mine, m)?)?;
    m.add_function(wrap_pyfunction!(score_posneg, m)?)?;
    m.add_function(wrap_pyfunction!(score_grouped, m)?)?;
    m.add_function(wrap_pyfunction!(score_mcm, m)?)?;
    m.add_function(wrap_pyfunction!(score_maxlogit, m)?)?;
    m.add_function(wrap_pyfunction!(score_energy, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(fpr_at_tpr, m)?)?;
    m.add_function(wrap_pyfunction!(label_f1_overlap, m)?)?;
    m.add_function(wrap_pyfunction!(generate_planted_instance, m)?)?;
    Ok(())
}

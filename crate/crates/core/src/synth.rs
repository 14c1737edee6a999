//! Planted-concept generator: ID image features clustered around known
//! concept text directions, distractor labels, and OOD features.
//!
//! The generator guarantees by rejection that every ID image is closer (in
//! cosine) to its own concept's text row than to any other text row by at
//! least `margin`, so zero-shot top-1 recovers the planted concept exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DedupPolicy};
use crate::embedding_io::{dot, EmbeddingMatrix, LabelList};
use crate::error::{Error, Result};

pub const MAX_ATTEMPTS: usize = 100_000;

/// Where OOD samples are centred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodMode {
    /// Fresh random directions far from every planted concept.
    Fresh,
    /// Directions of randomly chosen distractor labels.
    NearDistractors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedParams {
    pub n_concepts: usize,
    pub samples_per_concept: usize,
    pub n_distractors: usize,
    pub dims: usize,
    pub margin: f64,
    /// Approximate L2 norm of the Gaussian perturbation added to a direction
    /// before renormalizing (per-coordinate std is `noise / sqrt(dims)`).
    pub noise: f64,
    pub seed: u64,
    pub n_ood: usize,
    pub ood_mode: OodMode,
    /// Upper bound on the cosine between any two text directions.
    pub max_text_cos: f64,
}

impl Default for PlantedParams {
    fn default() -> Self {
        Self {
            n_concepts: 20,
            samples_per_concept: 200,
            n_distractors: 480,
            dims: 64,
            margin: 0.1,
            noise: 0.3,
            seed: 0,
            n_ood: 1000,
            ood_mode: OodMode::Fresh,
            max_text_cos: 0.7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedInstance {
    pub params: PlantedParams,
    pub images: EmbeddingMatrix,
    /// Planted concept per image; concept `c` is corpus row `c`.
    pub concept_ids: Vec<usize>,
    /// Concepts first, then distractors.
    pub text: EmbeddingMatrix,
    pub corpus: Corpus,
    pub ood: EmbeddingMatrix,
}

impl PlantedInstance {
    pub fn planted_labels(&self) -> Vec<usize> {
        (0..self.params.n_concepts).collect()
    }

    pub fn distractor_labels(&self) -> Vec<usize> {
        (self.params.n_concepts..self.params.n_concepts + self.params.n_distractors).collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dims: usize, scale: f64) -> Vec<f64> {
    (0..dims)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>()
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Unit direction with cosine at most `max_cos` to every row of `avoid`.
fn separated_direction(
    rng: &mut ChaCha8Rng,
    dims: usize,
    avoid: &[Vec<f32>],
    max_cos: f64,
    what: &str,
) -> Result<Vec<f32>> {
    for _ in 0..MAX_ATTEMPTS {
        let mut v = gaussian(rng, dims, 1.0);
        if !normalize(&mut v) {
            continue;
        }
        let v = to_f32(&v);
        if avoid.iter().all(|a| dot(&v, a) <= max_cos) {
            return Ok(v);
        }
    }
    Err(Error::Infeasible(format!(
        "could not place {what} with cosine <= {max_cos} after {MAX_ATTEMPTS} attempts"
    )))
}

fn perturb(rng: &mut ChaCha8Rng, center: &[f32], noise: f64) -> Option<Vec<f32>> {
    let dims = center.len();
    let mut v = gaussian(rng, dims, noise / (dims as f64).sqrt());
    for (x, &c) in v.iter_mut().zip(center) {
        *x += c as f64;
    }
    normalize(&mut v).then(|| to_f32(&v))
}

pub fn generate_planted_instance(params: &PlantedParams) -> Result<PlantedInstance> {
    let p = params;
    if p.n_concepts < 2 {
        return Err(Error::invalid("need at least 2 concepts"));
    }
    if p.samples_per_concept == 0 {
        return Err(Error::invalid("need at least 1 sample per concept"));
    }
    if p.dims < 2 {
        return Err(Error::invalid("dims must be >= 2"));
    }
    if p.margin.is_nan() || p.margin <= 0.0 {
        return Err(Error::invalid("margin must be > 0"));
    }
    if p.noise.is_nan() || p.noise < 0.0 {
        return Err(Error::invalid("noise must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    let n_text = p.n_concepts + p.n_distractors;
    let mut text: Vec<Vec<f32>> = Vec::with_capacity(n_text);
    for i in 0..n_text {
        let v = separated_direction(&mut rng, p.dims, &text, p.max_text_cos, &format!("text row {i}"))?;
        text.push(v);
    }

    let mut images = Vec::with_capacity(p.n_concepts * p.samples_per_concept);
    let mut concept_ids = Vec::with_capacity(images.capacity());
    for c in 0..p.n_concepts {
        for _ in 0..p.samples_per_concept {
            let mut accepted = None;
            for _ in 0..MAX_ATTEMPTS {
                let Some(x) = perturb(&mut rng, &text[c], p.noise) else {
                    continue;
                };
                let own = dot(&x, &text[c]);
                let ok = text
                    .iter()
                    .enumerate()
                    .all(|(j, z)| j == c || own - dot(&x, z) >= p.margin);
                if ok {
                    accepted = Some(x);
                    break;
                }
            }
            let x = accepted.ok_or_else(|| {
                Error::Infeasible(format!(
                    "no image for concept {c} met margin {} after {MAX_ATTEMPTS} attempts",
                    p.margin
                ))
            })?;
            images.push(x);
            concept_ids.push(c);
        }
    }

    let mut ood = Vec::with_capacity(p.n_ood);
    match p.ood_mode {
        OodMode::Fresh => {
            let n_dirs = p.n_concepts.max(1);
            let mut dirs = Vec::with_capacity(n_dirs);
            for i in 0..n_dirs {
                let d = separated_direction(
                    &mut rng,
                    p.dims,
                    &text[..p.n_concepts],
                    p.max_text_cos,
                    &format!("OOD direction {i}"),
                )?;
                dirs.push(d);
            }
            for i in 0..p.n_ood {
                ood.push(perturb_retry(&mut rng, &dirs[i % n_dirs], p.noise)?);
            }
        }
        OodMode::NearDistractors => {
            if p.n_distractors == 0 && p.n_ood > 0 {
                return Err(Error::invalid("near-distractor OOD needs distractors"));
            }
            for _ in 0..p.n_ood {
                let d = p.n_concepts + rng.random_range(0..p.n_distractors);
                ood.push(perturb_retry(&mut rng, &text[d], p.noise)?);
            }
        }
    }

    let labels: Vec<String> = (0..p.n_concepts)
        .map(|c| format!("concept_{c:04}"))
        .chain((0..p.n_distractors).map(|d| format!("distractor_{d:04}")))
        .collect();
    let ood = if ood.is_empty() {
        EmbeddingMatrix::empty(p.dims)?
    } else {
        EmbeddingMatrix::from_rows(&ood)?
    };

    Ok(PlantedInstance {
        params: p.clone(),
        images: EmbeddingMatrix::from_rows(&images)?,
        concept_ids,
        text: EmbeddingMatrix::from_rows(&text)?,
        corpus: Corpus {
            labels: LabelList::new(labels)?,
            source_tag: "synthetic".into(),
            policy: DedupPolicy::NoDuplicatesOneLemma,
        },
        ood,
    })
}

fn perturb_retry(rng: &mut ChaCha8Rng, center: &[f32], noise: f64) -> Result<Vec<f32>> {
    (0..MAX_ATTEMPTS)
        .find_map(|_| perturb(rng, center, noise))
        .ok_or_else(|| Error::Infeasible("degenerate OOD perturbation".into()))
}

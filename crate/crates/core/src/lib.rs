//! Label mining and out-of-distribution scoring for CLIP-style models,
//! operating entirely on precomputed image and text embeddings.
//!
//! The pipeline is: ingest a label corpus ([`corpus`]), cluster in-distribution
//! image features ([`clustering`]), mine positive and negative label sets
//! ([`mining`]), score test images ([`scoring`]) and evaluate detection and
//! label quality ([`metrics`]). [`synth`] generates planted-concept instances
//! with known ground truth.

pub mod clustering;
pub mod corpus;
pub mod embedding_io;
pub mod error;
pub mod metrics;
pub mod mining;
pub mod scoring;
pub mod synth;

pub use clustering::{spherical_kmeans, ClusterAssignment, KMeansConfig};
pub use corpus::{Corpus, DedupPolicy, PromptSet};
pub use embedding_io::{cosine_sim, load_embeddings, save_embeddings, EmbeddingMatrix, LabelList};
pub use error::{Error, Result};
pub use metrics::{auroc, fpr_at_tpr, EvalReport};
pub use mining::{clustermine, posmine, zero_shot_assign, MinedLabelSets, ZeroShotAssignment};
pub use scoring::{score_posneg, ScoreConfig};
pub use synth::{generate_planted_instance, PlantedInstance, PlantedParams};

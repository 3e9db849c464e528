//! Semantic augmentation of classification corpora with LLM-generated
//! context, plus the evaluation and significance machinery used to measure
//! its effect on downstream multi-label classifiers.

pub mod augment;
pub mod classifier;
pub mod datasets;
pub mod label;
pub mod llm_client;
pub mod metrics;
pub mod runner;
pub mod stats;
pub mod synthetic;
pub mod taxonomy;

pub use label::{Label, LabelSet};
pub use taxonomy::{Taxonomy, TaxonomyError};

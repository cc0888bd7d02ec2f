//! Relation extraction with natural-language explanations and perturbed contexts,
//! at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: reverse-mode autodiff on `f64` matrices, Adam, finite differences
//! - [`encoder`]: a micro BERT-style pair encoder with per-position embedding overrides
//! - [`explanations`]: placeholder substitution, random corruption, ExpBERT features
//! - [`perturbed_context`]: the five learnable-context variants and their features
//! - [`data`]: a synthetic relation-extraction task and JSONL corpora
//! - [`training`]: model assembly, freezing policy, MLM pretraining, metrics, timing
//! - [`harness`]: experiment sweeps, reports and the CLI behind `relctx`

pub mod data;
pub mod encoder;
pub mod error;
pub mod explanations;
pub mod harness;
pub mod numerics;
pub mod perturbed_context;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};

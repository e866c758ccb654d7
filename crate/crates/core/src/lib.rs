//! Core library for a few-shot document-graph key information extractor.
//!
//! A document is parsed into word-level text regions with bounding boxes.
//! Each region becomes a graph node carrying fused textual and visual
//! features; edges carry spatial relations. Multi-head attention message
//! passing with grid positional embeddings refines the node features, and
//! a linear head classifies every node into a key-value class.
//!
//! Modules:
//! - [`tensor`]: dense f64 tensors and the reverse-mode autodiff tape
//! - [`doc`]: the document/label data model, reading order and grid binning
//! - [`synth`]: deterministic synthetic form-document corpora
//! - [`encoders`]: hash n-gram text features, conv visual features, RoI pooling
//! - [`model`]: graph construction, attention propagation, classification
//! - [`train`]: the few-shot training loop with geometric and graph augmentation
//! - [`eval`]: macro-F1 evaluation and the OCR-error robustness protocol

pub mod doc;
pub mod encoders;
pub mod eval;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use doc::{BBox, Document, LabelSet, TextRegion};
pub use model::{ModelConfig, ModelParams};
pub use tensor::{Tape, Tensor, Var};

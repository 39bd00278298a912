//! Desk-scale tri-modality (vision / audio / language) pretraining framework.
//!
//! Three single-modality transformer encoders feed two pretext objectives: a
//! grouped bidirectional contrastive alignment loss over a shared embedding
//! space, and a grouped causal masked-captioning loss through a multimodal
//! decoder with selectable fusion attention. Downstream adapters cover
//! retrieval, caption generation, and generative QA. Everything runs on a
//! small tape-based f64 autodiff engine so gradients are checkable against
//! finite differences.

pub mod ablation;
pub mod adapters;
pub mod audio;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod mga;
pub mod model;
pub mod mgc;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};

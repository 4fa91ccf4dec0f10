//! Desk-scale multimodal anomaly detection.
//!
//! A small multimodal pipeline that localises defects on object classes
//! never seen during training:
//!
//! * [`numcore`]: tensors, a reverse-mode gradient tape and finite-difference checks.
//! * [`encoders`]: patch-embedding visual encoder, convolutional backbone, tiny causal LM.
//! * [`ltc`]: the locality-enhanced token-compressing visual projector.
//! * [`dssl`]: patch-similarity distributions and the distillation loss between them.
//! * [`seghead`]: `<seg>`-prompted mask decoder and the training losses.
//! * [`databench`]: synthetic defect datasets and anomaly metrics.
//! * [`pipeline`]: configuration, training, evaluation and inference.

pub mod databench;
pub mod dssl;
pub mod encoders;
pub mod error;
pub mod ltc;
pub mod nn;
pub mod numcore;
pub mod pipeline;
pub mod seghead;

pub use encoders::{
    Backbone, BackboneFeatures, MultiLevelFeatures, Segment, TinyLm, TokenSequence, VisualEncoder, Vocab,
};
pub use error::{Error, Result};
pub use numcore::{Graph, ParamStore, Real, Tensor, Var};

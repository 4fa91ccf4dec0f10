//! Trainable stand-ins for the frozen encoders: a multi-level patch-embedding
//! visual encoder, a convolutional backbone and a tiny causal language model.

mod backbone;
mod lm;
mod text;
mod visual;

#[cfg(test)]
mod tests;

pub use backbone::{Backbone, BackboneConfig, BackboneFeatures, BACKBONE_STRIDE};
pub use lm::{LmConfig, LmOutput, TinyLm};
pub use text::{Segment, TokenSequence, Vocab, EOS_TOKEN, IMAGE_TOKEN, SEG_TOKEN};
pub use visual::{MultiLevelFeatures, VisualEncoder, VisualEncoderConfig};

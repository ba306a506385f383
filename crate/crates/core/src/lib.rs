//! Desk-scale embedding-as-mask segmentation assistant.
//!
//! A small multimodal language model emits a `<SEG>` token whose hidden
//! embedding is projected and decoded into a binary segmentation mask,
//! trained end-to-end with text-generation and mask losses on procedurally
//! generated scenes.

pub mod datamodel;
pub mod decoder;
pub mod error;
pub mod lm;
pub mod lora;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod trainer;
pub mod tokenizer;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod vision;

pub use error::{Result, SegError};
pub use scalar::Scalar;

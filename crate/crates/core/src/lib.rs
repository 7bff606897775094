//! Multimodal (text + image) ideology classification.
//!
//! Documents pair article text with an image and a five-point ideology
//! label. A pre-norm transformer encodes text, a shifted-window transformer
//! encodes images, and a fusion module joins the two before a linear head.
//! Encoders can be pretrained with contrastive, captioning or triplet
//! objectives over story clusters, then fine-tuned with early stopping.
//!
//! Parameters are stored as `f32` and evaluated in `f64` by a small
//! reverse-mode autodiff graph ([`graph`]); [`gradcheck`] compares its
//! gradients against finite differences.

pub mod analytics;
pub mod checkpoint;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

//! Multimodal form document entity extraction.
//!
//! The pipeline turns OCR tokens and a page raster into a nearest-neighbour
//! token graph whose edges carry layout and RoI-pooled image features. A
//! graph convolutional encoder builds super-tokens that feed a sparse
//! local/global transformer with rich spatial attention. Pre-training
//! combines masked language modeling with a graph contrastive loss over two
//! corrupted views of each document; fine-tuning learns BIOES tags scored
//! with entity-level F1.

pub mod attention;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod gradcheck;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::{Parameter, Precision, Tensor};

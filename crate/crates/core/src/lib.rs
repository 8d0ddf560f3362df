//! Desk-scale laboratory for pooling strategies in machine-generated text
//! detection.
//!
//! The crate trains a small from-scratch transformer encoder for binary
//! human-vs-machine text classification and compares four ways of collapsing
//! its token representations into one vector:
//!
//! * mean pooling over the final layer,
//! * softmax-weighted combination of all layer outputs followed by mean
//!   pooling,
//! * the same layer combination followed by multi-query attention pooling,
//! * gated fusion of the mean-pooled and attention-pooled vectors.
//!
//! Everything runs on a minimal reverse-mode tape in 64-bit floats, so every
//! backward rule can be (and is) verified against central finite
//! differences. Synthetic corpora with a controlled class length asymmetry
//! stand in for real data, which also makes the length-bias probe
//! reproducible.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod head;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pooling;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::{Seeder, StreamRng};
pub use tape::{Tape, TensorRef};
pub use tensor::Tensor;

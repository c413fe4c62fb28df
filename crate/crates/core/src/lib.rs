//! Desk-scale active-learning workbench for binary image segmentation.
//!
//! The crate is organized around a small dense-tensor kernel ([`tensor`]),
//! a configurable encoder-decoder network family ([`net`]) with Monte Carlo
//! dropout inference, per-pixel uncertainty acquisition functions
//! ([`acquisition`]), a pool-based active-learning loop ([`active_learning`]),
//! a random architecture/hyperparameter search harness ([`nas`]), a synthetic
//! ellipse-segmentation dataset ([`synthdata`]), and IOU metrics plus
//! byte-deterministic report emission ([`metrics`]).

pub mod acquisition;
pub mod active_learning;
pub mod error;
pub mod metrics;
pub mod nas;
pub mod net;
pub mod rng;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;

//! Recurrent video super-resolution with a prebuilt initial hidden state.
//!
//! The network reconstructs each LR frame from the current frame, its
//! predecessor and a recurrent hidden state. Instead of starting that state
//! at zero, a small prebuilder digests the first `m` frames so the earliest
//! outputs see as much temporal context as later ones.

pub mod ablation;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod ipnet;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rrnet;
pub mod tensor;
pub mod trainer;

pub use config::{Backbone, ModelConfig};
pub use error::{Error, Result};
pub use model::Iprrn;
pub use nn::Parameters;
pub use rrnet::HiddenState;
pub use tensor::Tensor;

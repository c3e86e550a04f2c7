//! Multi-decoder semantic image transmission.
//!
//! One joint source-channel encoder (windowed-attention semantic encoder
//! followed by a per-token channel coder) sends a unit-power latent over an
//! AWGN channel to two decoders of different depth. The crate contains the
//! differentiable tensor engine, the model, the channel, the training
//! regimens (iterative, staged with a frozen encoder, partial parameter
//! transfer, output distillation), metrics and data ingestion.

pub mod channel;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};

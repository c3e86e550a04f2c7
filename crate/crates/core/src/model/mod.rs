//! Encoder, decoders, their parameters and checkpoints.

pub mod checkpoint;
mod config;
mod network;
mod params;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use config::{DecoderId, ModelConfig, Ratio};
pub use network::{Model, PIXEL_CENTER};
pub use params::{
    param_specs, transfer_selector, transfer_stages, Binding, Init, ParamSpec, ParameterSet, TRANSFER_SUFFIXES,
};

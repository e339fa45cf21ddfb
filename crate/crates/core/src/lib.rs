//! Structured panel captioning with caption-conditioned panel detection.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every numerical piece of
//! the pipeline: a small reverse-mode autodiff engine, the toy captioner and
//! query detector, the gated fusion module that conditions detector queries on
//! caption-token states, set-based detection losses, sequence-level rewards,
//! the four-stage training schedule and the occurrence-level caption
//! evaluation protocol. File formats, the CLI and anything touching the
//! filesystem live in the `panelcap` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod captioner;
pub mod checkpoint;
pub mod datagen;
pub mod detection;
pub mod eval;
pub mod fusion;
pub mod image;
pub mod model;
mod error;
pub mod nn;
pub mod rewards;
pub mod structured;
pub mod tensor;
pub mod training;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;

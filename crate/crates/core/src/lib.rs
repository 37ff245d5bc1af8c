//! Compression-robust recurrent video super-resolution.
//!
//! The crate covers the whole loop: synthesizing low-resolution inputs from
//! ground truth ([`degradation`], [`codec`]), the bi-directional recurrent
//! model ([`imageops`], [`networks`], [`recurrence`]), training with
//! compression augmentation ([`training`], [`checkpoint`]) and PSNR/SSIM
//! benchmarking ([`metrics`], [`evaluation`]). [`cli`] wires these into the
//! `vsr` binary; the `examples/` directory shows each capability on its own.

pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod degradation;
pub mod error;
pub mod evaluation;
pub mod frame;
pub mod graph;
pub mod imageops;
pub mod metrics;
pub mod networks;
pub mod recurrence;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use frame::{Clip, ColorSpace, Direction, FlowField, FlowScale, Frame, RecurrentState};

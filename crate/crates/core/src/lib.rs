//! Multimodal sarcasm detection on a from-scratch reverse-mode autograd engine.
//!
//! The model reads three inputs per sample: tweet text, a short list of image
//! attribute tokens, and an RGB raster. Three signals are fused:
//!
//! * `Q_film`: the image passed through residual conv blocks whose feature maps
//!   are scaled and shifted per channel by parameters a GRU produces from the
//!   text ([`film`]).
//! * `[CLS]`: the text summary vector from a small transformer encoder
//!   ([`text`]).
//! * `Q_att`: attribute features weighted by how strongly each attribute
//!   interacts with the text through a bilinear affinity matrix
//!   ([`coattention`]).
//!
//! The concatenation goes through a single logistic unit ([`model`]).
//!
//! This crate is `no_std` (it needs `alloc`). File formats, the command line
//! and wall-clock timing live in the companion `incongruity` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod coattention;
pub mod data;
mod error;
pub mod film;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

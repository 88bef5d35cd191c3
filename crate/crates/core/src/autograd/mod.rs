//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every op pushes one node that
//! records its inputs (always earlier nodes, so the tape is acyclic by
//! construction) plus whatever intermediates its backward rule needs.
//! [`Graph::backward`] walks the tape in reverse from a scalar loss and adds
//! the resulting gradients onto the leaves that require them; repeated calls
//! accumulate until [`Graph::zero_grad`].
//!
//! Trainable tensors live in a [`ParamStore`] and enter a graph through
//! [`Graph::param`], which shares the stored buffer instead of copying it.

mod gemm;
mod graph;
mod ops;
pub mod optim;
mod params;

pub use graph::{Graph, Var};
pub use ops::{sigmoid, Elementwise, LAYER_NORM_EPS};
pub use optim::{clip_global_norm, Adam, AdamConfig, GroupRates};
pub use params::{Param, ParamGroup, ParamId, ParamStore};

pub(crate) use gemm::gemm;

//! LamFormer multi-organ segmentation network, from scratch.
//!
//! The crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation: the tensor type and its reverse-mode tape, the three attention
//! kernels, the encoder/decoder blocks, the assembled network, the training
//! loss and evaluation metrics, synthetic data, the optimizer and the
//! closed-form cost model used by the benchmarks. File formats, timing and
//! the command-line tool live in the `lamformer` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod bench;
pub mod blocks;
pub mod checks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heatmap;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{Bound, ParamBuilder, ParamId, ParamStore};
pub use real::Real;
pub use tape::{Activation, Gradients, Padding, PoolKind, Tape, Var};
pub use tensor::{LabelMap, Tensor};

//! Model core for visual abductive reasoning.
//!
//! Everything in this crate is pure computation over `alloc`: a small
//! reverse-mode autodiff engine, the causal hypothesis selector, the
//! miniature reasoner backbone, the adapter-extended denoising U-Net,
//! the two-stage training loops and the caption metrics. File formats,
//! network clients and the command line live in the `abduct` crate.
#![cfg_attr(not(test), no_std)]
#![allow(clippy::too_many_arguments)]
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod autograd;
pub mod contrast;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod hypothesis;
pub mod imaginer;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod reasoner;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod tokenizer;
pub mod training;

pub use autograd::{Ctx, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;

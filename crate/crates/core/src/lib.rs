//! Deep amortized clustering.
//!
//! A filtering network reads a whole point set and extracts one cluster per
//! forward pass: a cluster parameter θ plus a membership probability for every
//! point. Running it repeatedly on the points that remain clusters a dataset
//! with an unknown number of clusters using forward passes only.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode tape, Adam.
//! - [`set_blocks`]: masked multi-head attention, MAB, ISAB, PMA.
//! - [`density`]: diagonal Gaussian and context-conditioned MAF cluster densities.
//! - [`filtering`]: minimum-loss and anchored filtering networks with their losses.
//! - [`act_st`]: the adaptive-computation-time Set Transformer baseline.
//! - [`datagen`]: seeded mixture-of-Gaussians and warped-Gaussian benchmarks.
//! - [`evaluation`]: ARI, NMI, k-MAE and an EM reference fit.
//! - [`engine`]: training, the iterative clustering driver, checkpoints, plots.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` for training, `f64`
//! for verification); the aliases below name the common instantiations.

pub mod act_st;
pub mod datagen;
pub mod density;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod filtering;
pub mod scalar;
pub mod set_blocks;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use set_blocks::{Isab, IsabStack, Mab, Pma, Sab, SetBatch};
pub use tensor::{Adam, AdamConfig, Graph, ParamStore, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;

//! Energy-based cross-attention.
//!
//! * [`numerics`]: dense matrices, stabilized `lse`/softmax.
//! * [`hopfield`]: modern Hopfield energy, its update rule and the attention bridge.
//! * [`ebcu`]: conditional/prior energies over keys and the Bayesian context update.
//! * [`ebcq`]: query energies and weighted multi-context attention.
//! * [`xattn`]: cross-attention layers and the per-step context cascade.
//! * [`diffusion`]: a toy DDPM with a cross-attention denoiser and the
//!   experiments built on it.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod diffusion;
pub mod ebcq;
pub mod ebcu;
pub mod error;
pub mod hopfield;
pub mod numerics;
pub mod xattn;

pub use error::{Error, Result};
pub use numerics::Matrix;

//! Toy diffusion harness: noise schedule, synthetic concept grids, a small
//! cross-attention denoiser with manual backprop, training, sampling and the
//! paired baseline/context-update experiments.

pub mod data;
pub mod experiments;
pub mod model;
pub mod sampling;
pub mod schedule;
pub mod train;

pub use data::{Prompt, Region, ToyDataset, ToySample};
pub use model::{DenoiserConfig, ToyDenoiser};
pub use schedule::{forward_noising, NoiseSchedule};

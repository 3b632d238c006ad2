//! Conditional rectified flow for super-resolution, PF-ODE sampling, and
//! one-step trajectory distillation with a tunable fidelity/realism time `t`.
//!
//! The pipeline, bottom up:
//!
//! * [`tensor`], [`autodiff`], [`model`], [`optim`]: `f64` tensors, a
//!   reverse-mode tape, MLP / conv velocity networks, Adam and EMA.
//! * [`degradation`]: block-mean downsampling `H`, its transpose and the
//!   replicating lift used to build the LR condition.
//! * [`flow`]: noise-augmented conditional flow matching (teacher training).
//! * [`solvers`]: Euler / RK2 / Dormand–Prince integration of the PF-ODE,
//!   final-state estimates and flow straightness.
//! * [`distill`]: the one-step student and its trajectory-consistency,
//!   alignment and boundary losses.
//! * [`oracles`]: closed-form Gaussian flows and Monte-Carlo ground truth.
//! * [`eval`]: PSNR, a multi-scale gradient perceptual proxy, `t` sweeps.
//! * [`data`], [`checkpoint`], [`config`], [`cli`]: datasets, the tensor
//!   container format, run configuration and the command line.

pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod data;
pub mod degradation;
pub mod distill;
pub mod error;
pub mod eval;
pub mod flow;
mod kernels;
pub mod model;
pub mod optim;
pub mod oracles;
pub mod random;
pub mod solvers;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ArchSpec, Backbone, ParamSet, VelocityModel};
pub use tensor::Tensor;

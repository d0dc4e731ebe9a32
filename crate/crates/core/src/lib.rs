//! Numerical laboratory for timestep embeddings in time-dependent networks.
//!
//! The crate provides a small rank-4 tensor type with a reverse-mode tape,
//! a unified batch/layer/instance/group normalization, every timestep
//! embedding mechanism used by NODE-style and DDPM-style blocks, adaptive
//! and fixed-step ODE integrators, toy training tasks with an analytic
//! time-blind loss floor, and diagnostics that certify whether a configured
//! block can see `t` at all.

pub mod blocks;
pub mod diagnostics;
pub mod embed;
mod error;
pub mod gradcheck;
pub mod norm;
pub mod ode;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ActivationKind, Padding, Shape, Tensor};

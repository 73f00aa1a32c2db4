//! A desk-scale selective-scan SSM diffusion backbone with a U-shaped
//! sequence-length hierarchy, trained with rectified flow and sampled with a
//! fixed-step Euler integrator.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] / [`graph`] / [`ops`]: a dense f64 tensor with reverse-mode
//!   autodiff over an append-only tape, plus the op set the network needs.
//! - [`scan`]: the eight deterministic zigzag orderings of a 2D token grid
//!   and the cyclic block-to-scan assignment.
//! - [`ssm`]: input-dependent discretization and the gated selective-scan
//!   sequence block.
//! - [`net`]: the 25-block encoder/bottleneck/decoder network with AdaLN
//!   timestep conditioning, skip fusion and optional cross-attention.
//! - [`flow`]: the rectified-flow objective, the training step and the Euler
//!   sampler.

pub mod error;
pub mod fdiff;
pub mod flow;
pub mod graph;
pub mod net;
pub mod ops;
pub mod optim;
pub mod scan;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Value};
pub use tensor::Tensor;

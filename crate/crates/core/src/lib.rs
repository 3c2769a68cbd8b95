//! Limited-area neural weather prediction on planar mesh graphs.
//!
//! The crate is organized around the forecast pipeline:
//!
//! * [`tensor`] / [`tape`] / [`optim`] — dense tensors with reverse-mode
//!   automatic differentiation and the AdamW optimizer,
//! * [`graph`] — construction of the grid, the multi-scale / hierarchical /
//!   single-level mesh graphs and their static features,
//! * [`model`] — the encode–process–decode interaction networks, boundary
//!   forcing and autoregressive rollout,
//! * [`data`] — synthetic advection-diffusion trajectories, forcing features,
//!   normalization statistics and sample windowing,
//! * [`train`] — the weighted MSE loss and the two-phase training loop,
//! * [`eval`] — rollout evaluation, persistence baseline, degree diagnostics
//!   and forecast export,
//! * [`container`] / [`checkpoint`] — the versioned binary file format shared
//!   by graphs, datasets and parameter checkpoints.

pub mod checkpoint;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{LamError, Result};
pub use tensor::{Scalar, Tensor};

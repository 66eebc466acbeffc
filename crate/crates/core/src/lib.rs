//! Physics-guided neural-network regression and pruning for ground magnetic
//! perturbation forecasting.
//!
//! The crate covers the full offline workflow:
//!
//! - [`dataset`]: minute-cadence CSV ingestion, gap repair, target derivation,
//!   chronological splits and min-max scaling,
//! - [`nn`]: a dense ReLU network with exact gradients, SGD and Adam,
//! - [`physics`]: Newell coupling, clock angle and the physics-regularized loss,
//! - [`pruning`]: sensitivity and physics-guided pruning of neurons or weights,
//! - [`search`]: grid search over the physics weight and the pruning balance,
//! - [`eval`]: NRMSE reports, noise robustness sweeps and comparison tables,
//! - [`synth`]: synthetic data with controllable physics consistency,
//! - [`model_io`]: checksummed model files.
//!
//! Data-parallel loops (inference chunks, score accumulation, grid
//! candidates, noise levels) run on rayon with the default `parallel`
//! feature and sequentially without it. Results are identical either way.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod model_io;
pub mod nn;
pub mod par;
pub mod physics;
pub mod pruning;
pub mod search;
pub mod synth;

pub use error::{Error, Result};
pub use matrix::Matrix;

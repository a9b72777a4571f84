//! Automatic rank search for low-rank adapters.
//!
//! A low-rank adapter learns an update `ΔW = up · down` on top of a frozen base
//! matrix. Training periodically runs a spectral *restart*: each factor is
//! decomposed with an SVD, the directions carrying most of the squared spectral
//! energy are kept, and the remainder is replaced by Gaussian noise with
//! matched variance. The energy threshold follows the training loss, so the
//! retained rank is found during training instead of being fixed up front.
//!
//! The crate is organised as:
//!
//! - [`adapter`]: adapter layers, forward evaluation, effective update.
//! - [`spectral`]: SVD, signal/noise split and the restart transform.
//! - [`schedule`]: separation strength and loss-driven threshold.
//! - [`task`]: synthetic teacher/student tasks with a planted low-rank update.
//! - [`train`]: the training loop with periodic restarts and a fixed-rank baseline.
//! - [`analysis`]: rank metrics and the hypersphere ratio Monte Carlo.
//!
//! Data-parallel loops (Monte Carlo trials, seed sweeps, per-adapter restarts)
//! go through [`par`], which uses rayon when the `parallel` feature is on and
//! a plain sequential loop otherwise. Results are identical either way.

pub mod adapter;
pub mod analysis;
pub mod error;
pub mod par;
pub mod rng;
pub mod schedule;
pub mod spectral;
pub mod task;
pub mod train;

pub use adapter::{AdapterNetwork, AdapterPair};
pub use error::{Error, Result};
pub use spectral::{ModuleRestart, RestartReport, SignalSplit, SpectralFactors, UnionScope};
pub use task::{NetworkTask, SyntheticTask, TaskSpec};
pub use train::{Mode, Optimizer, TrainConfig, TrainRecord};

/// Dense real matrix used throughout the crate.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Dense real column vector.
pub type Vector = nalgebra::DVector<f64>;

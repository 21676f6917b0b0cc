//! Dynamic state and input estimation (DSIE) for microgrids.
//!
//! Branch currents and capacitor-bus voltages are estimated as states while
//! free bus voltages, load currents and inverter terminal voltages are
//! estimated as unknown inputs. The crate provides:
//!
//! - [`numerics`]: dense WLS, Mahalanobis distance, ZOH discretization.
//! - [`model`]: dq-frame state-space assembly from a network description and
//!   multi-area partitioning.
//! - [`estimator`]: the joint input/state filter with bad-data detection, plus
//!   the WLS-snapshot and tracking (random-walk) baselines.
//! - [`distributed`]: per-area estimation with shared-input exchange, cross
//!   checks and fusion in synchronous rounds.
//! - [`sim`]: ground-truth simulation, μPMU measurement synthesis and false
//!   data injection.

pub mod distributed;
pub mod estimator;
pub mod model;
pub mod numerics;
pub mod sim;

pub use nalgebra::{DMatrix, DVector};

/// Dense real matrix used throughout the crate.
pub type Mat = DMatrix<f64>;
/// Dense real vector used throughout the crate.
pub type Vector = DVector<f64>;

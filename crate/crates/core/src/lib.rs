//! Distributed nonlinear MPC formation control for planar twin-thruster
//! vehicles that exchange neural-network-compressed trajectory plans over
//! a delayed, lossy network.

// `!(x > 0.0)` is how NaN gets rejected alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod codec;
pub mod collision;
pub mod comms;
pub mod dynamics;
pub mod graph;
pub mod monitor;
pub mod nmpc;
pub mod scalar;
pub mod scenario;
pub mod terminal;

pub use scalar::Real;

pub type VehicleState = dynamics::VehicleState<f64>;
pub type VehicleInput = dynamics::VehicleInput<f64>;
pub type VehicleParams = dynamics::VehicleParams<f64>;
pub type ConstraintSets = dynamics::ConstraintSets<f64>;
pub type SpatialFilter = collision::SpatialFilter<f64>;
pub type GainParams = monitor::GainParams<f64>;

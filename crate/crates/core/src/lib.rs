//! Clock synchronization over packet networks: simulation and estimation.
//!
//! The library simulates free-running affine clocks that exchange two-way
//! time stamps over links with stochastic queueing delays, and estimates
//! every node's clock offset against a reference (grand-master) node with
//! three estimators:
//!
//! * a per-pair Kalman filter tracking offset and drift ([`kf`]),
//! * network-wide Gaussian belief propagation on a factor graph built from
//!   pairwise exchange statistics ([`gbp`]),
//! * a hybrid scheme where backhaul nodes run belief propagation while edge
//!   nodes track their parent with a Kalman filter ([`hybrid`]).
//!
//! [`oracle`] provides exact joint-Gaussian marginals and brute-force
//! numeric posteriors used to validate the message passing, and [`harness`]
//! runs seeded Monte-Carlo experiments and writes RMSE tables.

pub mod config;
pub mod error;
pub mod gbp;
pub mod harness;
pub mod hybrid;
pub mod kf;
pub mod model;
pub mod oracle;
pub mod ptp;

pub use error::{Error, Result};
pub use model::{ClockState, LinkModel, Scenario, Topology, WorldInstance};
pub use ptp::{PairStats, TimestampQuad};

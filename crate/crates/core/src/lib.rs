//! Stop-line-aided cooperative inertial navigation toolkit.
//!
//! Vehicles at a signalized intersection run a loosely coupled GNSS/INS
//! error-state Kalman filter. The first vehicle stopped behind a stop line
//! has a priori known geometry available (the painted stop line and lane
//! line locations), which yields a position observation far tighter than
//! degraded urban GNSS. V2V beacons and UWB-style inter-vehicle ranges
//! then extend that benefit to the rest of the ad-hoc network.
//!
//! Module map:
//! - [`geodesy`]: coordinate frames, WGS-84 curvature radii, road-frame
//!   covariance rotation.
//! - [`ins`]: strapdown mechanization, the 15-state error transition
//!   model, and closed-loop error feedback.
//! - [`ekf`]: error-state Kalman machinery (prediction, Joseph-form
//!   update, observation stacking, innovation gating).
//! - [`stopline`]: stop-line map geometry, the first-stopped position
//!   solve, and the stop-line observation.
//! - [`v2v`]: beacon/range payloads, the linearized range observation
//!   with neighbor-uncertainty inflation, and the case scheduler.
//! - [`sim`]: deterministic multi-vehicle intersection simulator running
//!   the four method variants (SP, SL-SP, CP, SL-CP) on shared streams.
//! - [`metrics`]: RMSE/NEES metrics, phase partitioning, and the trace
//!   and metrics file writers.

// Validation predicates use `!(x > 0.0)` so that NaN fails closed.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ekf;
pub mod geodesy;
pub mod ins;
pub mod metrics;
pub mod sim;
pub mod stopline;
pub mod v2v;

pub use geodesy::{GeodeticPosition, NedVector, RoadFrame};
pub use ins::{ErrorState15, ImuSample, NavSolution};

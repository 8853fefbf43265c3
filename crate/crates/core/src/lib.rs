//! Collision-probability estimation for LQG-tracked rigid bodies by adaptive
//! mixture importance sampling.

pub mod closepoint;
pub mod control;
pub mod dynamics;
pub mod estimator;
pub mod exec;
pub mod gauss;
pub mod geometry;
pub mod isopt;
pub mod pipeline;
pub mod report;
pub mod scenario;

pub use exec::Execution;

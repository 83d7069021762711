//! Deterministic desk-scale simulator and planning library for perception-aware
//! multi-UAV exploration with consumer-grade hardware constraints.
//!
//! The crate composes a voxel world simulator with explicit sensing and odometry
//! oracles, an occupancy/ESDF mapping stack, viewpoint-pair frontier planning,
//! yaw-constrained trajectory generation, and a semi-distributed fleet layer,
//! plus the metrics and scenario runner used to evaluate them.

pub mod error;
pub mod fleet;
pub mod frontier;
pub mod grid;
pub mod mapping;
pub mod math;
pub mod metrics;
pub mod planner;
pub mod scenario;
pub mod trajectory;
pub mod world;

pub use error::{Result, SimError};
pub use math::Vec3;

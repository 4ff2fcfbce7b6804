//! Multi-fidelity receding-horizon planning and mapping for a jerk-controlled UAV.
//!
//! The crate is organized around one planning cycle:
//!
//! * [`map`] — sliding-window voxel grid fed by depth scans (free-space carving
//!   plus endpoint occupancy), goal projection, and grid serialization.
//! * [`jps`] — 3D Jump Point Search over the inflated grid, plus the
//!   path/sphere geometry used to pick local targets on it.
//! * [`primitives`] — jerk-controlled and velocity-controlled motion
//!   primitives with time-normalized costs.
//! * [`clouds`] — short-horizon collision gate over not-yet-fused depth
//!   clouds (k-d trees) combined with the fused map.
//! * [`replan`] — the receding-horizon replanner that composes the three
//!   fidelity levels into one cost-to-go and commits trajectories.
//! * [`sim`] — deterministic closed-loop simulator: analytic worlds, a
//!   simulated depth camera, the episode loop, and a known-map oracle.
//! * [`config`] / [`trace`] — run configuration and on-disk run artifacts.

pub mod clouds;
pub mod config;
pub mod jps;
pub mod map;
pub mod primitives;
pub mod replan;
pub mod sim;
pub mod trace;

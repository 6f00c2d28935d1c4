//! Temporal LIDAR upsampling from a monocular camera.
//!
//! Between two LIDAR sweeps, objects are tracked in the camera stream and
//! their 3D points from the last sweep are moved with per-object poses
//! estimated by robust PnP, producing virtual sweeps at the camera rate.

pub mod association;
pub mod commands;
pub mod config;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod io;
pub mod kdtree;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod pose;
pub mod scenario;
pub mod synthesis;
pub mod tracking2d;

pub use error::{Error, Result};

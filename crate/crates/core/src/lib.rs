//! Multi-view consistent inference for view-based 3D shape completion.
//!
//! Shapes are represented as depth images from a fixed rig of cameras. A
//! differentiable cross-view consistency loss scores how well the views
//! agree on one surface, and an energy made of that loss plus a proximity
//! term is minimized either directly over the depth pixels or over the
//! descriptor of a differentiable generator.

pub mod camera;
pub mod cli;
pub mod consistency;
pub mod energy;
mod error;
pub mod generator;
pub mod io;
pub mod metrics;
pub mod raster;
pub mod synth;

pub use camera::{back_project, cube_corner_rig, project, CameraRig, Intrinsics, Pixel3, Point3, View, ViewPose};
pub use consistency::{ConsistencyConfig, DepthRange};
pub use error::{Error, Result};
pub use raster::DepthImage;


//! Context modeling for volumetric 3D human pose estimation.
//!
//! Pictorial structures with exact tree inference, the FCN/GNN/LCN layer
//! family, the ContextPose attention module, a small differentiable model
//! with hand-written gradients, metrics, and a synthetic data generator.

pub mod error;
pub mod contextpose;
pub mod gnn;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod pose;
pub mod psm;
pub mod skeleton;
pub mod synthgen;

pub use error::{Error, Result};
pub use grid::{FeatureVolume, Heatmap, VoxelGrid};
pub use pose::{Pose, Vec3};
pub use skeleton::{LimbPrior, LimbPriors, SkeletonGraph};

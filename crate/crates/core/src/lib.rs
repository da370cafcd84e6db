//! Articulated 3D Gaussian avatars that learn from motion-blurred video.
//!
//! A canonical Gaussian cloud is posed by linear blend skinning plus a small
//! pose-conditioned offset network, splatted with an EWA rasterizer, and
//! compared against blurred frames through an average of renders along a
//! learned per-frame exposure trajectory. Every stage has a hand-written
//! backward pass; [`gradcheck`] checks them against finite differences.
//!
//! Module map:
//!
//! - [`geom`]: quaternions, slerp, rigid transforms, covariance building
//! - [`scene`]: the Gaussian cloud, initialisation, densification
//! - [`articulation`]: kinematic chain, forward kinematics, skinning
//! - [`render`]: projection, tile rasterizer and its backward pass
//! - [`blur`]: exposure trajectories, blur synthesis and the fusion mask
//! - [`tinynet`]: dense ReLU networks and Adam
//! - [`model`]: the full deformable avatar
//! - [`train`]: losses, metrics and the staged trainer
//! - [`synthdata`]: synthetic blurred datasets with sharp ground truth

pub mod articulation;
pub mod blur;
pub mod error;
pub mod geom;
pub mod gradcheck;
pub mod imagebuf;
pub mod model;
pub mod render;
pub mod scene;
pub mod synthdata;
pub mod tinynet;
pub mod train;

pub use articulation::{KinematicChain, Pose};
pub use blur::{ExposureTrajectory, Interpolation};
pub use error::{Error, Result};
pub use geom::{Mat3, Quaternion, Vec3};
pub use imagebuf::ImageBuffer;
pub use model::{AvatarModel, ModelConfig};
pub use render::{Camera, RenderSettings};
pub use scene::GaussianCloud;
pub use synthdata::{Dataset, SynthConfig};
pub use train::{Checkpoint, TrainConfig};

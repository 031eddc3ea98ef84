//! Geometry, target assignment, fusion, loss and evaluation machinery for a
//! multi-view camera-only 3D detector built on an explicit voxel grid.
//!
//! The pipeline runs as: camera features are lifted into a voxel volume
//! ([`voxel`]), collapsed into bird-eye-view features by one or two voxel
//! necks and fused by a sigmoid gate ([`neck`]), decoded by an anchor head
//! ([`anchor`]) or a center head ([`center`]), and scored with
//! longitudinal-error-tolerant AP ([`metrics`]). Synthetic scenes
//! ([`scene`]) stand in for a trained backbone by rendering positional
//! encodings, which makes every stage checkable against ground truth.

pub mod anchor;
pub mod boxes;
pub mod center;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod neck;
pub mod nms;
pub mod oracle;
pub mod scene;
pub mod voxel;

pub use boxes::{Box3D, BoxDelta, ObjectClass};
pub use error::{Error, Result};
pub use geometry::{CameraRig, PinholeCamera, Projection, RigCamera, Se3, ViewLabel};
pub use voxel::{FeatureVolume, GridSpec, ImageFeature};

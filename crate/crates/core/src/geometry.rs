//! Rigid transforms, pinhole cameras and multi-camera rigs.
//!
//! Conventions: the ego frame is x-forward, y-left, z-up. Camera frames are
//! x-right, y-down, z-forward. Every camera stores `cam_from_ego`; every rig
//! stores `ego_from_world` for its frame.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this along the optical axis count as behind the camera.
pub const DEPTH_EPSILON: f64 = 1e-6;

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Default bounds for the random rescaling augmentation.
pub const DEFAULT_SCALE_RANGE: (f64, f64) = (0.95, 1.05);

/// A rigid-body transform `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Se3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Se3 {
    pub fn identity() -> Self {
        Se3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, rejecting matrices that are not proper rotations.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().all(|v| v.is_finite()) || !translation.iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidRotation("non-finite entries".into()));
        }
        let gram = rotation * rotation.transpose();
        let orth_err = (gram - Matrix3::identity()).abs().max();
        if orth_err > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation(format!(
                "R·Rᵀ deviates from identity by {orth_err:e}"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation(format!("determinant {det}")));
        }
        Ok(Se3 {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Se3 {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation by roll, pitch, yaw (applied in z-y-x order) followed by a translation.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        Se3 {
            rotation: *Rotation3::from_euler_angles(roll, pitch, yaw).matrix(),
            translation,
        }
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Se3 {
            rotation: *Rotation3::new(axis_angle).matrix(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Se3 {
        let rt = self.rotation.transpose();
        Se3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Heading of the rotated x-axis in the xy-plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// Largest absolute entry-wise difference to `other`.
    pub fn max_abs_diff(&self, other: &Se3) -> f64 {
        let r = (self.rotation - other.rotation).abs().max();
        let t = (self.translation - other.translation).abs().max();
        r.max(t)
    }
}

impl Default for Se3 {
    fn default() -> Self {
        Se3::identity()
    }
}

/// Surround-view camera positions, listed front to back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViewLabel {
    Front,
    FrontLeft,
    FrontRight,
    SideLeft,
    SideRight,
}

impl ViewLabel {
    pub const ALL: [ViewLabel; 5] = [
        ViewLabel::Front,
        ViewLabel::FrontLeft,
        ViewLabel::FrontRight,
        ViewLabel::SideLeft,
        ViewLabel::SideRight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewLabel::Front => "front",
            ViewLabel::FrontLeft => "front-left",
            ViewLabel::FrontRight => "front-right",
            ViewLabel::SideLeft => "side-left",
            ViewLabel::SideRight => "side-right",
        }
    }
}

impl fmt::Display for ViewLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ViewLabel::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidRig(format!("unknown view label `{s}`")))
    }
}

/// Result of projecting an ego-frame point into a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub visible: bool,
}

/// Pinhole camera without distortion.
///
/// `mirrored` is set by horizontal-flip augmentation: the image column then
/// runs opposite to the camera x-axis, `u = cx − fx·x/z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub mirrored: bool,
    pub cam_from_ego: Se3,
}

impl PinholeCamera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        cam_from_ego: Se3,
    ) -> Result<Self> {
        let cam = PinholeCamera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            mirrored: false,
            cam_from_ego,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// A level camera at `position` (ego frame) looking along heading `yaw`
    /// and tilted down by `pitch` radians.
    #[allow(clippy::too_many_arguments)]
    pub fn mounted(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        position: Vector3<f64>,
        yaw: f64,
        pitch: f64,
    ) -> Result<Self> {
        // columns are the camera axes (x-right, y-down, z-forward) in ego coordinates
        let (sy, cy_) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = Vector3::new(cy_ * cp, sy * cp, -sp);
        let right = Vector3::new(sy, -cy_, 0.0);
        let down = forward.cross(&right);
        let ego_from_cam_rot = Matrix3::from_columns(&[right, down, forward]);
        let ego_from_cam = Se3::new(ego_from_cam_rot, position)?;
        PinholeCamera::new(fx, fy, cx, cy, width, height, ego_from_cam.inverse())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidCamera("non-finite principal point".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera(format!(
                "image size must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Optical center in the ego frame.
    pub fn center_in_ego(&self) -> Vector3<f64> {
        self.cam_from_ego.inverse().translation
    }

    fn u_sign(&self) -> f64 {
        if self.mirrored {
            -1.0
        } else {
            1.0
        }
    }

    pub fn project(&self, p_ego: &Vector3<f64>) -> Projection {
        let p = self.cam_from_ego.transform_point(p_ego);
        let depth = p.z;
        if depth <= DEPTH_EPSILON {
            return Projection {
                u: f64::NAN,
                v: f64::NAN,
                depth,
                visible: false,
            };
        }
        let u = self.u_sign() * self.fx * p.x / depth + self.cx;
        let v = self.fy * p.y / depth + self.cy;
        let visible =
            u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64;
        Projection {
            u,
            v,
            depth,
            visible,
        }
    }

    /// Ego-frame point at `depth` along the ray through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(Error::NonPositiveDepth(depth));
        }
        let p_cam = self.unproject_to_camera(u, v, depth);
        Ok(self.cam_from_ego.inverse().transform_point(&p_cam))
    }

    /// Camera-frame point at `depth` along the ray through `(u, v)`.
    pub fn unproject_to_camera(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            self.u_sign() * (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Unit ray direction (ego frame) through pixel `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let d_cam = self.unproject_to_camera(u, v, 1.0);
        self.cam_from_ego
            .inverse()
            .transform_vector(&d_cam)
            .normalize()
    }
}

/// Image-space augmentation applied to one camera view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub scale: f64,
    /// Top-left corner of the crop in the rescaled image, pixels.
    pub crop_origin: [f64; 2],
    /// Output size `(width, height)`, pixels.
    pub crop_size: [u32; 2],
    pub hflip: bool,
}

impl Augmentation {
    pub fn identity(cam: &PinholeCamera) -> Self {
        Augmentation {
            scale: 1.0,
            crop_origin: [0.0, 0.0],
            crop_size: [cam.width, cam.height],
            hflip: false,
        }
    }

    /// Where a source pixel lands after rescale, crop and optional flip.
    pub fn map_pixel(&self, u: f64, v: f64) -> (f64, f64) {
        let us = self.scale * u - self.crop_origin[0];
        let vs = self.scale * v - self.crop_origin[1];
        if self.hflip {
            (self.crop_size[0] as f64 - 1.0 - us, vs)
        } else {
            (us, vs)
        }
    }
}

/// Updates intrinsics so that projection through the returned camera matches
/// the augmented image. Boxes must have their yaw negated by the caller when
/// `hflip` is set.
pub fn augment_camera(
    cam: &PinholeCamera,
    aug: &Augmentation,
    scale_range: (f64, f64),
) -> Result<PinholeCamera> {
    let s = aug.scale;
    if !(s >= scale_range.0 && s <= scale_range.1) {
        return Err(Error::InvalidAugmentation(format!(
            "scale {s} outside [{}, {}]",
            scale_range.0, scale_range.1
        )));
    }
    let [ox, oy] = aug.crop_origin;
    let [cw, ch] = aug.crop_size;
    let scaled_w = s * cam.width as f64;
    let scaled_h = s * cam.height as f64;
    if cw == 0 || ch == 0 || ox < 0.0 || oy < 0.0 {
        return Err(Error::InvalidAugmentation(
            "crop must have positive size and non-negative origin".into(),
        ));
    }
    const SLACK: f64 = 1e-9;
    if ox + cw as f64 > scaled_w + SLACK || oy + ch as f64 > scaled_h + SLACK {
        return Err(Error::InvalidAugmentation(format!(
            "crop {cw}x{ch} at ({ox}, {oy}) exceeds rescaled image {scaled_w}x{scaled_h}"
        )));
    }
    let mut out = *cam;
    out.fx = s * cam.fx;
    out.fy = s * cam.fy;
    out.cx = s * cam.cx - ox;
    out.cy = s * cam.cy - oy;
    out.width = cw;
    out.height = ch;
    if aug.hflip {
        out.cx = cw as f64 - 1.0 - out.cx;
        out.mirrored = !cam.mirrored;
    }
    Ok(out)
}

/// One camera in a rig.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigCamera {
    pub view: ViewLabel,
    pub camera: PinholeCamera,
}

/// All cameras of one frame plus the ego pose of that frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    cameras: Vec<RigCamera>,
    pub ego_from_world: Se3,
    pub timestamp: u64,
}

impl CameraRig {
    pub fn new(cameras: Vec<RigCamera>, ego_from_world: Se3, timestamp: u64) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::InvalidRig("a rig needs at least one camera".into()));
        }
        for (i, a) in cameras.iter().enumerate() {
            a.camera.validate()?;
            if cameras[..i].iter().any(|b| b.view == a.view) {
                return Err(Error::InvalidRig(format!("duplicate view label `{}`", a.view)));
            }
        }
        Ok(CameraRig {
            cameras,
            ego_from_world,
            timestamp,
        })
    }

    pub fn cameras(&self) -> &[RigCamera] {
        &self.cameras
    }

    pub fn camera(&self, view: ViewLabel) -> Option<&PinholeCamera> {
        self.cameras
            .iter()
            .find(|c| c.view == view)
            .map(|c| &c.camera)
    }

    /// Same cameras at another ego pose.
    pub fn with_pose(&self, ego_from_world: Se3, timestamp: u64) -> CameraRig {
        CameraRig {
            cameras: self.cameras.clone(),
            ego_from_world,
            timestamp,
        }
    }
}

/// Transform taking current-ego coordinates to previous-ego coordinates.
pub fn relative_pose(curr: &CameraRig, prev: &CameraRig) -> Se3 {
    prev.ego_from_world.compose(&curr.ego_from_world.inverse())
}

//! Yaw-rotated 3D boxes, exact rotated IoU and anchor residual coding.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Se3;

/// Collinearity tolerance for polygon clipping.
const CLIP_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cyclist => "cyclist",
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidBox(format!("unknown class `{s}`")))
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// A box rotated about the vertical axis. `dims` is `(length, width, height)`
/// with length along the heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Vector3<f64>,
    pub dims: [f64; 3],
    pub yaw: f64,
    pub class: ObjectClass,
    pub score: f64,
}

impl Box3D {
    pub fn new(center: Vector3<f64>, dims: [f64; 3], yaw: f64, class: ObjectClass) -> Result<Self> {
        if dims.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::InvalidBox(format!("dimensions must be positive, got {dims:?}")));
        }
        if !center.iter().all(|v| v.is_finite()) || !yaw.is_finite() {
            return Err(Error::InvalidBox("non-finite pose".into()));
        }
        Ok(Box3D {
            center,
            dims,
            yaw: wrap_angle(yaw),
            class,
            score: 1.0,
        })
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn with_center(mut self, center: Vector3<f64>) -> Self {
        self.center = center;
        self
    }

    pub fn volume(&self) -> f64 {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn bev_area(&self) -> f64 {
        self.dims[0] * self.dims[1]
    }

    /// Length of the BEV footprint diagonal.
    pub fn bev_diagonal(&self) -> f64 {
        self.dims[0].hypot(self.dims[1])
    }

    pub fn z_bounds(&self) -> (f64, f64) {
        let half = 0.5 * self.dims[2];
        (self.center.z - half, self.center.z + half)
    }

    /// Footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.dims[0];
        let hw = 0.5 * self.dims[1];
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(x, y)| {
            [
                self.center.x + c * x - s * y,
                self.center.y + s * x + c * y,
            ]
        })
    }

    /// Whether an ego-frame point lies inside the box (boundary included).
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let d = p - self.center;
        let (s, c) = self.yaw.sin_cos();
        let lx = c * d.x + s * d.y;
        let ly = -s * d.x + c * d.y;
        lx.abs() <= 0.5 * self.dims[0]
            && ly.abs() <= 0.5 * self.dims[1]
            && d.z.abs() <= 0.5 * self.dims[2]
    }

    /// The box under a rigid transform whose rotation is about the z-axis.
    pub fn transformed(&self, t: &Se3) -> Box3D {
        Box3D {
            center: t.transform_point(&self.center),
            yaw: wrap_angle(self.yaw + t.yaw()),
            ..*self
        }
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Area of a simple polygon given in counter-clockwise order.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let a = poly[i];
            let b = poly[(i + 1) % n];
            a[0] * b[1] - a[1] * b[0]
        })
        .sum();
    (0.5 * twice).max(0.0)
}

/// Sutherland–Hodgman clip of `subject` against the convex CCW polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let dp = cross(a, b, p);
            let dq = cross(a, b, q);
            let p_in = dp >= -CLIP_EPS;
            let q_in = dq >= -CLIP_EPS;
            if p_in {
                output.push(p);
            }
            if p_in != q_in {
                let t = dp / (dp - dq);
                output.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    output
}

/// Area of the footprint intersection.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let reach = 0.5 * (a.bev_diagonal() + b.bev_diagonal());
    let dx = a.center.x - b.center.x;
    let dy = a.center.y - b.center.y;
    if dx * dx + dy * dy > reach * reach {
        return 0.0;
    }
    let inter = clip_convex(&a.bev_corners(), &b.bev_corners());
    polygon_area(&inter).min(a.bev_area()).min(b.bev_area())
}

/// Exact IoU of the two rotated footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.bev_area() + b.bev_area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Exact 3D IoU for boxes rotated about z.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a0, a1) = a.z_bounds();
    let (b0, b1) = b.z_bounds();
    let dz = a1.min(b1) - a0.max(b0);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// 3D IoU with the prediction moved to its longitudinally corrected center.
pub fn iou3d_let(pred: &Box3D, gt: &Box3D, corrected_center: &Vector3<f64>) -> f64 {
    iou3d(&pred.with_center(*corrected_center), gt)
}

/// Euclidean distance between BEV centers.
pub fn center_distance_bev(a: &Box3D, b: &Box3D) -> f64 {
    (a.center.x - b.center.x).hypot(a.center.y - b.center.y)
}

/// Regression residual of a box relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dl: f64,
    pub dw: f64,
    pub dh: f64,
    pub dyaw: f64,
}

impl BoxDelta {
    pub fn to_array(&self) -> [f64; 7] {
        [self.dx, self.dy, self.dz, self.dl, self.dw, self.dh, self.dyaw]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        BoxDelta {
            dx: a[0],
            dy: a[1],
            dz: a[2],
            dl: a[3],
            dw: a[4],
            dh: a[5],
            dyaw: a[6],
        }
    }
}

/// Encodes `gt` against `anchor`: planar offsets over the anchor's BEV
/// diagonal, vertical offset over its height, log size ratios, wrapped yaw.
pub fn encode_anchor(gt: &Box3D, anchor: &Box3D) -> BoxDelta {
    let diag = anchor.bev_diagonal();
    BoxDelta {
        dx: (gt.center.x - anchor.center.x) / diag,
        dy: (gt.center.y - anchor.center.y) / diag,
        dz: (gt.center.z - anchor.center.z) / anchor.dims[2],
        dl: (gt.dims[0] / anchor.dims[0]).ln(),
        dw: (gt.dims[1] / anchor.dims[1]).ln(),
        dh: (gt.dims[2] / anchor.dims[2]).ln(),
        dyaw: wrap_angle(gt.yaw - anchor.yaw),
    }
}

/// Inverse of [`encode_anchor`]; the result inherits the anchor's class.
pub fn decode_anchor(delta: &BoxDelta, anchor: &Box3D) -> Box3D {
    let diag = anchor.bev_diagonal();
    Box3D {
        center: Vector3::new(
            anchor.center.x + delta.dx * diag,
            anchor.center.y + delta.dy * diag,
            anchor.center.z + delta.dz * anchor.dims[2],
        ),
        dims: [
            anchor.dims[0] * delta.dl.exp(),
            anchor.dims[1] * delta.dw.exp(),
            anchor.dims[2] * delta.dh.exp(),
        ],
        yaw: wrap_angle(anchor.yaw + delta.dyaw),
        class: anchor.class,
        score: anchor.score,
    }
}

//! Seeded synthetic multi-camera scenes.
//!
//! Static boxes stand on a ground plane around an ego vehicle that drives
//! along its x-axis. Each camera's feature map is rendered by casting one
//! ray per lattice node; channels 0..2 hold the ego-frame position of the
//! first surface hit and channel 3 is a hit flag. Lifting such maps should
//! reproduce voxel coordinates on visible surfaces, which gives an exact
//! geometric oracle for the rest of the pipeline.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::{bev_intersection_area, Box3D, ObjectClass};
use crate::center::{render_targets, CenterConfig, Heatmap, RegressionMap};
use crate::error::{Error, Result};
use crate::geometry::{CameraRig, PinholeCamera, RigCamera, Se3, ViewLabel};
use crate::voxel::{GridSpec, ImageFeature};

/// Channels of a rendered feature map: x, y, z, hit flag.
pub const FEATURE_CHANNELS: usize = 4;

/// Nominal `(l, w, h)` per class; sampled sizes vary by ±10 %.
pub const NOMINAL_DIMS: [[f64; 3]; 3] = [[4.5, 1.9, 1.6], [0.9, 0.8, 1.75], [1.8, 0.7, 1.7]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassCounts {
    pub car: usize,
    pub pedestrian: usize,
    pub cyclist: usize,
}

impl ClassCounts {
    pub fn get(&self, class: ObjectClass) -> usize {
        match class {
            ObjectClass::Car => self.car,
            ObjectClass::Pedestrian => self.pedestrian,
            ObjectClass::Cyclist => self.cyclist,
        }
    }

    pub fn total(&self) -> usize {
        self.car + self.pedestrian + self.cyclist
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub counts: ClassCounts,
    pub frames: usize,
    /// Forward ego motion per frame, meters.
    pub ego_step: f64,
    /// Objects are placed at ground range in `[range_min, range_max]` ...
    pub range_min: f64,
    pub range_max: f64,
    /// ... and bearing within `±bearing_max_deg` of the ego heading.
    pub bearing_max_deg: f64,
    /// Minimum BEV distance between object centers.
    pub min_separation: f64,
    pub ground_z: f64,
    pub camera_z: f64,
    pub feature_cols: usize,
    pub feature_rows: usize,
    pub stride: f64,
    pub hfov_deg: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            counts: ClassCounts {
                car: 6,
                pedestrian: 4,
                cyclist: 4,
            },
            frames: 1,
            ego_step: 0.5,
            range_min: 7.0,
            range_max: 40.0,
            bearing_max_deg: 110.0,
            min_separation: 5.0,
            ground_z: -1.0,
            camera_z: 1.0,
            feature_cols: 128,
            feature_rows: 80,
            stride: 4.0,
            hfov_deg: 60.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("scene spec: {m}")));
        if self.frames == 0 {
            return bad("at least one frame is required");
        }
        if !(self.range_min > 0.0 && self.range_max > self.range_min) {
            return bad("placement range must satisfy 0 < range_min < range_max");
        }
        if !(self.bearing_max_deg > 0.0 && self.bearing_max_deg <= 180.0) {
            return bad("bearing_max_deg must lie in (0, 180]");
        }
        if !(self.min_separation >= 0.0) || !self.ego_step.is_finite() {
            return bad("min_separation must be non-negative and ego_step finite");
        }
        if !(self.camera_z > self.ground_z) {
            return bad("cameras must sit above the ground plane");
        }
        if self.feature_cols < 2 || self.feature_rows < 2 || !(self.stride >= 1.0) {
            return bad("feature maps need at least 2x2 nodes and stride >= 1");
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return bad("hfov_deg must lie in (0, 180)");
        }
        // keep every object (plus a margin for its extent) inside the default grid
        let grid = GridSpec::default();
        let travel = self.ego_step.abs() * (self.frames - 1) as f64;
        let bm = self.bearing_max_deg.to_radians();
        let margin = 3.0;
        let x_low = (self.range_min * bm.cos()).min(self.range_max * bm.cos()) - travel - margin;
        let x_high = self.range_max + travel + margin;
        let y_abs = self.range_max * if bm >= PI / 2.0 { 1.0 } else { bm.sin() } + margin;
        let (x0, x1) = grid.range(0);
        let (y0, y1) = grid.range(1);
        if x_low < x0 || x_high > x1 || -y_abs < y0 || y_abs > y1 {
            return bad("placement range leaves the detection range");
        }
        Ok(())
    }

    pub fn image_size(&self) -> (u32, u32) {
        (
            (self.feature_cols as f64 * self.stride).round() as u32,
            (self.feature_rows as f64 * self.stride).round() as u32,
        )
    }
}

/// Five surround cameras; views differ in heading and mounting offset.
pub fn surround_rig(spec: &SceneSpec) -> Result<CameraRig> {
    let (w, h) = spec.image_size();
    let f = 0.5 * w as f64 / (0.5 * spec.hfov_deg.to_radians()).tan();
    let cameras = ViewLabel::ALL
        .iter()
        .map(|&view| {
            let yaw = view_heading(view);
            let pos = Vector3::new(1.0 + yaw.cos(), 0.8 * yaw.sin(), spec.camera_z);
            let camera = PinholeCamera::mounted(f, f, 0.5 * w as f64, 0.5 * h as f64, w, h, pos, yaw, 0.0)?;
            Ok(RigCamera { view, camera })
        })
        .collect::<Result<Vec<_>>>()?;
    CameraRig::new(cameras, Se3::identity(), 0)
}

/// Heading of each view, radians counter-clockwise from the ego x-axis.
pub fn view_heading(view: ViewLabel) -> f64 {
    match view {
        ViewLabel::Front => 0.0,
        ViewLabel::FrontLeft => PI / 4.0,
        ViewLabel::FrontRight => -PI / 4.0,
        ViewLabel::SideLeft => PI / 2.0,
        ViewLabel::SideRight => -PI / 2.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Ground,
    /// Face `axis * 2 + side` of box `index`, in box-local axes, with side 1
    /// for the positive face.
    BoxFace { index: usize, face: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub surface: Surface,
}

const RAY_EPS: f64 = 1e-9;

/// Slab test of a ray against an upright box. Rays starting inside the box
/// do not hit it.
pub fn ray_box(origin: &Vector3<f64>, dir: &Vector3<f64>, b: &Box3D) -> Option<(f64, usize)> {
    let (s, c) = b.yaw.sin_cos();
    let d = origin - b.center;
    let o = [c * d.x + s * d.y, -s * d.x + c * d.y, d.z];
    let r = [c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z];
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut face = 0;
    for axis in 0..3 {
        let half = 0.5 * b.dims[axis];
        if r[axis].abs() < 1e-15 {
            if o[axis].abs() > half {
                return None;
            }
            continue;
        }
        let t1 = (-half - o[axis]) / r[axis];
        let t2 = (half - o[axis]) / r[axis];
        let (lo, hi, side) = if t1 < t2 { (t1, t2, 0) } else { (t2, t1, 1) };
        if lo > t_near {
            t_near = lo;
            face = axis * 2 + side;
        }
        t_far = t_far.min(hi);
    }
    (t_near <= t_far && t_near > RAY_EPS).then_some((t_near, face))
}

/// First surface hit by the ray `origin + t·dir`, `t > 0`.
pub fn cast_ray(origin: &Vector3<f64>, dir: &Vector3<f64>, boxes: &[Box3D], ground_z: f64) -> Option<Hit> {
    let mut best: Option<(f64, Surface)> = None;
    if dir.z < -1e-15 {
        let t = (ground_z - origin.z) / dir.z;
        if t > RAY_EPS {
            best = Some((t, Surface::Ground));
        }
    }
    for (index, b) in boxes.iter().enumerate() {
        if let Some((t, face)) = ray_box(origin, dir, b) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, Surface::BoxFace { index, face }));
            }
        }
    }
    best.map(|(t, surface)| Hit {
        t,
        point: origin + t * dir,
        surface,
    })
}

/// Pixel of lattice node `(row, col)`.
pub fn node_pixel(row: usize, col: usize, stride: f64) -> (f64, f64) {
    ((col as f64 + 0.5) * stride, (row as f64 + 0.5) * stride)
}

/// Renders one camera's positional-encoding feature map.
pub fn render_view(
    view: ViewLabel,
    camera: &PinholeCamera,
    boxes: &[Box3D],
    ground_z: f64,
    rows: usize,
    cols: usize,
    stride: f64,
) -> Result<ImageFeature> {
    let origin = camera.center_in_ego();
    let data: Vec<f64> = (0..rows * cols)
        .into_par_iter()
        .flat_map_iter(|n| {
            let (u, v) = node_pixel(n / cols, n % cols, stride);
            let dir = camera.ray_direction(u, v);
            match cast_ray(&origin, &dir, boxes, ground_z) {
                Some(h) => [h.point.x, h.point.y, h.point.z, 1.0],
                None => [0.0; FEATURE_CHANNELS],
            }
        })
        .collect();
    ImageFeature::new(view, rows, cols, FEATURE_CHANNELS, stride, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub index: usize,
    pub rig: CameraRig,
    pub features: Vec<ImageFeature>,
    /// Ground truth in this frame's ego coordinates.
    pub gts: Vec<Box3D>,
    pub ground_z: f64,
}

impl RenderedFrame {
    /// Ray-cast from a camera of this frame.
    pub fn cast(&self, view: ViewLabel, u: f64, v: f64) -> Option<Hit> {
        let cam = self.rig.camera(view)?;
        cast_ray(&cam.center_in_ego(), &cam.ray_direction(u, v), &self.gts, self.ground_z)
    }
}

/// Samples non-overlapping world-frame boxes (frame 0 ego coordinates).
pub fn sample_objects(spec: &SceneSpec) -> Result<Vec<Box3D>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.counts.total();
    let budget = 10 * total;
    let mut attempts = 0usize;
    let mut boxes: Vec<Box3D> = Vec::with_capacity(total);
    let bearing_max = spec.bearing_max_deg.to_radians();
    for class in ObjectClass::ALL {
        let nominal = NOMINAL_DIMS[class.index()];
        let mut placed = 0;
        while placed < spec.counts.get(class) {
            if attempts >= budget {
                return Err(Error::SceneRejected(format!(
                    "placed {} of {total} objects within {budget} attempts; \
                     lower the counts or min_separation, or widen the placement range",
                    boxes.len()
                )));
            }
            attempts += 1;
            let range = rng.gen_range(spec.range_min..=spec.range_max);
            let bearing = rng.gen_range(-bearing_max..=bearing_max);
            let dims = nominal.map(|d| d * rng.gen_range(0.9..=1.1));
            let yaw = rng.gen_range(-PI..PI);
            let center = Vector3::new(
                range * bearing.cos(),
                range * bearing.sin(),
                spec.ground_z + 0.5 * dims[2],
            );
            let candidate = Box3D::new(center, dims, yaw, class)?;
            let clear = boxes.iter().all(|b| {
                (b.center.xy() - center.xy()).norm() >= spec.min_separation
                    && bev_intersection_area(b, &candidate) == 0.0
            });
            if clear {
                boxes.push(candidate);
                placed += 1;
            }
        }
    }
    Ok(boxes)
}

/// Ego pose of frame `f`: the vehicle has moved `f·ego_step` along world x.
pub fn ego_pose(spec: &SceneSpec, frame: usize) -> Se3 {
    Se3::from_translation(Vector3::new(-(frame as f64) * spec.ego_step, 0.0, 0.0))
}

/// Generates and renders every frame of the scene.
pub fn generate_scene(spec: &SceneSpec) -> Result<Vec<RenderedFrame>> {
    let world = sample_objects(spec)?;
    let template = surround_rig(spec)?;
    (0..spec.frames)
        .map(|f| {
            let pose = ego_pose(spec, f);
            let rig = template.with_pose(pose, f as u64);
            let gts: Vec<Box3D> = world.iter().map(|b| b.transformed(&pose)).collect();
            let features = rig
                .cameras()
                .iter()
                .map(|rc| {
                    render_view(
                        rc.view,
                        &rc.camera,
                        &gts,
                        spec.ground_z,
                        spec.feature_rows,
                        spec.feature_cols,
                        spec.stride,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RenderedFrame {
                index: f,
                rig,
                features,
                gts,
                ground_z: spec.ground_z,
            })
        })
        .collect()
}

/// Ideal center-head outputs: the rendered training targets of each frame.
pub fn perfect_head_maps(
    frames: &[RenderedFrame],
    grid: &GridSpec,
    cfg: &CenterConfig,
) -> Vec<(Heatmap, RegressionMap)> {
    frames
        .iter()
        .map(|f| {
            let t = render_targets(&f.gts, grid, cfg);
            let reg = t.regression_map();
            (t.heatmap, reg)
        })
        .collect()
}

//! Voxel grid definition and lifting of image features into it.
//!
//! Each voxel center is projected into every camera; visible projections are
//! bilinearly sampled from the camera's feature map and the samples are
//! averaged. Multi-frame volumes concatenate per-frame lifts along the
//! channel axis, `[current | previous]`.

use std::io::{Read, Write};

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraRig, Se3, ViewLabel};

/// Default detection range and voxel size.
pub const DEFAULT_RANGE_X: (f64, f64) = (-35.0, 75.0);
pub const DEFAULT_RANGE_Y: (f64, f64) = (-75.0, 75.0);
pub const DEFAULT_RANGE_Z: (f64, f64) = (-2.0, 4.0);
pub const DEFAULT_VOXEL_SIZE: [f64; 3] = [0.5, 0.5, 0.5];

/// How many past frames are eligible as the stereo partner.
pub const MAX_LOOKBACK: usize = 10;

/// Axis-aligned voxel grid in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpecDef", into = "GridSpecDef")]
pub struct GridSpec {
    ranges: [(f64, f64); 3],
    voxel_size: [f64; 3],
    dims: [usize; 3],
}

#[derive(Serialize, Deserialize)]
struct GridSpecDef {
    range_x: (f64, f64),
    range_y: (f64, f64),
    range_z: (f64, f64),
    voxel_size: [f64; 3],
}

impl TryFrom<GridSpecDef> for GridSpec {
    type Error = Error;
    fn try_from(d: GridSpecDef) -> Result<Self> {
        GridSpec::new(d.range_x, d.range_y, d.range_z, d.voxel_size)
    }
}

impl From<GridSpec> for GridSpecDef {
    fn from(g: GridSpec) -> Self {
        GridSpecDef {
            range_x: g.ranges[0],
            range_y: g.ranges[1],
            range_z: g.ranges[2],
            voxel_size: g.voxel_size,
        }
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::new(
            DEFAULT_RANGE_X,
            DEFAULT_RANGE_Y,
            DEFAULT_RANGE_Z,
            DEFAULT_VOXEL_SIZE,
        )
        .expect("default grid is valid")
    }
}

impl GridSpec {
    pub fn new(
        range_x: (f64, f64),
        range_y: (f64, f64),
        range_z: (f64, f64),
        voxel_size: [f64; 3],
    ) -> Result<Self> {
        let ranges = [range_x, range_y, range_z];
        let mut dims = [0usize; 3];
        for axis in 0..3 {
            let (lo, hi) = ranges[axis];
            let size = voxel_size[axis];
            if !(size > 0.0) || !size.is_finite() {
                return Err(Error::InvalidGrid(format!(
                    "voxel size on axis {axis} must be positive, got {size}"
                )));
            }
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidGrid(format!(
                    "empty range [{lo}, {hi}] on axis {axis}"
                )));
            }
            let n = ((hi - lo) / size).round();
            if n < 1.0 {
                return Err(Error::InvalidGrid(format!(
                    "range [{lo}, {hi}] holds no voxel of size {size}"
                )));
            }
            dims[axis] = n as usize;
        }
        Ok(GridSpec {
            ranges,
            voxel_size,
            dims,
        })
    }

    pub fn range(&self, axis: usize) -> (f64, f64) {
        self.ranges[axis]
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    /// `[N_x, N_y, N_z]`.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Row-major index with x outermost and z innermost.
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn unravel(&self, index: usize) -> [usize; 3] {
        let k = index % self.dims[2];
        let ij = index / self.dims[2];
        [ij / self.dims[1], ij % self.dims[1], k]
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(
            self.ranges[0].0 + (i as f64 + 0.5) * self.voxel_size[0],
            self.ranges[1].0 + (j as f64 + 0.5) * self.voxel_size[1],
            self.ranges[2].0 + (k as f64 + 0.5) * self.voxel_size[2],
        )
    }

    /// BEV cell center of column `(i, j)`.
    pub fn bev_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.ranges[0].0 + (i as f64 + 0.5) * self.voxel_size[0],
            self.ranges[1].0 + (j as f64 + 0.5) * self.voxel_size[1],
        )
    }

    /// BEV cell containing `(x, y)`, if inside the grid.
    pub fn bev_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = ((x - self.ranges[0].0) / self.voxel_size[0]).floor();
        let fj = ((y - self.ranges[1].0) / self.voxel_size[1]).floor();
        if fi < 0.0 || fj < 0.0 || fi >= self.dims[0] as f64 || fj >= self.dims[1] as f64 {
            return None;
        }
        Some((fi as usize, fj as usize))
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.ranges[a].0 && p[a] <= self.ranges[a].1)
    }
}

/// All voxel centers in [`GridSpec::linear_index`] order.
pub fn voxel_centers(grid: &GridSpec) -> Vec<Vector3<f64>> {
    (0..grid.num_voxels())
        .map(|idx| {
            let [i, j, k] = grid.unravel(idx);
            grid.center(i, j, k)
        })
        .collect()
}

/// A per-camera feature map with `(rows, cols, channels)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeature {
    pub view: ViewLabel,
    rows: usize,
    cols: usize,
    channels: usize,
    stride: f64,
    data: Vec<f64>,
}

impl ImageFeature {
    pub fn new(
        view: ViewLabel,
        rows: usize,
        cols: usize,
        channels: usize,
        stride: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature map must be non-empty, got {rows}x{cols}x{channels}"
            )));
        }
        if data.len() != rows * cols * channels {
            return Err(Error::ShapeMismatch(format!(
                "feature data has {} values, expected {rows}x{cols}x{channels}",
                data.len()
            )));
        }
        if !(stride >= 1.0) {
            return Err(Error::ShapeMismatch(format!("stride must be ≥ 1, got {stride}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("feature map has non-finite values".into()));
        }
        Ok(ImageFeature {
            view,
            rows,
            cols,
            channels,
            stride,
            data,
        })
    }

    pub fn from_fn(
        view: ViewLabel,
        rows: usize,
        cols: usize,
        channels: usize,
        stride: f64,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols * channels);
        for r in 0..rows {
            for c in 0..cols {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        ImageFeature::new(view, rows, cols, channels, stride, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> f64 {
        self.stride
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.cols + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn scaled(&self, alpha: f64) -> ImageFeature {
        ImageFeature {
            data: self.data.iter().map(|v| v * alpha).collect(),
            ..self.clone()
        }
    }

    /// Lattice coordinates of a pixel: node `(r, c)` sits at pixel
    /// `((c + 0.5)·stride, (r + 0.5)·stride)`.
    pub fn lattice_coords(&self, u: f64, v: f64) -> (f64, f64) {
        (u / self.stride - 0.5, v / self.stride - 0.5)
    }

    /// Bilinear sample at pixel `(u, v)` written into `out`. Returns false
    /// (leaving `out` untouched) when the point is outside the lattice.
    pub fn sample_into(&self, u: f64, v: f64, out: &mut [f64]) -> bool {
        let (x, y) = self.lattice_coords(u, v);
        let max_x = (self.cols - 1) as f64;
        let max_y = (self.rows - 1) as f64;
        if !(x >= 0.0 && x <= max_x && y >= 0.0 && y <= max_y) {
            return false;
        }
        let (c0, tx) = split_axis(x, self.cols);
        let (r0, ty) = split_axis(y, self.rows);
        let c1 = (c0 + 1).min(self.cols - 1);
        let r1 = (r0 + 1).min(self.rows - 1);
        let w00 = (1.0 - tx) * (1.0 - ty);
        let w01 = tx * (1.0 - ty);
        let w10 = (1.0 - tx) * ty;
        let w11 = tx * ty;
        let (a, b, c, d) = (
            self.at(r0, c0),
            self.at(r0, c1),
            self.at(r1, c0),
            self.at(r1, c1),
        );
        for ch in 0..self.channels {
            out[ch] = w00 * a[ch] + w01 * b[ch] + w10 * c[ch] + w11 * d[ch];
        }
        true
    }

    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<Vec<f64>> {
        let mut out = vec![0.0; self.channels];
        self.sample_into(u, v, &mut out).then_some(out)
    }
}

/// Splits a lattice coordinate into a base index and fractional weight so
/// that the upper edge node is reached with weight 1 on the last cell.
fn split_axis(x: f64, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let base = (x.floor() as usize).min(n - 2);
    (base, x - base as f64)
}

/// Lifted features on a voxel grid, `(N_x, N_y, N_z, C)` with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    grid: GridSpec,
    channels: usize,
    frame_count: usize,
    data: Vec<f64>,
    valid: Vec<bool>,
}

impl FeatureVolume {
    pub fn zeros(grid: GridSpec, channels: usize, frame_count: usize) -> Self {
        FeatureVolume {
            grid,
            channels,
            frame_count,
            data: vec![0.0; grid.num_voxels() * channels],
            valid: vec![false; grid.num_voxels()],
        }
    }

    pub fn from_parts(
        grid: GridSpec,
        channels: usize,
        frame_count: usize,
        data: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let n = grid.num_voxels();
        if data.len() != n * channels || valid.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "volume buffers ({}, {}) do not match grid {:?} with {channels} channels",
                data.len(),
                valid.len(),
                grid.dims()
            )));
        }
        if frame_count == 0 || channels % frame_count != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{channels} channels cannot be split over {frame_count} frames"
            )));
        }
        Ok(FeatureVolume {
            grid,
            channels,
            frame_count,
            data,
            valid,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn channels_per_frame(&self) -> usize {
        self.channels / self.frame_count
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, i: usize, j: usize, k: usize) -> bool {
        self.valid[self.grid.linear_index(i, j, k)]
    }

    pub fn features(&self, i: usize, j: usize, k: usize) -> &[f64] {
        self.features_at(self.grid.linear_index(i, j, k))
    }

    pub fn features_at(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    /// Channels of one frame in a concatenated volume.
    pub fn frame_features_at(&self, index: usize, frame: usize) -> &[f64] {
        let per = self.channels_per_frame();
        &self.features_at(index)[frame * per..(frame + 1) * per]
    }

    /// Element-wise `alpha·self + beta·other`; validity is the union.
    pub fn linear_combination(&self, alpha: f64, other: &FeatureVolume, beta: f64) -> Result<Self> {
        if self.grid != other.grid || self.channels != other.channels {
            return Err(Error::ShapeMismatch("volumes differ in grid or channels".into()));
        }
        Ok(FeatureVolume {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| alpha * a + beta * b)
                .collect(),
            valid: self
                .valid
                .iter()
                .zip(&other.valid)
                .map(|(a, b)| *a || *b)
                .collect(),
            ..self.clone()
        })
    }

    /// Writes the volume as a little-endian binary dump: the magic
    /// `MVDETVOL`, five `u32` (N_x, N_y, N_z, channels, frames), nine `f64`
    /// (x/y/z ranges, voxel size), `f32` features, then one byte per voxel
    /// for the validity mask.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(VOLUME_MAGIC)?;
        let [nx, ny, nz] = self.grid.dims();
        for v in [nx, ny, nz, self.channels, self.frame_count] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for axis in 0..3 {
            let (lo, hi) = self.grid.range(axis);
            w.write_all(&lo.to_le_bytes())?;
            w.write_all(&hi.to_le_bytes())?;
        }
        for s in self.grid.voxel_size() {
            w.write_all(&s.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        let mask: Vec<u8> = self.valid.iter().map(|&b| b as u8).collect();
        w.write_all(&mask)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != VOLUME_MAGIC {
            return Err(Error::Io("not a volume dump".into()));
        }
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let mut floats = [0f64; 9];
        for f in floats.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *f = f64::from_le_bytes(b);
        }
        let grid = GridSpec::new(
            (floats[0], floats[1]),
            (floats[2], floats[3]),
            (floats[4], floats[5]),
            [floats[6], floats[7], floats[8]],
        )?;
        if grid.dims() != [dims[0], dims[1], dims[2]] {
            return Err(Error::Io("volume header dims disagree with its grid".into()));
        }
        let n = grid.num_voxels();
        let mut raw = vec![0u8; n * dims[3] * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut mask = vec![0u8; n];
        r.read_exact(&mut mask)?;
        FeatureVolume::from_parts(
            grid,
            dims[3],
            dims[4],
            data,
            mask.into_iter().map(|b| b != 0).collect(),
        )
    }
}

const VOLUME_MAGIC: &[u8; 8] = b"MVDETVOL";

/// Features and cameras of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub rig: CameraRig,
    pub features: Vec<ImageFeature>,
}

/// Pairs each rig camera with its feature map, in canonical view order.
fn pair_views<'a>(
    features: &'a [ImageFeature],
    rig: &'a CameraRig,
) -> Result<(Vec<(&'a crate::geometry::PinholeCamera, &'a ImageFeature)>, usize)> {
    if features.len() != rig.cameras().len() {
        return Err(Error::FeatureMismatch(format!(
            "{} feature maps for {} cameras",
            features.len(),
            rig.cameras().len()
        )));
    }
    let channels = features[0].channels();
    let mut pairs = Vec::with_capacity(features.len());
    for rc in rig.cameras() {
        let feat = features
            .iter()
            .find(|f| f.view == rc.view)
            .ok_or_else(|| Error::FeatureMismatch(format!("no feature map for view `{}`", rc.view)))?;
        if feat.channels() != channels {
            return Err(Error::FeatureMismatch(
                "feature maps disagree on channel count".into(),
            ));
        }
        pairs.push((rc.view, &rc.camera, feat));
    }
    // fixed summation order makes the mean independent of input ordering
    pairs.sort_by_key(|(view, _, _)| *view);
    Ok((pairs.into_iter().map(|(_, c, f)| (c, f)).collect(), channels))
}

/// Lifts multi-view features into the grid, averaging over every camera
/// that sees a voxel. `ego_transform` maps grid (current-ego) coordinates
/// into the rig's ego frame before projection.
pub fn lift_with_transform(
    features: &[ImageFeature],
    rig: &CameraRig,
    grid: &GridSpec,
    ego_transform: Option<&Se3>,
) -> Result<FeatureVolume> {
    let (pairs, channels) = pair_views(features, rig)?;
    let mut vol = FeatureVolume::zeros(*grid, channels, 1);
    vol.data
        .par_chunks_mut(channels)
        .zip(vol.valid.par_iter_mut())
        .enumerate()
        .for_each_init(
            || vec![0.0; channels],
            |sample, (idx, (out, valid))| {
                let [i, j, k] = grid.unravel(idx);
                let mut p = grid.center(i, j, k);
                if let Some(t) = ego_transform {
                    p = t.transform_point(&p);
                }
                let mut count = 0usize;
                for (cam, feat) in &pairs {
                    let proj = cam.project(&p);
                    if proj.visible && feat.sample_into(proj.u, proj.v, sample) {
                        for (o, s) in out.iter_mut().zip(sample.iter()) {
                            *o += s;
                        }
                        count += 1;
                    }
                }
                if count > 0 {
                    let inv = count as f64;
                    out.iter_mut().for_each(|o| *o /= inv);
                    *valid = true;
                }
            },
        );
    Ok(vol)
}

/// Monocular lift: `F_V(x) = mean over views of F_I(π(x))`.
pub fn lift(features: &[ImageFeature], rig: &CameraRig, grid: &GridSpec) -> Result<FeatureVolume> {
    lift_with_transform(features, rig, grid, None)
}

/// Concatenates same-grid volumes along channels; validity is the union.
pub fn concat_frames(volumes: &[FeatureVolume]) -> Result<FeatureVolume> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no volumes to concatenate".into()))?;
    if volumes.iter().any(|v| v.grid != first.grid) {
        return Err(Error::ShapeMismatch("volumes live on different grids".into()));
    }
    let channels: usize = volumes.iter().map(|v| v.channels).sum();
    let frames: usize = volumes.iter().map(|v| v.frame_count).sum();
    if volumes.iter().any(|v| v.channels_per_frame() != first.channels_per_frame()) {
        return Err(Error::ShapeMismatch("frames disagree on channel count".into()));
    }
    let n = first.grid.num_voxels();
    let mut data = Vec::with_capacity(n * channels);
    let mut valid = Vec::with_capacity(n);
    for idx in 0..n {
        for v in volumes {
            data.extend_from_slice(v.features_at(idx));
        }
        valid.push(volumes.iter().any(|v| v.valid[idx]));
    }
    FeatureVolume::from_parts(first.grid, channels, frames, data, valid)
}

/// Two-frame stereo volume `[current | previous]`. `rel` maps current-ego
/// coordinates to previous-ego coordinates (see [`crate::geometry::relative_pose`]).
pub fn lift_temporal(
    curr: &FrameInput,
    prev: &FrameInput,
    rel: &Se3,
    grid: &GridSpec,
) -> Result<FeatureVolume> {
    let curr_vol = lift(&curr.features, &curr.rig, grid)?;
    let prev_vol = lift_with_transform(&prev.features, &prev.rig, grid, Some(rel))?;
    concat_frames(&[curr_vol, prev_vol])
}

/// Frame-sampling policy for the stereo partner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameSampling {
    /// Uniform choice among the last ten frames.
    Train { seed: u64 },
    /// The oldest of the last ten frames.
    Infer,
}

/// Picks the previous frame to pair with the current one. `history` holds
/// earlier frame indices in ascending order; `None` means the caller should
/// reuse the current frame.
pub fn select_previous_frame(history: &[u64], mode: FrameSampling) -> Option<u64> {
    if history.is_empty() {
        return None;
    }
    let window = &history[history.len().saturating_sub(MAX_LOOKBACK)..];
    match mode {
        FrameSampling::Infer => window.first().copied(),
        FrameSampling::Train { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Some(window[rng.gen_range(0..window.len())])
        }
    }
}

//! Anchor-free center head: gaussian heatmap targets, 3×3 peak extraction,
//! box decoding and circle NMS.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{Box3D, ObjectClass};
use crate::error::{Error, Result};
use crate::neck::{sigmoid, BevFeature};
use crate::nms::circle_nms;
use crate::voxel::GridSpec;

/// Regression channels per cell: `[off_x, off_y, z, ln l, ln w, ln h, sin yaw, cos yaw]`.
pub const REGRESSION_CHANNELS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CenterConfig {
    /// Minimum overlap used to size the gaussian splat.
    pub min_overlap: f64,
    /// Peaks kept per frame.
    pub max_peaks: usize,
    pub circle_nms: bool,
    /// Circle NMS radius per class, meters, in [`ObjectClass::ALL`] order.
    pub circle_radius: [f64; 3],
}

impl Default for CenterConfig {
    fn default() -> Self {
        CenterConfig {
            min_overlap: 0.1,
            max_peaks: 500,
            circle_nms: true,
            circle_radius: [4.0, 0.85, 1.75],
        }
    }
}

/// Class heatmaps on the BEV grid, `(N_x, N_y, classes)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    nx: usize,
    ny: usize,
    data: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        Heatmap {
            nx,
            ny,
            data: vec![0.0; nx * ny * ObjectClass::COUNT],
        }
    }

    pub fn from_data(nx: usize, ny: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nx * ny * ObjectClass::COUNT {
            return Err(Error::ShapeMismatch(format!(
                "heatmap buffer of {} values does not match {nx}x{ny}x{}",
                data.len(),
                ObjectClass::COUNT
            )));
        }
        Ok(Heatmap { nx, ny, data })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn index(&self, i: usize, j: usize, class: usize) -> usize {
        (i * self.ny + j) * ObjectClass::COUNT + class
    }

    pub fn get(&self, i: usize, j: usize, class: usize) -> f64 {
        self.data[self.index(i, j, class)]
    }

    pub fn set(&mut self, i: usize, j: usize, class: usize, v: f64) {
        let idx = self.index(i, j, class);
        self.data[idx] = v;
    }
}

/// Dense regression map `(N_x, N_y, 8)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionMap {
    nx: usize,
    ny: usize,
    data: Vec<f64>,
}

impl RegressionMap {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        RegressionMap {
            nx,
            ny,
            data: vec![0.0; nx * ny * REGRESSION_CHANNELS],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let s = (i * self.ny + j) * REGRESSION_CHANNELS;
        &self.data[s..s + REGRESSION_CHANNELS]
    }

    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let s = (i * self.ny + j) * REGRESSION_CHANNELS;
        &mut self.data[s..s + REGRESSION_CHANNELS]
    }
}

/// Regression target of one object at its center cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterObject {
    pub cell: (usize, usize),
    pub class: ObjectClass,
    pub gt_index: usize,
    pub values: [f64; REGRESSION_CHANNELS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterTargets {
    pub heatmap: Heatmap,
    pub objects: Vec<CenterObject>,
}

impl CenterTargets {
    /// Dense map holding each object's targets at its center cell.
    pub fn regression_map(&self) -> RegressionMap {
        let (nx, ny) = self.heatmap.dims();
        let mut map = RegressionMap::zeros(nx, ny);
        for o in &self.objects {
            map.cell_mut(o.cell.0, o.cell.1).copy_from_slice(&o.values);
        }
        map
    }
}

/// Largest radius (in cells) keeping IoU ≥ `min_overlap` for a box of
/// `height × width` cells whose corners shift within that radius.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let o = min_overlap;
    let b1 = height + width;
    let c1 = width * height * (1.0 - o) / (1.0 + o);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;

    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - o) * width * height;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;

    let a3 = 4.0 * o;
    let b3 = -2.0 * o * (height + width);
    let c3 = (o - 1.0) * width * height;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Integer splat radius, at least one cell.
pub fn splat_radius(gt: &Box3D, grid: &GridSpec, min_overlap: f64) -> usize {
    let vs = grid.voxel_size();
    let r = gaussian_radius(gt.dims[0] / vs[0], gt.dims[1] / vs[1], min_overlap);
    (r.floor() as usize).max(1)
}

/// Value of the splat at integer cell offset `(di, dj)`; 1 at the center.
pub fn gaussian_value(radius: usize, di: i64, dj: i64) -> f64 {
    let sigma = radius as f64 / 3.0;
    let d2 = (di * di + dj * dj) as f64;
    (-d2 / (2.0 * sigma * sigma)).exp()
}

pub fn render_targets(gts: &[Box3D], grid: &GridSpec, cfg: &CenterConfig) -> CenterTargets {
    let [nx, ny, _] = grid.dims();
    let vs = grid.voxel_size();
    let mut heatmap = Heatmap::zeros(nx, ny);
    let mut objects = Vec::new();
    for (g, gt) in gts.iter().enumerate() {
        let Some((ci, cj)) = grid.bev_cell(gt.center.x, gt.center.y) else {
            continue;
        };
        let class = gt.class.index();
        let radius = splat_radius(gt, grid, cfg.min_overlap);
        let r = radius as i64;
        for di in -r..=r {
            for dj in -r..=r {
                let (i, j) = (ci as i64 + di, cj as i64 + dj);
                if i < 0 || j < 0 || i >= nx as i64 || j >= ny as i64 {
                    continue;
                }
                let v = gaussian_value(radius, di, dj);
                let (i, j) = (i as usize, j as usize);
                if v > heatmap.get(i, j, class) {
                    heatmap.set(i, j, class, v);
                }
            }
        }
        let (cx, cy) = grid.bev_center(ci, cj);
        objects.push(CenterObject {
            cell: (ci, cj),
            class: gt.class,
            gt_index: g,
            values: [
                (gt.center.x - cx) / vs[0],
                (gt.center.y - cy) / vs[1],
                gt.center.z,
                gt.dims[0].ln(),
                gt.dims[1].ln(),
                gt.dims[2].ln(),
                gt.yaw.sin(),
                gt.yaw.cos(),
            ],
        });
    }
    CenterTargets { heatmap, objects }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub cell: (usize, usize),
    pub class: ObjectClass,
    pub score: f64,
}

/// Cells equal to the maximum of their 3×3 neighbourhood in the same class
/// channel. Equal neighbours resolve to the lowest linear index; cells with
/// zero score are never peaks. Returns at most `k`, best first.
pub fn extract_peaks(heatmap: &Heatmap, k: usize) -> Vec<Peak> {
    let (nx, ny) = heatmap.dims();
    let mut peaks = Vec::new();
    for class in 0..ObjectClass::COUNT {
        for i in 0..nx {
            for j in 0..ny {
                let v = heatmap.get(i, j, class);
                if !(v > 0.0) {
                    continue;
                }
                let mut is_peak = true;
                'scan: for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let (a, b) = (i as i64 + di, j as i64 + dj);
                        if a < 0 || b < 0 || a >= nx as i64 || b >= ny as i64 {
                            continue;
                        }
                        let n = heatmap.get(a as usize, b as usize, class);
                        // a neighbour before us in linear order wins ties
                        let earlier = (di, dj) < (0, 0);
                        if n > v || (n == v && earlier) {
                            is_peak = false;
                            break 'scan;
                        }
                    }
                }
                if is_peak {
                    peaks.push((Peak {
                        cell: (i, j),
                        class: ObjectClass::from_index(class).unwrap(),
                        score: v,
                    }, class, i * ny + j));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.score.total_cmp(&a.0.score).then((a.1, a.2).cmp(&(b.1, b.2))));
    peaks.truncate(k);
    peaks.into_iter().map(|p| p.0).collect()
}

/// Builds boxes at the peaks from the regression map, optionally followed by
/// per-class circle NMS.
pub fn decode_centers(
    peaks: &[Peak],
    regression: &RegressionMap,
    grid: &GridSpec,
    cfg: &CenterConfig,
) -> Result<Vec<Box3D>> {
    let [nx, ny, _] = grid.dims();
    if regression.dims() != (nx, ny) {
        return Err(Error::ShapeMismatch(format!(
            "regression map {:?} does not match grid {nx}x{ny}",
            regression.dims()
        )));
    }
    let vs = grid.voxel_size();
    let boxes: Vec<Box3D> = peaks
        .iter()
        .map(|p| {
            let r = regression.cell(p.cell.0, p.cell.1);
            let (cx, cy) = grid.bev_center(p.cell.0, p.cell.1);
            Box3D {
                center: Vector3::new(cx + r[0] * vs[0], cy + r[1] * vs[1], r[2]),
                dims: [r[3].exp(), r[4].exp(), r[5].exp()],
                yaw: r[6].atan2(r[7]),
                class: p.class,
                score: p.score,
            }
        })
        .collect();
    if !cfg.circle_nms {
        return Ok(boxes);
    }
    let mut keep = vec![false; boxes.len()];
    for class in ObjectClass::ALL {
        let order: Vec<usize> = (0..boxes.len()).filter(|&i| boxes[i].class == class).collect();
        for k in circle_nms(&boxes, &order, cfg.circle_radius[class.index()]) {
            keep[k] = true;
        }
    }
    Ok(boxes
        .into_iter()
        .zip(keep)
        .filter_map(|(b, k)| k.then_some(b))
        .collect())
}

/// Fixed-weight 1×1 head producing heatmaps and regression maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCenterHead {
    channels: usize,
    /// `classes + 8` output rows of `channels + 1` (bias last).
    weight: Vec<f64>,
}

impl LinearCenterHead {
    pub fn seeded(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = (0..(ObjectClass::COUNT + REGRESSION_CHANNELS) * (channels + 1))
            .map(|_| rng.gen_range(-0.05..=0.05f64) as f32 as f64)
            .collect();
        LinearCenterHead { channels, weight }
    }

    pub fn forward(&self, bev: &BevFeature) -> Result<(Heatmap, RegressionMap)> {
        let [nx, ny, c] = bev.shape();
        if c != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "center head expects {} channels, got {c}",
                self.channels
            )));
        }
        let mut heat = Heatmap::zeros(nx, ny);
        let mut reg = RegressionMap::zeros(nx, ny);
        let row = c + 1;
        let dot = |o: usize, f: &[f64]| {
            let w = &self.weight[o * row..(o + 1) * row];
            w[c] + f.iter().zip(w).map(|(x, y)| x * y).sum::<f64>()
        };
        for i in 0..nx {
            for j in 0..ny {
                let f = bev.cell(i, j);
                for k in 0..ObjectClass::COUNT {
                    heat.set(i, j, k, sigmoid(dot(k, f)));
                }
                let out = reg.cell_mut(i, j);
                for (r, o) in out.iter_mut().enumerate() {
                    *o = dot(ObjectClass::COUNT + r, f);
                }
            }
        }
        Ok((heat, reg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::new((0.0, 20.0), (-10.0, 10.0), (-2.0, 4.0), [0.5, 0.5, 6.0]).unwrap()
    }

    fn car_at(x: f64, y: f64) -> Box3D {
        Box3D::new(Vector3::new(x, y, -0.1), [4.0, 2.0, 1.5], 0.0, ObjectClass::Car).unwrap()
    }

    #[test]
    fn empty_targets() {
        let t = render_targets(&[], &grid(), &CenterConfig::default());
        assert!(t.heatmap.data().iter().all(|v| *v == 0.0));
        assert!(t.objects.is_empty());
    }

    #[test]
    fn single_object_peak_and_decay() {
        let g = grid();
        let t = render_targets(&[car_at(5.25, 0.25)], &g, &CenterConfig::default());
        let (ci, cj) = g.bev_cell(5.25, 0.25).unwrap();
        assert_eq!(t.heatmap.get(ci, cj, 0), 1.0);
        let ones = t.heatmap.data().iter().filter(|v| **v == 1.0).count();
        assert_eq!(ones, 1);
        let mut prev = 1.0;
        for d in 1..4 {
            let v = t.heatmap.get(ci + d, cj, 0);
            assert!(v < prev);
            prev = v;
        }
        // other classes untouched
        assert_eq!(t.heatmap.get(ci, cj, 1), 0.0);
    }

    #[test]
    fn objects_outside_range_are_skipped() {
        let t = render_targets(&[car_at(50.0, 0.0)], &grid(), &CenterConfig::default());
        assert!(t.objects.is_empty());
    }

    #[test]
    fn radius_is_at_least_one() {
        let ped = Box3D::new(Vector3::zeros(), [0.3, 0.3, 1.7], 0.0, ObjectClass::Pedestrian).unwrap();
        assert_eq!(splat_radius(&ped, &grid(), 0.1), 1);
        assert!(splat_radius(&car_at(0.0, 0.0), &grid(), 0.1) >= 1);
    }

    #[test]
    fn single_peak() {
        let mut h = Heatmap::zeros(5, 5);
        h.set(2, 3, 1, 1.0);
        let peaks = extract_peaks(&h, 10);
        assert_eq!(peaks.len(), 1);
        assert_eq!(peaks[0].cell, (2, 3));
        assert_eq!(peaks[0].class, ObjectClass::Pedestrian);
    }

    #[test]
    fn uniform_map_has_first_cell_as_only_peak() {
        let h = Heatmap::from_data(4, 4, vec![0.3; 48]).unwrap();
        let peaks = extract_peaks(&h, 100);
        assert_eq!(peaks.len(), 3);
        assert!(peaks.iter().all(|p| p.cell == (0, 0)));
    }

    #[test]
    fn peaks_limited_by_k() {
        let mut h = Heatmap::zeros(9, 9);
        h.set(0, 0, 0, 0.5);
        h.set(4, 4, 0, 0.9);
        h.set(8, 8, 0, 0.7);
        let peaks = extract_peaks(&h, 2);
        assert_eq!(peaks.iter().map(|p| p.score).collect::<Vec<_>>(), vec![0.9, 0.7]);
    }

    #[test]
    fn decode_plain_cell() {
        let g = grid();
        let mut reg = RegressionMap::zeros(40, 40);
        reg.cell_mut(3, 4).copy_from_slice(&[0.0, 0.0, 0.2, 4f64.ln(), 2f64.ln(), 1.5f64.ln(), 0.0, 1.0]);
        let peak = Peak {
            cell: (3, 4),
            class: ObjectClass::Car,
            score: 0.8,
        };
        let boxes = decode_centers(&[peak], &reg, &g, &CenterConfig::default()).unwrap();
        let (cx, cy) = g.bev_center(3, 4);
        assert_eq!(boxes[0].center, Vector3::new(cx, cy, 0.2));
        for (a, b) in boxes[0].dims.iter().zip([4.0, 2.0, 1.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(boxes[0].yaw, 0.0);
        assert_eq!(boxes[0].score, 0.8);
    }

    #[test]
    fn circle_nms_drops_close_peak() {
        let g = grid();
        let mut reg = RegressionMap::zeros(40, 40);
        for (i, j) in [(10, 10), (10, 11)] {
            reg.cell_mut(i, j).copy_from_slice(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        }
        // second peak offset so centers are 0.4 m apart
        reg.cell_mut(10, 11)[1] = -0.2;
        let peaks = [
            Peak { cell: (10, 10), class: ObjectClass::Car, score: 0.9 },
            Peak { cell: (10, 11), class: ObjectClass::Car, score: 0.6 },
        ];
        let cfg = CenterConfig {
            circle_radius: [1.0, 0.85, 1.75],
            ..Default::default()
        };
        let boxes = decode_centers(&peaks, &reg, &g, &cfg).unwrap();
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].score, 0.9);
        let off = CenterConfig { circle_nms: false, ..cfg };
        assert_eq!(decode_centers(&peaks, &reg, &g, &off).unwrap().len(), 2);
    }
}

//! Slow reference implementations used to cross-check the fast paths.
//!
//! Everything here favours obviousness over speed: rasterised overlaps,
//! vertex-hull polygon intersection, O(N²) suppression, exhaustive scans
//! and enumerated matchings. The self-test command and the test suites
//! compare production code against these.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::anchor::{AnchorConfig, AnchorLabel, IOU_TIE_EPS};
use crate::boxes::{Box3D, ObjectClass};
use crate::center::{Heatmap, Peak};
use crate::geometry::Se3;
use crate::metrics::{let_pair, LetConfig};
use crate::scene::{node_pixel, RenderedFrame, Surface};
use crate::voxel::{FeatureVolume, GridSpec};

fn inside_box(b: &Box3D, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.center.x, y - b.center.y);
    (c * dx + s * dy).abs() <= 0.5 * b.dims[0] && (-s * dx + c * dy).abs() <= 0.5 * b.dims[1]
}

fn bbox(b: &Box3D) -> [f64; 4] {
    let cs = b.bev_corners();
    let xs = cs.iter().map(|p| p[0]);
    let ys = cs.iter().map(|p| p[1]);
    [
        xs.clone().fold(f64::INFINITY, f64::min),
        xs.fold(f64::NEG_INFINITY, f64::max),
        ys.clone().fold(f64::INFINITY, f64::min),
        ys.fold(f64::NEG_INFINITY, f64::max),
    ]
}

/// BEV IoU by sampling an `n × n` grid of cell centers over the union of
/// both bounding rectangles.
pub fn raster_bev_iou(a: &Box3D, b: &Box3D, n: usize) -> f64 {
    let (ba, bb) = (bbox(a), bbox(b));
    let x0 = ba[0].min(bb[0]);
    let x1 = ba[1].max(bb[1]);
    let y0 = ba[2].min(bb[2]);
    let y1 = ba[3].max(bb[3]);
    let (hx, hy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..n {
        let x = x0 + (i as f64 + 0.5) * hx;
        for j in 0..n {
            let y = y0 + (j as f64 + 0.5) * hy;
            let (ia, ib) = (inside_box(a, x, y), inside_box(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn segment_intersection(p: [f64; 2], q: [f64; 2], r: [f64; 2], s: [f64; 2]) -> Option<[f64; 2]> {
    let d1 = [q[0] - p[0], q[1] - p[1]];
    let d2 = [s[0] - r[0], s[1] - r[1]];
    let den = d1[0] * d2[1] - d1[1] * d2[0];
    if den.abs() < 1e-300 {
        return None;
    }
    let w = [r[0] - p[0], r[1] - p[1]];
    let t = (w[0] * d2[1] - w[1] * d2[0]) / den;
    let u = (w[0] * d1[1] - w[1] * d1[0]) / den;
    ((0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u)).then(|| [p[0] + t * d1[0], p[1] + t * d1[1]])
}

/// Intersection area of two footprints: corners of each inside the other
/// plus all edge crossings, ordered by angle around their centroid.
pub fn hull_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let (ca, cb) = (a.bev_corners(), b.bev_corners());
    let mut pts: Vec<[f64; 2]> = Vec::new();
    pts.extend(ca.iter().filter(|p| inside_box(b, p[0], p[1])));
    pts.extend(cb.iter().filter(|p| inside_box(a, p[0], p[1])));
    for i in 0..4 {
        for j in 0..4 {
            if let Some(p) = segment_intersection(ca[i], ca[(i + 1) % 4], cb[j], cb[(j + 1) % 4]) {
                pts.push(p);
            }
        }
    }
    if pts.len() < 3 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    pts.sort_by(|p, q| (p[1] - cy).atan2(p[0] - cx).total_cmp(&(q[1] - cy).atan2(q[0] - cx)));
    let mut area = 0.0;
    for i in 0..pts.len() {
        let (p, q) = (pts[i], pts[(i + 1) % pts.len()]);
        area += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * area.abs()
}

pub fn hull_bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = hull_intersection_area(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Greedy suppression over a precomputed IoU matrix.
pub fn brute_nms(boxes: &[Box3D], order: &[usize], iou_threshold: f64) -> Vec<usize> {
    let n = boxes.len();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = hull_bev_iou(&boxes[i], &boxes[j]);
        }
    }
    let mut suppressed = vec![false; n];
    let mut keep = Vec::new();
    for &i in order {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in order {
            if j != i && m[i * n + j] > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Anchor labels from a direct scan over all (anchor, ground truth) pairs.
pub fn brute_assign(anchors: &[Box3D], gts: &[Box3D], cfg: &AnchorConfig) -> Vec<AnchorLabel> {
    let iou: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| {
            gts.iter()
                .map(|g| if g.class == a.class { hull_bev_iou(a, g) } else { -1.0 })
                .collect()
        })
        .collect();
    let mut labels = Vec::with_capacity(anchors.len());
    for (ai, a) in anchors.iter().enumerate() {
        let c = cfg.for_class(a.class).expect("class configured");
        let mut best_iou = 0.0;
        let mut best_gt = None;
        for (g, &v) in iou[ai].iter().enumerate() {
            if v >= 0.0 && (best_gt.is_none() || v > best_iou + IOU_TIE_EPS) {
                best_iou = v;
                best_gt = Some(g);
            }
        }
        labels.push(if best_gt.is_some() && best_iou >= c.pos_iou {
            AnchorLabel::Positive(best_gt.unwrap())
        } else if best_iou < c.neg_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignored
        });
    }
    if cfg.force_best_anchor {
        for g in 0..gts.len() {
            let mut best: Option<(f64, usize)> = None;
            for ai in 0..anchors.len() {
                let v = iou[ai][g];
                if v > 0.0 && best.is_none_or(|(b, _)| v > b + IOU_TIE_EPS) {
                    best = Some((v, ai));
                }
            }
            if let Some((_, ai)) = best {
                labels[ai] = AnchorLabel::Positive(g);
            }
        }
    }
    labels
}

/// Peaks by comparing each cell against its full 3×3 window, with equal
/// values resolved toward the lowest linear index.
pub fn brute_peaks(heatmap: &Heatmap, k: usize) -> Vec<Peak> {
    let (nx, ny) = heatmap.dims();
    let mut found = Vec::new();
    for class in 0..ObjectClass::COUNT {
        for i in 0..nx {
            for j in 0..ny {
                let v = heatmap.get(i, j, class);
                if v <= 0.0 {
                    continue;
                }
                let mut winner = (v, i * ny + j);
                for a in i.saturating_sub(1)..=(i + 1).min(nx - 1) {
                    for b in j.saturating_sub(1)..=(j + 1).min(ny - 1) {
                        let w = heatmap.get(a, b, class);
                        let idx = a * ny + b;
                        if w > winner.0 || (w == winner.0 && idx < winner.1) {
                            winner = (w, idx);
                        }
                    }
                }
                if winner.1 == i * ny + j {
                    found.push((class, i * ny + j, Peak {
                        cell: (i, j),
                        class: ObjectClass::from_index(class).unwrap(),
                        score: v,
                    }));
                }
            }
        }
    }
    found.sort_by(|a, b| {
        b.2.score
            .total_cmp(&a.2.score)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    found.into_iter().take(k).map(|f| f.2).collect()
}

/// Central difference `(f(x+h) − f(x−h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Best matching under the lexicographic order that ranks predictions by
/// descending score (ties: index) and prefers, for each prediction in turn,
/// a valid match with the highest LET-IoU (ties: lowest ground-truth index).
/// Enumerates all partial one-to-one matchings.
pub fn exhaustive_matching(preds: &[Box3D], gts: &[Box3D], cfg: &LetConfig) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let valid: Vec<Vec<Option<f64>>> = preds
        .iter()
        .map(|p| {
            gts.iter()
                .map(|g| {
                    if g.class != p.class {
                        return None;
                    }
                    let (iou, _) = let_pair(p, g, cfg).ok()?;
                    (iou >= cfg.iou_threshold[p.class.index()]).then_some(iou)
                })
                .collect()
        })
        .collect();

    // key entries: (matched, iou, -gt) compared lexicographically
    type Key = Vec<(bool, f64, i64)>;
    fn better(a: &Key, b: &Key) -> bool {
        for (x, y) in a.iter().zip(b) {
            let c = x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)).then(x.2.cmp(&y.2));
            if c != std::cmp::Ordering::Equal {
                return c.is_gt();
            }
        }
        false
    }
    fn rec(
        depth: usize,
        order: &[usize],
        valid: &[Vec<Option<f64>>],
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        key: &mut Key,
        best: &mut Option<(Key, Vec<Option<usize>>)>,
    ) {
        if depth == order.len() {
            if best.as_ref().is_none_or(|(k, _)| better(key, k)) {
                *best = Some((key.clone(), cur.clone()));
            }
            return;
        }
        let p = order[depth];
        key.push((false, 0.0, 0));
        rec(depth + 1, order, valid, used, cur, key, best);
        key.pop();
        for (g, v) in valid[p].iter().enumerate() {
            let Some(iou) = v else { continue };
            if used[g] {
                continue;
            }
            used[g] = true;
            cur[p] = Some(g);
            key.push((true, *iou, -(g as i64)));
            rec(depth + 1, order, valid, used, cur, key, best);
            key.pop();
            cur[p] = None;
            used[g] = false;
        }
    }
    let mut best = None;
    rec(
        0,
        &order,
        &valid,
        &mut vec![false; gts.len()],
        &mut vec![None; preds.len()],
        &mut Vec::new(),
        &mut best,
    );
    best.map(|b| b.1).unwrap_or_default()
}

/// Whether the voxel centered at `p` (frame ego coordinates) sits on a box
/// face seen consistently by every camera that would sample it: each such
/// camera's ray through `p` meets the same face within half a voxel of
/// `p`, and the four lattice nodes around the projection all land on that
/// face as well. Returns `None` if no camera samples `p`.
pub fn surface_voxel(frame: &RenderedFrame, p: &Vector3<f64>, voxel: f64) -> Option<bool> {
    let mut surface: Option<Surface> = None;
    let mut any = false;
    for feat in &frame.features {
        let Some(cam) = frame.rig.camera(feat.view) else { continue };
        let proj = cam.project(p);
        if !proj.visible {
            continue;
        }
        let (x, y) = feat.lattice_coords(proj.u, proj.v);
        let (mx, my) = ((feat.cols() - 1) as f64, (feat.rows() - 1) as f64);
        if !(x >= 0.0 && x <= mx && y >= 0.0 && y <= my) {
            continue;
        }
        any = true;
        let origin = cam.center_in_ego();
        let dir = (p - origin).normalize();
        let Some(hit) = crate::scene::cast_ray(&origin, &dir, &frame.gts, frame.ground_z) else {
            return Some(false);
        };
        if !matches!(hit.surface, Surface::BoxFace { .. }) || (hit.point - p).norm() > 0.5 * voxel {
            return Some(false);
        }
        if surface.is_some_and(|s| s != hit.surface) {
            return Some(false);
        }
        surface = Some(hit.surface);
        let c0 = (x.floor() as usize).min(feat.cols() - 2);
        let r0 = (y.floor() as usize).min(feat.rows() - 2);
        for (r, c) in [(r0, c0), (r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)] {
            let (u, v) = node_pixel(r, c, feat.stride());
            if frame.cast(feat.view, u, v).map(|h| h.surface) != Some(hit.surface) {
                return Some(false);
            }
        }
    }
    any.then_some(true)
}

/// Statistics of the positional-feature check on box-surface voxels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SurfaceCheck {
    pub surface_voxels: usize,
    pub within_tolerance: usize,
    pub max_error: f64,
}

impl SurfaceCheck {
    pub fn fraction(&self) -> f64 {
        if self.surface_voxels == 0 {
            0.0
        } else {
            self.within_tolerance as f64 / self.surface_voxels as f64
        }
    }
}

fn near_any_box(boxes: &[Box3D], p: &Vector3<f64>, margin: f64) -> bool {
    boxes.iter().any(|b| {
        let d = p - b.center;
        let (s, c) = b.yaw.sin_cos();
        (c * d.x + s * d.y).abs() <= 0.5 * b.dims[0] + margin
            && (-s * d.x + c * d.y).abs() <= 0.5 * b.dims[1] + margin
            && d.z.abs() <= 0.5 * b.dims[2] + margin
    })
}

fn surface_voxel_indices(frame: &RenderedFrame, grid: &GridSpec) -> Vec<usize> {
    let vs = grid.voxel_size();
    let voxel = vs[0].min(vs[1]).min(vs[2]);
    (0..grid.num_voxels())
        .into_par_iter()
        .filter(|&idx| {
            let [i, j, k] = grid.unravel(idx);
            let p = grid.center(i, j, k);
            near_any_box(&frame.gts, &p, voxel) && surface_voxel(frame, &p, voxel) == Some(true)
        })
        .collect()
}

/// Compares lifted positional features against voxel centers on every
/// box-surface voxel. An entry is within tolerance when each coordinate is
/// within half a voxel of the center.
pub fn lifting_surface_check(frame: &RenderedFrame, grid: &GridSpec, vol: &FeatureVolume) -> SurfaceCheck {
    let vs = grid.voxel_size();
    let mut out = SurfaceCheck::default();
    for idx in surface_voxel_indices(frame, grid) {
        let [i, j, k] = grid.unravel(idx);
        let p = grid.center(i, j, k);
        let f = vol.features_at(idx);
        out.surface_voxels += 1;
        let err = (0..3).map(|a| (f[a] - p[a]).abs() / vs[a]).fold(0.0, f64::max);
        out.max_error = out.max_error.max(err);
        if vol.is_valid(i, j, k) && err <= 0.5 {
            out.within_tolerance += 1;
        }
    }
    out
}

/// Agreement between the current and previous halves of a stereo volume on
/// voxels that are surface voxels in both frames. Previous-frame positions
/// are mapped back into the current ego frame with `rel⁻¹`. Errors are in
/// voxel units (largest coordinate).
pub fn temporal_surface_check(
    curr: &RenderedFrame,
    prev: &RenderedFrame,
    rel: &Se3,
    grid: &GridSpec,
    stereo: &FeatureVolume,
    tolerance: f64,
) -> SurfaceCheck {
    let vs = grid.voxel_size();
    let voxel = vs[0].min(vs[1]).min(vs[2]);
    let back = rel.inverse();
    let mut out = SurfaceCheck::default();
    for idx in surface_voxel_indices(curr, grid) {
        let [i, j, k] = grid.unravel(idx);
        let p = grid.center(i, j, k);
        if surface_voxel(prev, &rel.transform_point(&p), voxel) != Some(true) {
            continue;
        }
        let c = stereo.frame_features_at(idx, 0);
        let q = stereo.frame_features_at(idx, 1);
        let q_curr = back.transform_point(&Vector3::new(q[0], q[1], q[2]));
        let err = (0..3).map(|a| (c[a] - q_curr[a]).abs() / vs[a]).fold(0.0, f64::max);
        out.surface_voxels += 1;
        out.max_error = out.max_error.max(err);
        if err <= tolerance {
            out.within_tolerance += 1;
        }
    }
    out
}

//! Anchor-based BEV head: anchor layout, IoU target assignment and the
//! decode → rotated NMS inference path.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::{bev_iou, decode_anchor, encode_anchor, wrap_angle, Box3D, BoxDelta, ObjectClass};
use crate::error::{Error, Result};
use crate::neck::{sigmoid, BevFeature};
use crate::nms::rotated_nms;
use crate::voxel::GridSpec;

/// Per-class anchor template and matching thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAnchor {
    pub class: ObjectClass,
    /// `(l, w, h)` in meters.
    pub dims: [f64; 3],
    pub z: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub classes: Vec<ClassAnchor>,
    pub yaws: Vec<f64>,
    /// Forces each ground truth's best-overlapping anchor positive.
    pub force_best_anchor: bool,
    pub nms_iou: f64,
    pub pre_nms: usize,
    pub post_nms: usize,
    /// Candidates must score strictly above this.
    pub score_threshold: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            classes: vec![
                ClassAnchor {
                    class: ObjectClass::Car,
                    dims: [4.73, 2.08, 1.77],
                    z: 0.0,
                    pos_iou: 0.6,
                    neg_iou: 0.45,
                },
                ClassAnchor {
                    class: ObjectClass::Pedestrian,
                    dims: [0.91, 0.84, 1.74],
                    z: 0.0,
                    pos_iou: 0.5,
                    neg_iou: 0.35,
                },
                ClassAnchor {
                    class: ObjectClass::Cyclist,
                    dims: [1.81, 0.84, 1.77],
                    z: 0.0,
                    pos_iou: 0.5,
                    neg_iou: 0.35,
                },
            ],
            yaws: vec![0.0, FRAC_PI_2],
            force_best_anchor: true,
            nms_iou: 0.1,
            pre_nms: 4096,
            post_nms: 500,
            score_threshold: 0.0,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.yaws.is_empty() {
            return Err(Error::InvalidConfig("anchor config needs classes and yaws".into()));
        }
        for c in &self.classes {
            if !(0.0 <= c.neg_iou && c.neg_iou < c.pos_iou && c.pos_iou <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "{}: thresholds must satisfy 0 ≤ neg < pos ≤ 1, got ({}, {})",
                    c.class, c.pos_iou, c.neg_iou
                )));
            }
            if c.dims.iter().any(|d| !(*d > 0.0)) {
                return Err(Error::InvalidConfig(format!("{}: anchor dims must be positive", c.class)));
            }
        }
        if !(0.0..=1.0).contains(&self.nms_iou) || self.post_nms == 0 || self.pre_nms == 0 {
            return Err(Error::InvalidConfig("invalid NMS settings".into()));
        }
        Ok(())
    }

    pub fn for_class(&self, class: ObjectClass) -> Option<&ClassAnchor> {
        self.classes.iter().find(|c| c.class == class)
    }

    /// Anchors per BEV cell.
    pub fn anchors_per_cell(&self) -> usize {
        self.classes.len() * self.yaws.len()
    }
}

/// IoUs closer than this count as equal; ties go to the lower index.
pub const IOU_TIE_EPS: f64 = 1e-12;

/// One anchor per (BEV cell, class, yaw), ordered cell-major with x outermost.
pub fn generate_anchors(grid: &GridSpec, cfg: &AnchorConfig) -> Vec<Box3D> {
    let [nx, ny, _] = grid.dims();
    let mut anchors = Vec::with_capacity(nx * ny * cfg.anchors_per_cell());
    for i in 0..nx {
        for j in 0..ny {
            let (x, y) = grid.bev_center(i, j);
            for c in &cfg.classes {
                for &yaw in &cfg.yaws {
                    anchors.push(Box3D {
                        center: Vector3::new(x, y, c.z),
                        dims: c.dims,
                        yaw: wrap_angle(yaw),
                        class: c.class,
                        score: 0.0,
                    });
                }
            }
        }
    }
    anchors
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Negative,
    Ignored,
    Positive(usize),
}

/// Direction bin: 0 for wrapped yaw in `[0, π)`, otherwise 1.
pub fn direction_bin(yaw: f64) -> usize {
    let y = wrap_angle(yaw);
    if (0.0..PI).contains(&y) {
        0
    } else {
        1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveTarget {
    pub anchor: usize,
    pub gt: usize,
    pub delta: BoxDelta,
    pub dir_bin: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub labels: Vec<AnchorLabel>,
    /// Best same-class IoU per anchor.
    pub max_iou: Vec<f64>,
    /// Positive targets in ascending anchor order.
    pub positives: Vec<PositiveTarget>,
}

impl AssignmentResult {
    pub fn num_positive(&self) -> usize {
        self.positives.len()
    }

    pub fn num_negative(&self) -> usize {
        self.labels.iter().filter(|l| **l == AnchorLabel::Negative).count()
    }
}

/// Labels anchors by their best same-class BEV IoU against the ground truth.
pub fn assign_targets(anchors: &[Box3D], gts: &[Box3D], cfg: &AnchorConfig) -> Result<AssignmentResult> {
    cfg.validate()?;
    let thresholds = |class: ObjectClass| -> Result<(f64, f64)> {
        cfg.for_class(class)
            .map(|c| (c.pos_iou, c.neg_iou))
            .ok_or_else(|| Error::InvalidConfig(format!("no anchor settings for {class}")))
    };
    let class_thr: Vec<(f64, f64)> = ObjectClass::ALL
        .iter()
        .map(|&c| thresholds(c).unwrap_or((1.0, 0.0)))
        .collect();
    for a in anchors {
        thresholds(a.class)?;
    }

    let best: Vec<(f64, Option<usize>)> = anchors
        .par_iter()
        .map(|a| {
            let mut best = (0.0, None);
            for (g, gt) in gts.iter().enumerate() {
                if gt.class != a.class {
                    continue;
                }
                let iou = bev_iou(a, gt);
                if best.1.is_none() || iou > best.0 + IOU_TIE_EPS {
                    best = (iou, Some(g));
                }
            }
            best
        })
        .collect();

    let mut labels: Vec<AnchorLabel> = anchors
        .iter()
        .zip(&best)
        .map(|(a, &(iou, g))| {
            let (pos, neg) = class_thr[a.class.index()];
            match g {
                Some(g) if iou >= pos => AnchorLabel::Positive(g),
                _ if iou < neg => AnchorLabel::Negative,
                _ => AnchorLabel::Ignored,
            }
        })
        .collect();

    if cfg.force_best_anchor {
        for (g, gt) in gts.iter().enumerate() {
            let ious: Vec<f64> = anchors
                .par_iter()
                .map(|a| if a.class == gt.class { bev_iou(a, gt) } else { -1.0 })
                .collect();
            let mut top: Option<(f64, usize)> = None;
            for (idx, &iou) in ious.iter().enumerate() {
                if iou >= 0.0 && top.is_none_or(|(b, _)| iou > b + IOU_TIE_EPS) {
                    top = Some((iou, idx));
                }
            }
            if let Some((iou, idx)) = top {
                if iou > 0.0 {
                    labels[idx] = AnchorLabel::Positive(g);
                }
            }
        }
    }

    let positives = labels
        .iter()
        .enumerate()
        .filter_map(|(idx, l)| match l {
            AnchorLabel::Positive(g) => Some(PositiveTarget {
                anchor: idx,
                gt: *g,
                delta: encode_anchor(&gts[*g], &anchors[idx]),
                dir_bin: direction_bin(gts[*g].yaw),
            }),
            _ => None,
        })
        .collect();

    Ok(AssignmentResult {
        labels,
        max_iou: best.into_iter().map(|b| b.0).collect(),
        positives,
    })
}

/// Raw per-anchor head outputs. `scores` is `(anchors, classes)` row-major
/// with classes in [`ObjectClass::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorHeadOutput {
    pub scores: Vec<f64>,
    pub deltas: Vec<BoxDelta>,
    pub dir_logits: Vec<[f64; 2]>,
}

impl AnchorHeadOutput {
    /// Outputs a perfect head would emit for `assignment`: score 1 on each
    /// positive anchor's class, exact deltas, confident direction bins.
    pub fn from_assignment(anchors: &[Box3D], assignment: &AssignmentResult) -> Self {
        let n = anchors.len();
        let mut out = AnchorHeadOutput {
            scores: vec![0.0; n * ObjectClass::COUNT],
            deltas: vec![BoxDelta::default(); n],
            dir_logits: vec![[0.0, 0.0]; n],
        };
        for p in &assignment.positives {
            out.scores[p.anchor * ObjectClass::COUNT + anchors[p.anchor].class.index()] = 1.0;
            out.deltas[p.anchor] = p.delta;
            out.dir_logits[p.anchor] = if p.dir_bin == 0 { [10.0, -10.0] } else { [-10.0, 10.0] };
        }
        out
    }
}

/// Top-k decode, direction fix-up, per-class rotated NMS and final budget.
pub fn decode_and_nms(
    output: &AnchorHeadOutput,
    anchors: &[Box3D],
    cfg: &AnchorConfig,
) -> Result<Vec<Box3D>> {
    let n = anchors.len();
    if output.scores.len() != n * ObjectClass::COUNT
        || output.deltas.len() != n
        || output.dir_logits.len() != n
    {
        return Err(Error::ShapeMismatch(format!(
            "head output sizes ({}, {}, {}) do not match {n} anchors",
            output.scores.len(),
            output.deltas.len(),
            output.dir_logits.len()
        )));
    }
    // (score, anchor, class)
    let mut cands: Vec<(f64, usize, usize)> = output
        .scores
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > cfg.score_threshold)
        .map(|(i, &s)| (s, i / ObjectClass::COUNT, i % ObjectClass::COUNT))
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    cands.truncate(cfg.pre_nms);

    let decoded: Vec<Box3D> = cands
        .iter()
        .map(|&(score, a, c)| {
            let mut b = decode_anchor(&output.deltas[a], &anchors[a]);
            let logits = output.dir_logits[a];
            let want = usize::from(logits[1] > logits[0]);
            if direction_bin(b.yaw) != want {
                b.yaw = wrap_angle(b.yaw + PI);
            }
            b.class = ObjectClass::from_index(c).expect("class index in range");
            b.score = score;
            b
        })
        .collect();

    let per_class: Vec<Vec<usize>> = ObjectClass::ALL
        .par_iter()
        .map(|&class| {
            let order: Vec<usize> = (0..decoded.len()).filter(|&i| decoded[i].class == class).collect();
            rotated_nms(&decoded, &order, cfg.nms_iou)
        })
        .collect();
    let mut kept: Vec<usize> = per_class.into_iter().flatten().collect();
    // candidate order already encodes (score desc, anchor, class)
    kept.sort_unstable();
    kept.truncate(cfg.post_nms);
    Ok(kept.into_iter().map(|i| decoded[i]).collect())
}

/// Fixed-weight 1×1 head mapping BEV features to anchor outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAnchorHead {
    channels: usize,
    per_cell: usize,
    /// Per anchor slot: `classes + 7 + 2` output rows of `channels + 1` (bias last).
    weight: Vec<f64>,
}

const ANCHOR_HEAD_OUTPUTS: usize = ObjectClass::COUNT + 7 + 2;

impl LinearAnchorHead {
    pub fn seeded(channels: usize, cfg: &AnchorConfig, seed: u64) -> Self {
        let per_cell = cfg.anchors_per_cell();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = (0..per_cell * ANCHOR_HEAD_OUTPUTS * (channels + 1))
            .map(|_| rng.gen_range(-0.05..=0.05f64) as f32 as f64)
            .collect();
        LinearAnchorHead {
            channels,
            per_cell,
            weight,
        }
    }

    pub fn forward(&self, bev: &BevFeature) -> Result<AnchorHeadOutput> {
        let [nx, ny, c] = bev.shape();
        if c != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "anchor head expects {} channels, got {c}",
                self.channels
            )));
        }
        let n = nx * ny * self.per_cell;
        let mut out = AnchorHeadOutput {
            scores: vec![0.0; n * ObjectClass::COUNT],
            deltas: vec![BoxDelta::default(); n],
            dir_logits: vec![[0.0; 2]; n],
        };
        let row = c + 1;
        for i in 0..nx {
            for j in 0..ny {
                let f = bev.cell(i, j);
                for slot in 0..self.per_cell {
                    let a = (i * ny + j) * self.per_cell + slot;
                    let mut vals = [0.0; ANCHOR_HEAD_OUTPUTS];
                    for (o, v) in vals.iter_mut().enumerate() {
                        let w = &self.weight[(slot * ANCHOR_HEAD_OUTPUTS + o) * row..][..row];
                        *v = w[c] + f.iter().zip(w).map(|(x, y)| x * y).sum::<f64>();
                    }
                    for k in 0..ObjectClass::COUNT {
                        out.scores[a * ObjectClass::COUNT + k] = sigmoid(vals[k]);
                    }
                    let d = &vals[ObjectClass::COUNT..ObjectClass::COUNT + 7];
                    out.deltas[a] = BoxDelta::from_array([d[0], d[1], d[2], d[3], d[4], d[5], d[6]]);
                    out.dir_logits[a] = [vals[ObjectClass::COUNT + 7], vals[ObjectClass::COUNT + 8]];
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_grid() -> GridSpec {
        GridSpec::new((0.0, 2.0), (0.0, 2.0), (-1.0, 1.0), [1.0, 1.0, 2.0]).unwrap()
    }

    #[test]
    fn anchor_count_and_centers() {
        let grid = tiny_grid();
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(&grid, &cfg);
        assert_eq!(anchors.len(), 24);
        assert_eq!(anchors[0].center.x, 0.5);
        assert_eq!(anchors[6].center.y, 1.5);
        assert_eq!(anchors[1].yaw, FRAC_PI_2);
        assert_eq!(anchors[2].class, ObjectClass::Pedestrian);
    }

    #[test]
    fn default_grid_anchor_count() {
        let grid = GridSpec::default();
        let cfg = AnchorConfig::default();
        let [nx, ny, _] = grid.dims();
        assert_eq!(nx * ny * cfg.anchors_per_cell(), 396_000);
    }

    #[test]
    fn no_ground_truth_means_all_negative() {
        let grid = tiny_grid();
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(&grid, &cfg);
        let res = assign_targets(&anchors, &[], &cfg).unwrap();
        assert!(res.labels.iter().all(|l| *l == AnchorLabel::Negative));
        assert_eq!(res.num_positive(), 0);
    }

    #[test]
    fn anchor_equal_to_ground_truth_is_positive_with_zero_delta() {
        let grid = tiny_grid();
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(&grid, &cfg);
        let gt = anchors[0].with_score(1.0);
        let res = assign_targets(&anchors, &[gt], &cfg).unwrap();
        assert_eq!(res.labels[0], AnchorLabel::Positive(0));
        assert!((res.max_iou[0] - 1.0).abs() < 1e-12);
        let p = res.positives.iter().find(|p| p.anchor == 0).unwrap();
        assert_eq!(p.delta, BoxDelta::default());
        assert_eq!(p.dir_bin, 0);
    }

    #[test]
    fn direction_bins() {
        assert_eq!(direction_bin(0.0), 0);
        assert_eq!(direction_bin(3.0), 0);
        assert_eq!(direction_bin(PI), 1);
        assert_eq!(direction_bin(-0.1), 1);
    }

    #[test]
    fn invalid_thresholds_rejected() {
        let mut cfg = AnchorConfig::default();
        cfg.classes[0].neg_iou = 0.7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_anchor_decode() {
        let anchor = Box3D::new(Vector3::new(1.0, 2.0, 0.0), [4.0, 2.0, 1.5], 0.2, ObjectClass::Car).unwrap();
        let delta = BoxDelta {
            dx: 0.1,
            dl: 0.2,
            dyaw: 0.3,
            ..Default::default()
        };
        let out = AnchorHeadOutput {
            scores: vec![0.9, 0.0, 0.0],
            deltas: vec![delta],
            dir_logits: vec![[1.0, 0.0]],
        };
        let boxes = decode_and_nms(&out, &[anchor], &AnchorConfig::default()).unwrap();
        assert_eq!(boxes.len(), 1);
        let expect = decode_anchor(&delta, &anchor);
        assert_eq!(boxes[0].center, expect.center);
        assert_eq!(boxes[0].dims, expect.dims);
        assert_eq!(boxes[0].yaw, expect.yaw);
        assert_eq!(boxes[0].score, 0.9);
    }

    #[test]
    fn direction_logits_flip_yaw() {
        let anchor = Box3D::new(Vector3::zeros(), [4.0, 2.0, 1.5], 0.5, ObjectClass::Car).unwrap();
        let out = AnchorHeadOutput {
            scores: vec![0.9, 0.0, 0.0],
            deltas: vec![BoxDelta::default()],
            dir_logits: vec![[0.0, 1.0]],
        };
        let boxes = decode_and_nms(&out, &[anchor], &AnchorConfig::default()).unwrap();
        assert!((boxes[0].yaw - wrap_angle(0.5 + PI)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_predictions_collapse() {
        let anchor = Box3D::new(Vector3::zeros(), [4.0, 2.0, 1.5], 0.0, ObjectClass::Car).unwrap();
        let out = AnchorHeadOutput {
            scores: vec![0.8, 0.0, 0.0, 0.9, 0.0, 0.0],
            deltas: vec![BoxDelta::default(); 2],
            dir_logits: vec![[1.0, 0.0]; 2],
        };
        let boxes = decode_and_nms(&out, &[anchor, anchor], &AnchorConfig::default()).unwrap();
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].score, 0.9);
    }

    #[test]
    fn mismatched_output_rejected() {
        let out = AnchorHeadOutput {
            scores: vec![0.5],
            deltas: vec![],
            dir_logits: vec![],
        };
        assert!(decode_and_nms(&out, &[], &AnchorConfig::default()).is_err());
    }
}

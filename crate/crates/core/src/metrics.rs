//! Longitudinal-error-tolerant matching and AP / APL evaluation.
//!
//! A prediction's center error is split along the line of sight from the
//! ego origin to the ground-truth center. The longitudinal part is removed
//! before computing 3D IoU (LET-IoU) and separately scored by a linear
//! affinity that reaches zero at a range-dependent tolerance. AP integrates
//! the usual precision; APL replaces true-positive counts in the precision
//! numerator by the sum of matched affinities.
//!
//! Default thresholds and tolerances are configurable placeholders, not
//! official benchmark constants.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou3d_let, Box3D, ObjectClass};
use crate::error::{Error, Result};
use crate::geometry::{CameraRig, ViewLabel};
use crate::nms::rotated_nms;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LetConfig {
    /// LET-IoU match threshold per class, [`ObjectClass::ALL`] order.
    pub iou_threshold: [f64; 3],
    /// Longitudinal tolerance as a fraction of ground-truth range.
    pub tau_p: f64,
    /// Lower bound on the tolerance, meters.
    pub tau_min: f64,
}

impl Default for LetConfig {
    fn default() -> Self {
        LetConfig {
            iou_threshold: [0.5, 0.3, 0.3],
            tau_p: 0.1,
            tau_min: 0.5,
        }
    }
}

impl LetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_threshold.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::InvalidConfig("LET IoU thresholds must lie in (0, 1]".into()));
        }
        if !(self.tau_p > 0.0) || !(self.tau_min > 0.0) {
            return Err(Error::InvalidConfig("LET tolerances must be positive".into()));
        }
        Ok(())
    }

    /// Longitudinal tolerance at range `gt_range`.
    pub fn tolerance(&self, gt_range: f64) -> f64 {
        (self.tau_p * gt_range).max(self.tau_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LongitudinalCorrection {
    pub corrected_center: Vector3<f64>,
    /// Signed error along the line of sight (positive = too far).
    pub e_long: f64,
    /// Magnitude of the error orthogonal to the line of sight.
    pub e_lat: f64,
}

/// Removes the component of the prediction's center error that lies along
/// the line of sight to the ground truth.
pub fn longitudinal_correction(pred: &Box3D, gt: &Box3D) -> Result<LongitudinalCorrection> {
    let range = gt.center.norm();
    if !(range > 0.0) {
        return Err(Error::DegenerateLineOfSight);
    }
    let los = gt.center / range;
    let err = pred.center - gt.center;
    let e_long = err.dot(&los);
    let lateral = err - e_long * los;
    Ok(LongitudinalCorrection {
        corrected_center: pred.center - e_long * los,
        e_long,
        e_lat: lateral.norm(),
    })
}

/// `1 − min(|e|, T)/T` with `T = max(τ_p·range, τ_min)`.
pub fn longitudinal_affinity(e_long: f64, gt_range: f64, cfg: &LetConfig) -> f64 {
    let t = cfg.tolerance(gt_range);
    1.0 - e_long.abs().min(t) / t
}

/// Outcome for one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRecord {
    pub frame: usize,
    pub pred: usize,
    pub gt: Option<usize>,
    pub class: ObjectClass,
    pub score: f64,
    pub let_iou: f64,
    pub affinity: f64,
}

impl MatchRecord {
    pub fn is_tp(&self) -> bool {
        self.gt.is_some()
    }
}

/// LET-IoU and affinity of `pred` evaluated against `gt`.
pub fn let_pair(pred: &Box3D, gt: &Box3D, cfg: &LetConfig) -> Result<(f64, f64)> {
    let corr = longitudinal_correction(pred, gt)?;
    let iou = iou3d_let(pred, gt, &corr.corrected_center);
    Ok((iou, longitudinal_affinity(corr.e_long, gt.center.norm(), cfg)))
}

/// Greedy one-to-one matching within a frame. Predictions are visited by
/// descending score (ties: lower index first) and take the unused
/// same-class ground truth with the highest LET-IoU at or above the class
/// threshold (ties: lower index). Returns one record per prediction, in
/// prediction order.
pub fn match_frame(frame: usize, preds: &[Box3D], gts: &[Box3D], cfg: &LetConfig) -> Result<Vec<MatchRecord>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut records: Vec<Option<MatchRecord>> = vec![None; preds.len()];
    for p in order {
        let pred = &preds[p];
        let thr = cfg.iou_threshold[pred.class.index()];
        let mut best: Option<(usize, f64, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.class != pred.class {
                continue;
            }
            let (iou, aff) = let_pair(pred, gt, cfg)?;
            if iou >= thr && best.is_none_or(|(_, b, _)| iou > b) {
                best = Some((g, iou, aff));
            }
        }
        let rec = match best {
            Some((g, iou, aff)) => {
                used[g] = true;
                MatchRecord {
                    frame,
                    pred: p,
                    gt: Some(g),
                    class: pred.class,
                    score: pred.score,
                    let_iou: iou,
                    affinity: aff,
                }
            }
            None => MatchRecord {
                frame,
                pred: p,
                gt: None,
                class: pred.class,
                score: pred.score,
                let_iou: 0.0,
                affinity: 0.0,
            },
        };
        records[p] = Some(rec);
    }
    Ok(records.into_iter().map(|r| r.expect("every prediction visited")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApMode {
    Ap,
    Apl,
}

/// One operating point of the PR curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
    /// Affinity-weighted precision.
    pub precision_l: f64,
}

/// PR samples after each prediction in descending score order (ties keep
/// record order).
pub fn pr_curve(records: &[MatchRecord], gt_count: usize) -> Vec<PrPoint> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].score.total_cmp(&records[a].score).then(a.cmp(&b)));
    let mut tp = 0usize;
    let mut aff = 0.0;
    let mut points = Vec::with_capacity(order.len());
    for (k, &i) in order.iter().enumerate() {
        let r = &records[i];
        if r.is_tp() {
            tp += 1;
            aff += r.affinity;
        }
        let n = (k + 1) as f64;
        points.push(PrPoint {
            score: r.score,
            recall: if gt_count == 0 { 0.0 } else { tp as f64 / gt_count as f64 },
            precision: tp as f64 / n,
            precision_l: aff / n,
        });
    }
    points
}

/// All-points interpolated AP (or APL). `None` when there is no ground truth.
pub fn average_precision(records: &[MatchRecord], gt_count: usize, mode: ApMode) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let curve = pr_curve(records, gt_count);
    let prec: Vec<f64> = curve
        .iter()
        .map(|p| match mode {
            ApMode::Ap => p.precision,
            ApMode::Apl => p.precision_l,
        })
        .collect();
    // monotone envelope from the right
    let mut env = prec.clone();
    for k in (0..env.len().saturating_sub(1)).rev() {
        env[k] = env[k].max(env[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, e) in curve.iter().zip(&env) {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * e;
            prev_recall = p.recall;
        }
    }
    Some(ap.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class: ObjectClass,
    pub num_gt: usize,
    pub num_pred: usize,
    pub ap: Option<f64>,
    pub apl: Option<f64>,
    pub pr: Vec<PrPoint>,
}

/// Metrics for one camera view; `view == None` is the bucket of objects no
/// camera sees.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewReport {
    pub view: Option<ViewLabel>,
    pub classes: Vec<ClassReport>,
    pub map: Option<f64>,
    pub mapl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub map: Option<f64>,
    pub mapl: Option<f64>,
    pub views: Vec<ViewReport>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn class_reports(records: &[MatchRecord], gt_counts: [usize; 3]) -> Vec<ClassReport> {
    ObjectClass::ALL
        .iter()
        .map(|&class| {
            let recs: Vec<MatchRecord> = records.iter().copied().filter(|r| r.class == class).collect();
            let n_gt = gt_counts[class.index()];
            ClassReport {
                class,
                num_gt: n_gt,
                num_pred: recs.len(),
                ap: average_precision(&recs, n_gt, ApMode::Ap),
                apl: average_precision(&recs, n_gt, ApMode::Apl),
                pr: pr_curve(&recs, n_gt),
            }
        })
        .collect()
}

/// First camera (front-to-back order) whose image contains the point.
pub fn view_of(point: &Vector3<f64>, rig: &CameraRig) -> Option<ViewLabel> {
    let mut cams: Vec<_> = rig.cameras().iter().collect();
    cams.sort_by_key(|c| c.view);
    cams.into_iter()
        .find(|c| c.camera.project(point).visible)
        .map(|c| c.view)
}

/// Matches every frame and computes per-class AP/APL with mAP/mAPL. When
/// rigs are given, also reports per camera view: ground truths go to the
/// view containing their center, matched predictions follow their ground
/// truth, unmatched predictions go to the view containing their own center.
pub fn evaluate(
    preds: &[Vec<Box3D>],
    gts: &[Vec<Box3D>],
    rigs: Option<&[CameraRig]>,
    cfg: &LetConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} prediction frames for {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    if let Some(r) = rigs {
        if r.len() != gts.len() {
            return Err(Error::ShapeMismatch("one rig per frame required".into()));
        }
    }
    let mut records = Vec::new();
    let mut gt_counts = [0usize; 3];
    for (f, (p, g)) in preds.iter().zip(gts).enumerate() {
        records.extend(match_frame(f, p, g, cfg)?);
        for b in g {
            gt_counts[b.class.index()] += 1;
        }
    }
    let classes = class_reports(&records, gt_counts);
    let map = mean_defined(classes.iter().map(|c| c.ap));
    let mapl = mean_defined(classes.iter().map(|c| c.apl));
    let views = match rigs {
        Some(rigs) => view_breakdown(&records, preds, gts, rigs),
        None => Vec::new(),
    };
    Ok(EvalReport {
        classes,
        map,
        mapl,
        views,
    })
}

/// Per-view reports from frame-level match records.
pub fn view_breakdown(
    records: &[MatchRecord],
    preds: &[Vec<Box3D>],
    gts: &[Vec<Box3D>],
    rigs: &[CameraRig],
) -> Vec<ViewReport> {
    let gt_views: Vec<Vec<Option<ViewLabel>>> = gts
        .iter()
        .zip(rigs)
        .map(|(g, rig)| g.iter().map(|b| view_of(&b.center, rig)).collect())
        .collect();
    let rec_view = |r: &MatchRecord| match r.gt {
        Some(g) => gt_views[r.frame][g],
        None => view_of(&preds[r.frame][r.pred].center, &rigs[r.frame]),
    };
    let buckets: Vec<Option<ViewLabel>> = ViewLabel::ALL
        .iter()
        .map(|v| Some(*v))
        .chain(std::iter::once(None))
        .collect();
    buckets
        .into_iter()
        .filter_map(|bucket| {
            let recs: Vec<MatchRecord> = records.iter().copied().filter(|r| rec_view(r) == bucket).collect();
            let mut counts = [0usize; 3];
            for (f, g) in gts.iter().enumerate() {
                for (i, b) in g.iter().enumerate() {
                    if gt_views[f][i] == bucket {
                        counts[b.class.index()] += 1;
                    }
                }
            }
            let present = rigs.iter().any(|r| bucket.is_none_or(|v| r.camera(v).is_some()));
            if !present || (bucket.is_none() && recs.is_empty() && counts.iter().all(|c| *c == 0)) {
                return None;
            }
            let classes = class_reports(&recs, counts);
            Some(ViewReport {
                view: bucket,
                map: mean_defined(classes.iter().map(|c| c.ap)),
                mapl: mean_defined(classes.iter().map(|c| c.apl)),
                classes,
            })
        })
        .collect()
}

/// Pools several models' boxes and runs per-class greedy rotated NMS.
/// Ordering and tie-breaking follow `(score desc, model, box index)`.
pub fn ensemble_merge(model_outputs: &[Vec<Box3D>], iou_threshold: f64) -> Result<Vec<Box3D>> {
    if model_outputs.is_empty() {
        return Err(Error::InvalidConfig("ensemble needs at least one model".into()));
    }
    let mut pooled: Vec<(usize, usize, Box3D)> = model_outputs
        .iter()
        .enumerate()
        .flat_map(|(m, boxes)| boxes.iter().enumerate().map(move |(i, b)| (m, i, *b)))
        .collect();
    pooled.sort_by(|a, b| b.2.score.total_cmp(&a.2.score).then((a.0, a.1).cmp(&(b.0, b.1))));
    let boxes: Vec<Box3D> = pooled.iter().map(|p| p.2).collect();
    let mut keep = vec![false; boxes.len()];
    for class in ObjectClass::ALL {
        let order: Vec<usize> = (0..boxes.len()).filter(|&i| boxes[i].class == class).collect();
        for k in rotated_nms(&boxes, &order, iou_threshold) {
            keep[k] = true;
        }
    }
    Ok(boxes
        .into_iter()
        .zip(keep)
        .filter_map(|(b, k)| k.then_some(b))
        .collect())
}

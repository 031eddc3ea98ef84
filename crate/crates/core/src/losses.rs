//! Detection losses with analytic gradients.
//!
//! Anchor head: `L = L_cls + λ_reg·L_reg + λ_dir·L_dir` with focal
//! classification, smooth-L1 box regression and direction cross entropy.
//! Center head: `L = L_key + λ_reg·L_reg` with a gaussian focal keypoint loss
//! and L1 regression.

use serde::{Deserialize, Serialize};

use crate::anchor::{AnchorHeadOutput, AnchorLabel, AssignmentResult};
use crate::boxes::{Box3D, ObjectClass};
use crate::center::{CenterTargets, Heatmap, RegressionMap};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// Default smooth-L1 transition point.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub anchor_reg: f64,
    pub anchor_dir: f64,
    pub center_reg: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            anchor_reg: 2.0,
            anchor_dir: 0.2,
            center_reg: 0.25,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.anchor_reg,
            self.anchor_dir,
            self.center_reg,
            self.focal_alpha,
            self.focal_gamma,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Clamps `p` into the open unit interval; the flag reports whether it moved.
fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (c, c != p)
}

/// Sigmoid focal loss `−α_t (1 − p_t)^γ ln p_t` and its derivative in `p`.
/// The derivative is zero where clamping is active.
pub fn focal_loss(p: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let (p, clamped) = clamp_prob(p);
    let (pt, alpha_t, sign) = if positive {
        (p, alpha, 1.0)
    } else {
        (1.0 - p, 1.0 - alpha, -1.0)
    };
    let q = 1.0 - pt;
    let log_pt = pt.ln();
    let value = -alpha_t * q.powf(gamma) * log_pt;
    if clamped {
        return (value, 0.0);
    }
    // d/dp_t of −α_t q^γ ln p_t with q = 1 − p_t
    let dpt = alpha_t * (gamma * q.powf(gamma - 1.0) * log_pt - q.powf(gamma) / pt);
    (value, sign * dpt)
}

/// `0.5·x²/β` inside `|x| < β`, `|x| − 0.5β` outside.
pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

/// Two-way softmax cross entropy and its gradient in the logits.
pub fn cross_entropy_dir(logits: [f64; 2], bin: usize) -> (f64, [f64; 2]) {
    let hi = logits[0].max(logits[1]);
    let lo = logits[0].min(logits[1]);
    // log-sum-exp as hi + ln(1 + e^(lo − hi)), kept separate from the
    // subtraction so small losses do not drown in the magnitude of `hi`
    let value = (hi - logits[bin]) + (lo - hi).exp().ln_1p();
    let e0 = (logits[0] - hi).exp();
    let e1 = (logits[1] - hi).exp();
    let z = e0 + e1;
    let mut grad = [e0 / z, e1 / z];
    grad[bin] -= 1.0;
    (value, grad)
}

/// Penalty-reduced focal loss over a heatmap, normalised by the number of
/// cells whose target is exactly 1 (at least one). Returns the value and
/// the gradient with respect to each prediction.
pub fn gaussian_focal(pred: &[f64], target: &[f64], alpha: f64, beta: f64) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let num_pos = target.iter().filter(|t| **t == 1.0).count().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let (p, clamped) = clamp_prob(p);
        let (v, g) = if t == 1.0 {
            let q = 1.0 - p;
            let v = -q.powf(alpha) * p.ln();
            let g = alpha * q.powf(alpha - 1.0) * p.ln() - q.powf(alpha) / p;
            (v, g)
        } else {
            let w = (1.0 - t).powf(beta);
            let l1 = (1.0 - p).ln();
            let v = -w * p.powf(alpha) * l1;
            let g = -w * (alpha * p.powf(alpha - 1.0) * l1 - p.powf(alpha) / (1.0 - p));
            (v, g)
        };
        total += v;
        grad.push(if clamped { 0.0 } else { g / num_pos });
    }
    Ok((total / num_pos, grad))
}

/// Normalised anchor-head loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AnchorLossParts {
    pub cls: f64,
    pub reg: f64,
    pub dir: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CenterLossParts {
    pub keypoint: f64,
    pub reg: f64,
}

pub fn total_anchor_loss(parts: &AnchorLossParts, w: &LossWeights) -> f64 {
    parts.cls + w.anchor_reg * parts.reg + w.anchor_dir * parts.dir
}

pub fn total_center_loss(parts: &CenterLossParts, w: &LossWeights) -> f64 {
    parts.keypoint + w.center_reg * parts.reg
}

/// Anchor-head loss terms for predictions against an assignment.
/// Classification sums over non-ignored anchors and all classes and divides
/// by the positive count (at least one); regression and direction terms
/// average over positives.
pub fn anchor_head_loss(
    output: &AnchorHeadOutput,
    assignment: &AssignmentResult,
    anchors: &[Box3D],
    w: &LossWeights,
) -> Result<AnchorLossParts> {
    let n = anchors.len();
    if assignment.labels.len() != n || output.scores.len() != n * ObjectClass::COUNT {
        return Err(Error::ShapeMismatch("assignment and outputs disagree on anchor count".into()));
    }
    let num_pos = assignment.num_positive().max(1) as f64;
    let mut cls = 0.0;
    for (a, label) in assignment.labels.iter().enumerate() {
        if *label == AnchorLabel::Ignored {
            continue;
        }
        for k in 0..ObjectClass::COUNT {
            let positive = matches!(label, AnchorLabel::Positive(_)) && anchors[a].class.index() == k;
            cls += focal_loss(output.scores[a * ObjectClass::COUNT + k], positive, w.focal_alpha, w.focal_gamma).0;
        }
    }
    let mut reg = 0.0;
    let mut dir = 0.0;
    for p in &assignment.positives {
        let pred = output.deltas[p.anchor].to_array();
        let target = p.delta.to_array();
        reg += pred
            .iter()
            .zip(target)
            .map(|(a, b)| smooth_l1(a - b, SMOOTH_L1_BETA).0)
            .sum::<f64>();
        dir += cross_entropy_dir(output.dir_logits[p.anchor], p.dir_bin).0;
    }
    Ok(AnchorLossParts {
        cls: cls / num_pos,
        reg: reg / num_pos,
        dir: dir / num_pos,
    })
}

/// Center-head loss terms: gaussian focal keypoint loss and L1 regression
/// averaged over annotated objects.
pub fn center_head_loss(
    heatmap: &Heatmap,
    regression: &RegressionMap,
    targets: &CenterTargets,
) -> Result<CenterLossParts> {
    if heatmap.dims() != targets.heatmap.dims() || regression.dims() != targets.heatmap.dims() {
        return Err(Error::ShapeMismatch("predicted maps do not match targets".into()));
    }
    let (keypoint, _) = gaussian_focal(heatmap.data(), targets.heatmap.data(), 2.0, 4.0)?;
    let mut reg = 0.0;
    for o in &targets.objects {
        let pred = regression.cell(o.cell.0, o.cell.1);
        reg += pred.iter().zip(o.values).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    Ok(CenterLossParts {
        keypoint,
        reg: reg / targets.objects.len().max(1) as f64,
    })
}

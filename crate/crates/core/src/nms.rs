//! Greedy suppression in BEV: rotated-IoU NMS and circle NMS.

use crate::boxes::{bev_iou, center_distance_bev, Box3D};

/// Indices sorted by descending score, ties by ascending index.
pub fn score_order(boxes: &[Box3D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
    order
}

/// Greedy rotated-BEV NMS over `order`. A candidate survives when its IoU
/// with every already kept box is at most `iou_threshold`. Returns kept
/// indices in visiting order.
pub fn rotated_nms(boxes: &[Box3D], order: &[usize], iou_threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &i in order {
        if kept
            .iter()
            .all(|&k| bev_iou(&boxes[i], &boxes[k]) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

/// Greedy circle NMS: drops candidates whose BEV center lies closer than
/// `radius` to an already kept box.
pub fn circle_nms(boxes: &[Box3D], order: &[usize], radius: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &i in order {
        if kept
            .iter()
            .all(|&k| center_distance_bev(&boxes[i], &boxes[k]) >= radius)
        {
            kept.push(i);
        }
    }
    kept
}

//! COCO-style average precision and recall at IoU 0.5.

use serde::{Deserialize, Serialize};

use super::{iou, Detection, GroundTruth};
use crate::error::{Error, Result};

/// IoU thresholds 0.50, 0.55, ..., 0.95, computed exactly as `(50 + 5i) / 100`.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// AP averaged over the ten IoU thresholds and every class with annotations.
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Fraction of annotated objects matched at IoU 0.5.
    pub r50: f64,
}

struct ClassEval {
    ap: f64,
    matched: usize,
}

/// Greedy matching of one class at one threshold, detections consumed by
/// descending score; each detection takes the unmatched annotation of
/// highest IoU at or above `thr`.
fn eval_class(dets: &[Vec<Detection>], gts: &[GroundTruth], class: usize, thr: f64, npos: usize) -> ClassEval {
    let mut cands: Vec<(usize, &Detection)> = Vec::new();
    for (img, ds) in dets.iter().enumerate() {
        cands.extend(ds.iter().filter(|d| d.class_id == class).map(|d| (img, d)));
    }
    cands.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.objects.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(cands.len());
    let mut precision = Vec::with_capacity(cands.len());
    for (img, d) in cands {
        let mut best: Option<(usize, f64)> = None;
        for (j, (c, b)) in gts[img].objects.iter().enumerate() {
            if *c != class || used[img][j] {
                continue;
            }
            let v = iou(&d.bbox, b);
            if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, _)) => {
                used[img][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        if let Some(i) = recall.iter().position(|&v| v >= level) {
            sum += precision[i];
        }
    }
    ClassEval { ap: sum / RECALL_POINTS as f64, matched: tp }
}

/// Returns `None` when there are no annotations at all (metrics undefined).
pub fn evaluate(dets: &[Vec<Detection>], gts: &[GroundTruth], num_classes: usize) -> Result<Option<Metrics>> {
    if dets.len() != gts.len() {
        return Err(Error::invalid("evaluate", format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    let total_gt: usize = gts.iter().map(GroundTruth::len).sum();
    if total_gt == 0 {
        return Ok(None);
    }
    let mut per_thr = [0.0f64; IOU_THRESHOLDS.len()];
    let mut classes = 0usize;
    let mut matched50 = 0usize;
    for class in 0..num_classes {
        let npos = gts.iter().flat_map(|g| &g.objects).filter(|(c, _)| *c == class).count();
        if npos == 0 {
            continue;
        }
        classes += 1;
        for (ti, &thr) in IOU_THRESHOLDS.iter().enumerate() {
            let e = eval_class(dets, gts, class, thr, npos);
            per_thr[ti] += e.ap;
            if ti == 0 {
                matched50 += e.matched;
            }
        }
    }
    if classes == 0 {
        return Err(Error::invalid("evaluate", format!("annotations use class ids outside 0..{num_classes}")));
    }
    let per_thr = per_thr.map(|v| v / classes as f64);
    Ok(Some(Metrics {
        map: per_thr.iter().sum::<f64>() / per_thr.len() as f64,
        ap50: per_thr[0],
        ap75: per_thr[5],
        r50: matched50 as f64 / total_gt as f64,
    }))
}

/// One detection in the COCO results format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Category ids are class ids plus one.
pub fn to_coco_results(image_ids: &[u64], dets: &[Vec<Detection>]) -> Vec<CocoResult> {
    image_ids
        .iter()
        .zip(dets)
        .flat_map(|(&image_id, ds)| {
            ds.iter().map(move |d| CocoResult {
                image_id,
                category_id: d.class_id as u64 + 1,
                bbox: d.bbox.to_xywh(),
                score: d.score,
            })
        })
        .collect()
}

use serde::{Deserialize, Serialize};

use super::{anchor_point, iou, BBox, Detection, LevelOutput};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Graph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Candidates need a score strictly above this.
    pub score_thr: f64,
    /// Boxes overlapping a kept box of the same class by more than this are dropped.
    pub iou_thr: f64,
    pub pre_nms_top_k: usize,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { score_thr: 0.05, iou_thr: 0.6, pre_nms_top_k: 1000, max_detections: 100 }
    }
}

fn by_score_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy NMS: visit boxes by descending score and keep each one whose IoU
/// with every kept box is at most `iou_thr`. Returns kept indices in visit order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thr: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "one score per box");
    let mut keep: Vec<usize> = Vec::new();
    for i in by_score_desc(scores) {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thr) {
            keep.push(i);
        }
    }
    keep
}

/// Decodes every location into per-class candidates, then applies
/// class-wise NMS. Returns detections per image, best first.
pub fn decode_and_nms<T: Scalar>(
    g: &Graph<'_, T>,
    outputs: &[LevelOutput],
    image: (usize, usize),
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<Detection>>> {
    if !(0.0..=1.0).contains(&cfg.score_thr) || !(0.0..=1.0).contains(&cfg.iou_thr) {
        return Err(Error::invalid("decode_and_nms", "thresholds must lie in [0, 1]"));
    }
    let Some(first) = outputs.first() else {
        return Ok(Vec::new());
    };
    let (n, k, _, _) = g.value(first.cls).dims4()?;
    let (img_h, img_w) = (image.0 as f64, image.1 as f64);
    let mut result = Vec::with_capacity(n);
    for b in 0..n {
        let mut cand: Vec<Detection> = Vec::new();
        for o in outputs {
            let (_, _, h, w) = g.value(o.cls).dims4()?;
            let hw = h * w;
            let logits = g.value(o.cls).data();
            let dists = g.value(o.ltrb).data();
            let s = o.stride as f64;
            for loc in 0..hw {
                let (px, py) = anchor_point(loc / w, loc % w, o.stride);
                let d = |j: usize| dists[(b * 4 + j) * hw + loc].to_f64_lossy() * s;
                let bbox = BBox::new(px - d(0), py - d(1), px + d(2), py + d(3)).clip(img_w, img_h);
                for c in 0..k {
                    let z = logits[(b * k + c) * hw + loc].to_f64_lossy();
                    let score = 1.0 / (1.0 + (-z).exp());
                    if score > cfg.score_thr && bbox.is_valid() {
                        cand.push(Detection { class_id: c, score, bbox });
                    }
                }
            }
        }
        let scores: Vec<f64> = cand.iter().map(|d| d.score).collect();
        let mut order = by_score_desc(&scores);
        order.truncate(cfg.pre_nms_top_k);
        let cand: Vec<Detection> = order.into_iter().map(|i| cand[i]).collect();

        let mut kept: Vec<Detection> = Vec::new();
        for c in 0..k {
            let of_class: Vec<&Detection> = cand.iter().filter(|d| d.class_id == c).collect();
            let boxes: Vec<BBox> = of_class.iter().map(|d| d.bbox).collect();
            let scores: Vec<f64> = of_class.iter().map(|d| d.score).collect();
            kept.extend(nms(&boxes, &scores, cfg.iou_thr).into_iter().map(|i| *of_class[i]));
        }
        kept.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class_id.cmp(&b.class_id)));
        kept.truncate(cfg.max_detections);
        result.push(kept);
    }
    Ok(result)
}

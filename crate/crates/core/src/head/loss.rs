//! Centre-sampling assignment, sigmoid focal loss and GIoU box loss.
//!
//! The loss is a single fused node: its value and its gradient with respect
//! to every logit and distance are computed here in `f64`, then handed to
//! the tape.

use serde::{Deserialize, Serialize};

use super::{anchor_point, GroundTruth, LevelOutput};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Positives lie within this many strides of the object centre.
    pub center_radius: f64,
    /// An object goes to the first level whose stride times this factor
    /// covers its longer side.
    pub level_factor: f64,
    pub reg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.25, gamma: 2.0, center_radius: 1.5, level_factor: 8.0, reg_weight: 1.0 }
    }
}

/// Per level, per location (row-major), the index of the assigned object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub levels: Vec<Vec<Option<usize>>>,
}

impl Assignment {
    pub fn num_positive(&self) -> usize {
        self.levels.iter().flatten().filter(|a| a.is_some()).count()
    }
}

/// Assigns each object to one level by size, then marks the locations of
/// that level whose anchor lies inside the box and within the centre
/// radius. An object with no such location takes the location nearest its
/// centre. Locations claimed twice go to the smaller object.
pub fn assign(gt: &GroundTruth, extents: &[(usize, usize)], strides: &[usize], cfg: &LossConfig) -> Assignment {
    let mut levels: Vec<Vec<Option<usize>>> = extents.iter().map(|(h, w)| vec![None; h * w]).collect();
    let claim = |levels: &mut Vec<Vec<Option<usize>>>, level: usize, loc: usize, j: usize| {
        let slot = &mut levels[level][loc];
        match *slot {
            Some(other) if gt.objects[other].1.area() <= gt.objects[j].1.area() => {}
            _ => *slot = Some(j),
        }
    };
    for (j, (_, b)) in gt.objects.iter().enumerate() {
        let side = b.max_side();
        let level = strides.iter().position(|&s| side <= cfg.level_factor * s as f64).unwrap_or(strides.len() - 1);
        let (h, w) = extents[level];
        let s = strides[level];
        let radius = cfg.center_radius * s as f64;
        let (cx, cy) = b.center();
        let mut any = false;
        for row in 0..h {
            for col in 0..w {
                let (px, py) = anchor_point(row, col, s);
                let inside = px > b.x1 && px < b.x2 && py > b.y1 && py < b.y2;
                if inside && (px - cx).abs() <= radius && (py - cy).abs() <= radius {
                    claim(&mut levels, level, row * w + col, j);
                    any = true;
                }
            }
        }
        if !any && h > 0 && w > 0 {
            let col = ((cx / s as f64).floor().max(0.0) as usize).min(w - 1);
            let row = ((cy / s as f64).floor().max(0.0) as usize).min(h - 1);
            claim(&mut levels, level, row * w + col, j);
        }
    }
    Assignment { levels }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sigmoid focal loss of one logit and its derivative.
pub fn focal_term(z: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = 1.0 / (1.0 + (-z).exp());
    if positive {
        let log_p = -softplus(-z);
        let q = 1.0 - p;
        let value = -alpha * q.powf(gamma) * log_p;
        let grad = alpha * q.powf(gamma) * (gamma * p * log_p - q);
        (value, grad)
    } else {
        let log_q = -softplus(z);
        let value = -(1.0 - alpha) * p.powf(gamma) * log_q;
        let grad = (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_q);
        (value, grad)
    }
}

/// `1 - GIoU` between two boxes sharing an anchor point, each given by its
/// distances (left, top, right, bottom) from that point, and the gradient
/// with respect to the predicted distances.
pub fn giou_loss(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let [l, t, r, b] = pred;
    let [lt, tt, rt, bt] = target;
    let area_p = (l + r) * (t + b);
    let area_g = (lt + rt) * (tt + bt);
    let iw = l.min(lt) + r.min(rt);
    let ih = t.min(tt) + b.min(bt);
    let (iwc, ihc) = (iw.max(0.0), ih.max(0.0));
    let inter = iwc * ihc;
    let union = area_p + area_g - inter;
    let ew = l.max(lt) + r.max(rt);
    let eh = t.max(tt) + b.max(bt);
    let enclose = ew * eh;
    let value = 2.0 - inter / union - union / enclose;

    // dL = dA_p (I/U^2 - 1/E) + dI (1/E - 1/U - I/U^2) + dE U/E^2
    let c_area = inter / (union * union) - 1.0 / enclose;
    let c_inter = 1.0 / enclose - 1.0 / union - inter / (union * union);
    let c_enc = union / (enclose * enclose);
    let overlap = iw > 0.0 && ih > 0.0;
    let side = |p: f64, q: f64, area_d: f64, inter_d: f64, enc_d: f64| -> f64 {
        let di = if overlap && p <= q { inter_d } else { 0.0 };
        let de = if p > q { enc_d } else { 0.0 };
        area_d * c_area + di * c_inter + de * c_enc
    };
    let grad = [
        side(l, lt, t + b, ihc, eh),
        side(t, tt, l + r, iwc, ew),
        side(r, rt, t + b, ihc, eh),
        side(b, bt, l + r, iwc, ew),
    ];
    (value, grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub cls: f64,
    pub reg: f64,
    pub num_pos: usize,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.cls + self.reg
    }
}

/// Focal loss over every logit plus GIoU loss over positive locations,
/// both normalised by the number of positives (at least one).
pub fn assign_and_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    outputs: &[LevelOutput],
    gts: &[GroundTruth],
    cfg: &LossConfig,
) -> Result<(Var, LossParts)> {
    if outputs.is_empty() {
        return Err(Error::invalid("assign_and_loss", "no prediction levels"));
    }
    let (n, k, _, _) = g.value(outputs[0].cls).dims4()?;
    if n == 0 || gts.len() != n {
        return Err(Error::invalid("assign_and_loss", format!("batch of {n} images but {} annotations", gts.len())));
    }
    let mut extents = Vec::with_capacity(outputs.len());
    for o in outputs {
        let (cn, ck, h, w) = g.value(o.cls).dims4()?;
        if (cn, ck) != (n, k) || g.shape(o.ltrb) != [n, 4, h, w] {
            return Err(Error::shape("assign_and_loss", format!("level {} has {:?} / {:?}", o.stride, g.shape(o.cls), g.shape(o.ltrb))));
        }
        extents.push((h, w));
    }
    let strides: Vec<usize> = outputs.iter().map(|o| o.stride).collect();
    let assignments: Vec<Assignment> = gts.iter().map(|gt| assign(gt, &extents, &strides, cfg)).collect();
    let num_pos: usize = assignments.iter().map(Assignment::num_positive).sum();
    let norm = 1.0 / num_pos.max(1) as f64;

    let mut cls_sum = 0.0;
    let mut reg_sum = 0.0;
    let mut cls_grads = Vec::with_capacity(outputs.len());
    let mut reg_grads = Vec::with_capacity(outputs.len());
    for (li, (o, &(h, w))) in outputs.iter().zip(&extents).enumerate() {
        let logits = g.value(o.cls).data();
        let dists = g.value(o.ltrb).data();
        let hw = h * w;
        let mut gc = vec![T::zero(); logits.len()];
        let mut gr = vec![T::zero(); dists.len()];
        let s = o.stride as f64;
        for (b, (gt, asg)) in gts.iter().zip(&assignments).enumerate() {
            for loc in 0..hw {
                let target = asg.levels[li][loc].map(|j| gt.objects[j]);
                for c in 0..k {
                    let idx = (b * k + c) * hw + loc;
                    let positive = matches!(target, Some((cls, _)) if cls == c);
                    let (v, d) = focal_term(logits[idx].to_f64_lossy(), positive, cfg.alpha, cfg.gamma);
                    cls_sum += v;
                    gc[idx] = T::lit(d * norm);
                }
                if let Some((_, bx)) = target {
                    let (px, py) = anchor_point(loc / w, loc % w, o.stride);
                    let at = |j: usize| (b * 4 + j) * hw + loc;
                    let pred = [0, 1, 2, 3].map(|j| dists[at(j)].to_f64_lossy() * s);
                    let goal = [px - bx.x1, py - bx.y1, bx.x2 - px, bx.y2 - py];
                    let (v, d) = giou_loss(pred, goal);
                    reg_sum += v;
                    for j in 0..4 {
                        gr[at(j)] = T::lit(d[j] * s * norm * cfg.reg_weight);
                    }
                }
            }
        }
        cls_grads.push(gc);
        reg_grads.push(gr);
    }
    let parts = LossParts { cls: cls_sum * norm, reg: reg_sum * norm * cfg.reg_weight, num_pos };
    if !parts.total().is_finite() {
        return Err(Error::NonFinite("detection loss"));
    }
    let mut inputs = Vec::with_capacity(2 * outputs.len());
    let mut local = Vec::with_capacity(2 * outputs.len());
    for (o, (gc, gr)) in outputs.iter().zip(cls_grads.into_iter().zip(reg_grads)) {
        inputs.push(o.cls);
        local.push(gc);
        inputs.push(o.ltrb);
        local.push(gr);
    }
    let loss = g.fused_scalar(inputs, T::lit(parts.total()), local)?;
    Ok((loss, parts))
}

//! Anchor-free dense detection head with focal and GIoU losses, box
//! decoding with class-wise NMS, and COCO-style evaluation.

mod boxes;
mod decode;
mod loss;
mod metrics;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::FlopCount;
use crate::scalar::Scalar;
use crate::tensor::{ConvNormAct, ConvParams, ConvSpec, Graph, ParamBuilder, ParamStore, Var};

pub use boxes::{iou, BBox};
pub use decode::{decode_and_nms, nms, DecodeConfig};
pub use loss::{assign, assign_and_loss, focal_term, giou_loss, Assignment, LossConfig, LossParts};
pub use metrics::{evaluate, to_coco_results, CocoResult, Metrics, IOU_THRESHOLDS};

/// Floor added to regressed distances so boxes never degenerate.
pub const LTRB_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Annotated objects of one image as `(class_id, box)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub objects: Vec<(usize, BBox)>,
}

impl GroundTruth {
    pub fn new(objects: Vec<(usize, BBox)>) -> Self {
        GroundTruth { objects }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Width of the shared conv tower.
    pub width: usize,
    /// Initial foreground probability encoded in the classifier bias.
    pub prior: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { width: 64, prior: 0.01 }
    }
}

/// Two 3x3 conv+LN+GeLU layers shared by every level, then 1x1 class and
/// box-distance predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub tower: [ConvNormAct; 2],
    pub cls: ConvParams,
    pub reg: ConvParams,
    pub num_classes: usize,
}

/// Raw predictions for one pyramid level: class logits `[N, K, h, w]` and
/// positive box distances `[N, 4, h, w]` (left, top, right, bottom) in
/// units of the level stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelOutput {
    pub cls: Var,
    pub ltrb: Var,
    pub stride: usize,
}

impl HeadParams {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize, num_classes: usize, cfg: &HeadConfig) -> Self {
        assert!(num_classes > 0, "at least one class");
        let mut sub = pb.sub("head");
        let tower = [
            ConvNormAct::new(&mut sub, "tower0", ConvSpec::k3(channels, cfg.width, 1)),
            ConvNormAct::new(&mut sub, "tower1", ConvSpec::k3(cfg.width, cfg.width, 1)),
        ];
        let cls = ConvParams::new(&mut sub, "cls", ConvSpec::pointwise(cfg.width, num_classes));
        let reg = ConvParams::new(&mut sub, "reg", ConvSpec::pointwise(cfg.width, 4));
        HeadParams { tower, cls, reg, num_classes }
    }

    /// Sets the classifier bias so every initial score equals `prior`.
    pub fn init_prior<T: Scalar>(&self, store: &mut ParamStore<T>, prior: f64) {
        let b = -((1.0 - prior) / prior).ln();
        if let Some(id) = self.cls.bias {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::lit(b));
        }
    }

    pub fn param_count(&self) -> usize {
        self.tower.iter().map(ConvNormAct::param_count).sum::<usize>() + self.cls.param_count() + self.reg.param_count()
    }

    pub fn flops(&self, n: usize, extents: &[(usize, usize)]) -> FlopCount {
        extents
            .iter()
            .map(|&(h, w)| {
                self.tower[0].conv.flops(n, h, w) + self.tower[1].conv.flops(n, h, w) + self.cls.flops(n, h, w) + self.reg.flops(n, h, w)
            })
            .fold(FlopCount::default(), |a, b| a + b)
    }
}

/// Applies the shared head to every pyramid level.
pub fn head_forward<T: Scalar>(g: &mut Graph<'_, T>, pyramid: &[Var], strides: &[usize], p: &HeadParams) -> Result<Vec<LevelOutput>> {
    if pyramid.len() != strides.len() {
        return Err(Error::invalid("head_forward", format!("{} levels but {} strides", pyramid.len(), strides.len())));
    }
    pyramid
        .iter()
        .zip(strides)
        .map(|(&x, &stride)| {
            let mut y = x;
            for layer in &p.tower {
                y = layer.forward(g, y)?;
            }
            let cls = p.cls.forward(g, y)?;
            let reg = p.reg.forward(g, y)?;
            let sp = g.softplus(reg);
            let ltrb = g.add_scalar(sp, LTRB_FLOOR);
            Ok(LevelOutput { cls, ltrb, stride })
        })
        .collect()
}

/// Anchor point of location `(row, col)` at `stride`: the cell centre.
pub fn anchor_point(row: usize, col: usize, stride: usize) -> (f64, f64) {
    ((col as f64 + 0.5) * stride as f64, (row as f64 + 0.5) * stride as f64)
}

#[cfg(test)]
mod tests;

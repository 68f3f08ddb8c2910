//! Small strided convolutional feature extractor standing in for a
//! pretrained backbone.

use crate::error::{Error, Result};
use crate::flops::FlopCount;
use crate::scalar::Scalar;
use crate::tensor::{ConvNormAct, ConvSpec, Graph, ParamBuilder, Var};

/// Strides of the four backbone outputs.
pub const BACKBONE_STRIDES: [usize; 4] = [4, 8, 16, 32];
/// Input extents must be multiples of the deepest pyramid stride.
pub const INPUT_MULTIPLE: usize = 64;

/// Four stages of conv pairs. Stage 1 is two stride-2 3x3 convs (stride 4);
/// later stages are a stride-2 3x3 conv followed by a 1x1 conv. Every conv
/// is followed by layer norm and GeLU.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub widths: [usize; 4],
    pub stages: Vec<[ConvNormAct; 2]>,
}

impl BackboneParams {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, widths: [usize; 4]) -> Self {
        let mut sub = pb.sub("backbone");
        let mut stages = Vec::with_capacity(4);
        let stem = (widths[0] / 2).max(1);
        stages.push([
            ConvNormAct::new(&mut sub, "stage1.conv1", ConvSpec::k3(3, stem, 2)),
            ConvNormAct::new(&mut sub, "stage1.conv2", ConvSpec::k3(stem, widths[0], 2)),
        ]);
        for i in 1..4 {
            let s = i + 1;
            stages.push([
                ConvNormAct::new(&mut sub, &format!("stage{s}.conv1"), ConvSpec::k3(widths[i - 1], widths[i], 2)),
                ConvNormAct::new(&mut sub, &format!("stage{s}.conv2"), ConvSpec::pointwise(widths[i], widths[i])),
            ]);
        }
        BackboneParams { widths, stages }
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().flatten().map(ConvNormAct::param_count).sum()
    }

    pub fn flops(&self, n: usize, h: usize, w: usize) -> FlopCount {
        let (mut h, mut w) = (h, w);
        let mut total = FlopCount::default();
        for stage in &self.stages {
            for layer in stage {
                total += layer.conv.flops(n, h, w);
                h = layer.conv.out_extent(h);
                w = layer.conv.out_extent(w);
            }
        }
        total
    }
}

pub fn check_input_extent(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
        let pad = |v: usize| v.div_ceil(INPUT_MULTIPLE).max(1) * INPUT_MULTIPLE;
        return Err(Error::invalid(
            "toy_backbone",
            format!("input {h}x{w} is not a multiple of {INPUT_MULTIPLE}; pad to {}x{}", pad(h), pad(w)),
        ));
    }
    Ok(())
}

/// Returns features at strides 4, 8, 16 and 32.
pub fn toy_backbone<T: Scalar>(g: &mut Graph<'_, T>, image: Var, p: &BackboneParams) -> Result<Vec<Var>> {
    let (_, c, h, w) = g.value(image).dims4()?;
    if c != 3 {
        return Err(Error::shape("toy_backbone", format!("expected 3 input channels, got {c}")));
    }
    check_input_extent(h, w)?;
    let mut x = image;
    let mut out = Vec::with_capacity(4);
    for stage in &p.stages {
        for layer in stage {
            x = layer.forward(g, x)?;
        }
        out.push(x);
    }
    Ok(out)
}

//! Residual bottlenecks and the cross-stage-partial block that stacks them.

use serde::{Deserialize, Serialize};

use crate::attention::{transformer_layer, AttentionConfig, TransformerLayerParams, Variant};
use crate::error::{Error, Result};
use crate::flops::FlopCount;
use crate::scalar::Scalar;
use crate::tensor::{ConvNormAct, ConvParams, ConvSpec, Graph, ParamBuilder, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    Conv,
    Sa,
}

/// A residual bottleneck over `C` channels with a `C/2` inner width.
#[derive(Debug, Clone, PartialEq)]
pub enum BottleneckParams {
    /// `x + conv3x3(gelu(LN(conv1x1(x))))`
    Conv { reduce: ConvNormAct, expand: ConvParams },
    /// `x + up1x1(transformer(down1x1(x)))`
    Sa { down: ConvParams, layer: TransformerLayerParams, up: ConvParams },
}

impl BottleneckParams {
    pub fn conv<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let inner = (channels / 2).max(1);
        let mut sub = pb.sub(name);
        BottleneckParams::Conv {
            reduce: ConvNormAct::new(&mut sub, "reduce", ConvSpec::pointwise(channels, inner)),
            expand: ConvParams::new(&mut sub, "expand", ConvSpec::k3(inner, channels, 1)),
        }
    }

    pub fn sa<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, cfg: &AttentionConfig, window: usize) -> Self {
        let inner = (channels / 2).max(1);
        let mut sub = pb.sub(name);
        BottleneckParams::Sa {
            down: ConvParams::new(&mut sub, "down", ConvSpec::pointwise(channels, inner)),
            layer: TransformerLayerParams::new(&mut sub, "layer", inner, cfg, window),
            up: ConvParams::new(&mut sub, "up", ConvSpec::pointwise(inner, channels)),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            BottleneckParams::Conv { reduce, .. } => reduce.conv.cin,
            BottleneckParams::Sa { down, .. } => down.cin,
        }
    }

    /// The projection whose zeroing turns the bottleneck into the identity.
    pub fn output_projection(&self) -> &ConvParams {
        match self {
            BottleneckParams::Conv { expand, .. } => expand,
            BottleneckParams::Sa { up, .. } => up,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            BottleneckParams::Conv { reduce, expand } => reduce.param_count() + expand.param_count(),
            BottleneckParams::Sa { down, layer, up } => down.param_count() + layer.param_count() + up.param_count(),
        }
    }

    pub fn flops(&self, cfg: &AttentionConfig, n: usize, h: usize, w: usize) -> Result<FlopCount> {
        Ok(match self {
            BottleneckParams::Conv { reduce, expand } => reduce.conv.flops(n, h, w) + expand.flops(n, h, w),
            BottleneckParams::Sa { down, layer, up } => down.flops(n, h, w) + layer.flops(cfg, n, h, w)? + up.flops(n, h, w),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, cfg: &AttentionConfig) -> Result<Var> {
        match self {
            BottleneckParams::Conv { .. } => conv_bottleneck(g, x, self),
            BottleneckParams::Sa { .. } => sa_bottleneck(g, x, self, cfg),
        }
    }
}

fn check_channels<T: Scalar>(g: &Graph<'_, T>, x: Var, want: usize, op: &'static str) -> Result<()> {
    let c = g.value(x).dims4()?.1;
    if c != want {
        return Err(Error::shape(op, format!("{c} input channels, block expects {want}")));
    }
    Ok(())
}

pub fn conv_bottleneck<T: Scalar>(g: &mut Graph<'_, T>, x: Var, p: &BottleneckParams) -> Result<Var> {
    let BottleneckParams::Conv { reduce, expand } = p else {
        return Err(Error::invalid("conv_bottleneck", "parameters belong to a self-attention bottleneck"));
    };
    check_channels(g, x, reduce.conv.cin, "conv_bottleneck")?;
    let y = reduce.forward(g, x)?;
    let y = expand.forward(g, y)?;
    g.add(x, y)
}

pub fn sa_bottleneck<T: Scalar>(g: &mut Graph<'_, T>, x: Var, p: &BottleneckParams, cfg: &AttentionConfig) -> Result<Var> {
    let BottleneckParams::Sa { down, layer, up } = p else {
        return Err(Error::invalid("sa_bottleneck", "parameters belong to a convolutional bottleneck"));
    };
    check_channels(g, x, down.cin, "sa_bottleneck")?;
    let y = down.forward(g, x)?;
    let y = transformer_layer(g, y, layer, cfg)?;
    let y = up.forward(g, y)?;
    g.add(x, y)
}

/// Channel-split block: the first half passes through one pointwise conv,
/// the second half through `N` bottlenecks, and a pointwise merge fuses both.
#[derive(Debug, Clone, PartialEq)]
pub struct CspBlockParams {
    pub channels: usize,
    pub kind: BlockKind,
    pub branch_a: ConvParams,
    pub bottlenecks: Vec<BottleneckParams>,
    pub merge: ConvParams,
}

impl CspBlockParams {
    /// `window` is only used by self-attention bottlenecks.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        cout: usize,
        depth: usize,
        kind: BlockKind,
        cfg: &AttentionConfig,
        window: usize,
    ) -> Self {
        assert!(channels >= 2 && channels.is_multiple_of(2), "{name}: CSP input width must be even, got {channels}");
        let half = channels / 2;
        let mut sub = pb.sub(name);
        let branch_a = ConvParams::new(&mut sub, "branch_a", ConvSpec::pointwise(half, half));
        let bottlenecks = (0..depth)
            .map(|i| {
                let label = format!("bottleneck{i}");
                match kind {
                    BlockKind::Conv => BottleneckParams::conv(&mut sub, &label, half),
                    BlockKind::Sa => BottleneckParams::sa(&mut sub, &label, half, cfg, window),
                }
            })
            .collect();
        let merge = ConvParams::new(&mut sub, "merge", ConvSpec::pointwise(channels, cout));
        CspBlockParams { channels, kind, branch_a, bottlenecks, merge }
    }

    pub fn cout(&self) -> usize {
        self.merge.cout
    }

    pub fn param_count(&self) -> usize {
        self.branch_a.param_count() + self.bottlenecks.iter().map(BottleneckParams::param_count).sum::<usize>() + self.merge.param_count()
    }

    pub fn flops(&self, cfg: &AttentionConfig, n: usize, h: usize, w: usize) -> Result<FlopCount> {
        let mut total = self.branch_a.flops(n, h, w) + self.merge.flops(n, h, w);
        for (i, b) in self.bottlenecks.iter().enumerate() {
            total += b.flops(&layer_config(cfg, i), n, h, w)?;
        }
        Ok(total)
    }

    /// Zeroes every bottleneck's output projection.
    pub fn zero_bottleneck_outputs<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for b in &self.bottlenecks {
            b.output_projection().zero(store);
        }
    }
}

/// Configuration seen by the `index`-th bottleneck: with shifting enabled,
/// windows alternate between unshifted and shifted.
pub fn layer_config(cfg: &AttentionConfig, index: usize) -> AttentionConfig {
    let mut c = cfg.clone();
    c.shift = cfg.shift && cfg.variant == Variant::LocalWindow && index % 2 == 1;
    c
}

pub fn csp_block<T: Scalar>(g: &mut Graph<'_, T>, x: Var, p: &CspBlockParams, cfg: &AttentionConfig) -> Result<Var> {
    let c = g.value(x).dims4()?.1;
    if c % 2 != 0 {
        return Err(Error::shape("csp_block", format!("cannot split {c} channels in half")));
    }
    check_channels(g, x, p.channels, "csp_block")?;
    let (a, b) = g.split_channels(x, c / 2)?;
    let a = p.branch_a.forward(g, a)?;
    let mut b = b;
    for (i, bottleneck) in p.bottlenecks.iter().enumerate() {
        b = bottleneck.forward(g, b, &layer_config(cfg, i))?;
    }
    let y = g.concat_channels(a, b)?;
    p.merge.forward(g, y)
}

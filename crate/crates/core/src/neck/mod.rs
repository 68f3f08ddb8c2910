//! Feature pyramid necks: the attention-augmented path-aggregation pyramid,
//! a convolution-only CSP variant, and a plain top-down FPN baseline.

pub mod backbone;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, Variant, WindowSize};
use crate::blocks::{csp_block, BlockKind, CspBlockParams};
use crate::error::{Error, Result};
use crate::flops::FlopCount;
use crate::scalar::Scalar;
use crate::tensor::{ConvParams, ConvSpec, Graph, ParamBuilder, ParamStore, Var};
pub use backbone::{toy_backbone, BackboneParams, BACKBONE_STRIDES, INPUT_MULTIPLE};

/// Strides of the five pyramid outputs.
pub const PYRAMID_STRIDES: [usize; 5] = [4, 8, 16, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeckKind {
    /// Path aggregation with self-attention bottlenecks in every CSP block.
    AttnPafpn,
    /// Same topology with convolutional bottlenecks.
    CspPafpn,
    /// Lateral 1x1 convs, top-down sums and 3x3 output convs.
    PlainFpn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeckConfig {
    pub kind: NeckKind,
    /// Compressed width shared by every pyramid level.
    pub channels: usize,
    /// Bottlenecks per CSP block.
    pub depth: usize,
    /// Fields left out of a config file keep the neck defaults below.
    #[serde(deserialize_with = "attention_over_neck_defaults")]
    pub attention: AttentionConfig,
    pub backbone_widths: [usize; 4],
}

impl Default for NeckConfig {
    fn default() -> Self {
        NeckConfig {
            kind: NeckKind::AttnPafpn,
            channels: 256,
            depth: 3,
            attention: AttentionConfig { resample_small: true, ..AttentionConfig::default() },
            backbone_widths: [64, 128, 256, 512],
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AttentionPatch {
    variant: Option<Variant>,
    window: Option<WindowSize>,
    shift: Option<bool>,
    heads: Option<usize>,
    ffn_ratio: Option<usize>,
    resample_small: Option<bool>,
}

fn attention_over_neck_defaults<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<AttentionConfig, D::Error> {
    let p = AttentionPatch::deserialize(d)?;
    let base = NeckConfig::default().attention;
    Ok(AttentionConfig {
        variant: p.variant.unwrap_or(base.variant),
        window: p.window.unwrap_or(base.window),
        shift: p.shift.unwrap_or(base.shift),
        heads: p.heads.unwrap_or(base.heads),
        ffn_ratio: p.ffn_ratio.unwrap_or(base.ffn_ratio),
        resample_small: p.resample_small.unwrap_or(base.resample_small),
    })
}

impl NeckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || !self.channels.is_multiple_of(2) {
            return Err(Error::Config(format!("neck channels must be even and positive, got {}", self.channels)));
        }
        if self.backbone_widths.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        if self.attention.heads == 0 {
            return Err(Error::Config("attention heads must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PafpnParams {
    pub compress: Vec<ConvParams>,
    /// Top-down blocks for strides 32, 16, 8, 4.
    pub top_down: Vec<CspBlockParams>,
    /// Strided 3x3 convs feeding the bottom-up blocks at strides 8, 16, 32.
    pub downsample: Vec<ConvParams>,
    pub bottom_up: Vec<CspBlockParams>,
    /// Final strided 3x3 conv producing stride 64.
    pub extra: ConvParams,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpnParams {
    pub lateral: Vec<ConvParams>,
    pub output: Vec<ConvParams>,
    pub extra: ConvParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NeckParams {
    Pafpn(PafpnParams),
    Fpn(FpnParams),
}

fn compress_layers<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, widths: &[usize; 4], c: usize) -> Vec<ConvParams> {
    widths
        .iter()
        .zip(BACKBONE_STRIDES)
        .map(|(&w, s)| ConvParams::new(pb, &format!("{name}.s{s}"), ConvSpec::pointwise(w, c)))
        .collect()
}

impl NeckParams {
    /// `image_extent` resolves ratio windows (the smaller image side).
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &NeckConfig, image_extent: usize) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut sub = pb.sub("neck");
        Ok(match cfg.kind {
            NeckKind::AttnPafpn | NeckKind::CspPafpn => {
                let kind = if cfg.kind == NeckKind::AttnPafpn { BlockKind::Sa } else { BlockKind::Conv };
                let window = cfg.attention.window_for(image_extent)?;
                let compress = compress_layers(&mut sub, "compress", &cfg.backbone_widths, c);
                let block = |sub: &mut ParamBuilder<'_, T>, name: String, cin: usize| {
                    CspBlockParams::new(sub, &name, cin, c, cfg.depth, kind, &cfg.attention, window)
                };
                let top_down = vec![
                    block(&mut sub, "top_down.s32".into(), c),
                    block(&mut sub, "top_down.s16".into(), 2 * c),
                    block(&mut sub, "top_down.s8".into(), 2 * c),
                    block(&mut sub, "top_down.s4".into(), 2 * c),
                ];
                let downsample = [8, 16, 32]
                    .iter()
                    .map(|s| ConvParams::new(&mut sub, &format!("downsample.s{s}"), ConvSpec::k3(c, c, 2)))
                    .collect();
                let bottom_up = [8, 16, 32].iter().map(|s| block(&mut sub, format!("bottom_up.s{s}"), 2 * c)).collect();
                let extra = ConvParams::new(&mut sub, "extra.s64", ConvSpec::k3(c, c, 2));
                NeckParams::Pafpn(PafpnParams { compress, top_down, downsample, bottom_up, extra, window })
            }
            NeckKind::PlainFpn => {
                let lateral = compress_layers(&mut sub, "lateral", &cfg.backbone_widths, c);
                let output = BACKBONE_STRIDES
                    .iter()
                    .map(|s| ConvParams::new(&mut sub, &format!("output.s{s}"), ConvSpec::k3(c, c, 1)))
                    .collect();
                let extra = ConvParams::new(&mut sub, "extra.s64", ConvSpec::k3(c, c, 2));
                NeckParams::Fpn(FpnParams { lateral, output, extra })
            }
        })
    }

    /// Attention window side of the CSP blocks, if the neck has any.
    pub fn window(&self) -> Option<usize> {
        match self {
            NeckParams::Pafpn(p) => Some(p.window),
            NeckParams::Fpn(_) => None,
        }
    }

    pub fn param_count(&self) -> usize {
        let convs = |v: &[ConvParams]| v.iter().map(ConvParams::param_count).sum::<usize>();
        match self {
            NeckParams::Pafpn(p) => {
                convs(&p.compress)
                    + p.top_down.iter().chain(&p.bottom_up).map(CspBlockParams::param_count).sum::<usize>()
                    + convs(&p.downsample)
                    + p.extra.param_count()
            }
            NeckParams::Fpn(p) => convs(&p.lateral) + convs(&p.output) + p.extra.param_count(),
        }
    }

    /// Analytic cost for an `n`-image batch at image extent `h x w`.
    pub fn flops(&self, cfg: &NeckConfig, n: usize, h: usize, w: usize) -> Result<FlopCount> {
        let at = |s: usize| (h / s, w / s);
        let mut total = FlopCount::default();
        match self {
            NeckParams::Pafpn(p) => {
                for (conv, s) in p.compress.iter().zip(BACKBONE_STRIDES) {
                    let (lh, lw) = at(s);
                    total += conv.flops(n, lh, lw);
                }
                for (block, s) in p.top_down.iter().zip([32, 16, 8, 4]) {
                    let (lh, lw) = at(s);
                    total += block.flops(&cfg.attention, n, lh, lw)?;
                }
                for ((down, block), s) in p.downsample.iter().zip(&p.bottom_up).zip([8, 16, 32]) {
                    let (ih, iw) = at(s / 2);
                    let (lh, lw) = at(s);
                    total += down.flops(n, ih, iw) + block.flops(&cfg.attention, n, lh, lw)?;
                }
                let (lh, lw) = at(32);
                total += p.extra.flops(n, lh, lw);
            }
            NeckParams::Fpn(p) => {
                for ((lat, out), s) in p.lateral.iter().zip(&p.output).zip(BACKBONE_STRIDES) {
                    let (lh, lw) = at(s);
                    total += lat.flops(n, lh, lw) + out.flops(n, lh, lw);
                }
                let (lh, lw) = at(32);
                total += p.extra.flops(n, lh, lw);
            }
        }
        Ok(total)
    }
}

fn check_levels<T: Scalar>(g: &Graph<'_, T>, features: &[Var], want: usize, op: &'static str) -> Result<()> {
    if features.len() != want {
        return Err(Error::invalid(op, format!("expected {want} feature levels, got {}", features.len())));
    }
    for (i, f) in features.iter().enumerate().skip(1) {
        let (_, _, h, w) = g.value(*f).dims4()?;
        let (_, _, ph, pw) = g.value(features[i - 1]).dims4()?;
        if ph != 2 * h || pw != 2 * w {
            return Err(Error::shape(op, format!("level {i} is {h}x{w} but level {} is {ph}x{pw}", i - 1)));
        }
    }
    Ok(())
}

/// Maps each backbone level to the shared width with its own 1x1 conv.
pub fn compress<T: Scalar>(g: &mut Graph<'_, T>, features: &[Var], layers: &[ConvParams]) -> Result<Vec<Var>> {
    if features.len() != layers.len() {
        return Err(Error::invalid("compress", format!("expected {} feature levels, got {}", layers.len(), features.len())));
    }
    features.iter().zip(layers).map(|(f, conv)| conv.forward(g, *f)).collect()
}

/// Top-down path; returns outputs ordered by stride 4, 8, 16, 32.
pub fn top_down<T: Scalar>(g: &mut Graph<'_, T>, compressed: &[Var], p: &PafpnParams, attn: &AttentionConfig) -> Result<Vec<Var>> {
    check_levels(g, compressed, 4, "top_down")?;
    let mut t = csp_block(g, compressed[3], &p.top_down[0], attn)?;
    let mut outs = vec![t];
    for (level, block) in (0..3).rev().zip(&p.top_down[1..]) {
        let up = g.upsample_nearest2x(t)?;
        let cat = g.concat_channels(up, compressed[level])?;
        t = csp_block(g, cat, block, attn)?;
        outs.push(t);
    }
    outs.reverse();
    Ok(outs)
}

/// Bottom-up path over top-down outputs (stride 4..32); returns five levels.
pub fn bottom_up<T: Scalar>(g: &mut Graph<'_, T>, td: &[Var], p: &PafpnParams, attn: &AttentionConfig) -> Result<Vec<Var>> {
    check_levels(g, td, 4, "bottom_up")?;
    let mut b = td[0];
    let mut outs = vec![b];
    for (i, (down, block)) in p.downsample.iter().zip(&p.bottom_up).enumerate() {
        let d = down.forward(g, b)?;
        let cat = g.concat_channels(d, td[i + 1])?;
        b = csp_block(g, cat, block, attn)?;
        outs.push(b);
    }
    outs.push(p.extra.forward(g, b)?);
    Ok(outs)
}

fn plain_fpn<T: Scalar>(g: &mut Graph<'_, T>, features: &[Var], p: &FpnParams) -> Result<Vec<Var>> {
    let lat = compress(g, features, &p.lateral)?;
    check_levels(g, &lat, 4, "plain_fpn")?;
    let mut merged = vec![lat[3]];
    for level in (0..3).rev() {
        let up = g.upsample_nearest2x(*merged.last().expect("non-empty"))?;
        merged.push(g.add(lat[level], up)?);
    }
    merged.reverse();
    let mut outs = merged.iter().zip(&p.output).map(|(m, conv)| conv.forward(g, *m)).collect::<Result<Vec<_>>>()?;
    let extra = p.extra.forward(g, outs[3])?;
    outs.push(extra);
    Ok(outs)
}

/// Backbone features (strides 4..32) to the five-level pyramid (4..64).
pub fn neck_forward<T: Scalar>(g: &mut Graph<'_, T>, features: &[Var], p: &NeckParams, cfg: &NeckConfig) -> Result<Vec<Var>> {
    match p {
        NeckParams::Pafpn(pp) => {
            let c = compress(g, features, &pp.compress)?;
            let td = top_down(g, &c, pp, &cfg.attention)?;
            bottom_up(g, &td, pp, &cfg.attention)
        }
        NeckParams::Fpn(fp) => plain_fpn(g, features, fp),
    }
}

/// Zeroes every bottleneck output projection in the neck.
pub fn zero_bottleneck_outputs<T: Scalar>(p: &NeckParams, store: &mut ParamStore<T>) {
    if let NeckParams::Pafpn(pp) = p {
        for block in pp.top_down.iter().chain(&pp.bottom_up) {
            block.zero_bottleneck_outputs(store);
        }
    }
}

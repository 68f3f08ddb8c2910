//! Finite-difference audit suites at increasing scope, shared by the
//! command line and the test suites.

use std::fmt;
use std::str::FromStr;

use crate::attention::{
    mixed_ffn, self_attention, transformer_layer, AttentionConfig, AttentionParams, MixedFfnParams, TransformerLayerParams,
    Variant, WindowSize,
};
use crate::blocks::{csp_block, BlockKind, BottleneckParams, CspBlockParams};
use crate::error::{Error, Result};
use crate::gradcheck::{probe_weights, random_tensor, GradCheck, GradReport};
use crate::head::{assign_and_loss, head_forward, BBox, GroundTruth, HeadConfig, HeadParams, LossConfig};
use crate::model::{Detector, ModelConfig};
use crate::neck::{neck_forward, NeckConfig, NeckKind, NeckParams};
use crate::tensor::{seeded_rng, ConvNormAct, ConvSpec, Graph, ParamBuilder, ParamStore, Tensor, Var};

/// Acceptance bound on the relative error.
pub const TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Every differentiable primitive on its own.
    Op,
    /// Conv blocks, attention variants, FFN, transformer layer, bottlenecks,
    /// CSP blocks and the head with its loss.
    Layer,
    /// Each neck kind on random backbone features.
    Neck,
    /// Backbone, neck and head under the detection loss.
    Full,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "layer" => Ok(Scope::Layer),
            "neck" => Ok(Scope::Neck),
            "full" => Ok(Scope::Full),
            other => Err(Error::invalid("scope", format!("unknown scope {other:?}; expected op, layer, neck or full"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Op => "op",
            Scope::Layer => "layer",
            Scope::Neck => "neck",
            Scope::Full => "full",
        })
    }
}

type OpFn = fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>;

/// Probes one op with random parameter inputs of the given shapes.
fn op_case(shapes: &[&[usize]], seed: u64, f: OpFn) -> Result<GradReport> {
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("in{i}"), random_tensor(s, 1.0, seed + i as u64)))
        .collect();
    GradCheck { samples_per_param: 64, ..GradCheck::default() }.run(&mut store, |g| {
        let vars: Vec<_> = ids.iter().map(|id| g.param(*id)).collect();
        let y = f(g, &vars)?;
        let w = probe_weights(g.shape(y), seed);
        g.weighted_sum(y, w)
    })
}

fn op_suite() -> Result<GradReport> {
    let cases: Vec<(&str, Vec<&[usize]>, OpFn)> = vec![
        ("conv", vec![&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1, 1)),
        ("conv_pointwise", vec![&[1, 4, 3, 3], &[2, 4, 1, 1]], |g, v| g.conv2d(v[0], v[1], None, 1, 0, 1)),
        ("conv_depthwise", vec![&[1, 4, 4, 4], &[4, 1, 3, 3], &[4]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 4)),
        ("conv_grouped", vec![&[1, 4, 4, 4], &[6, 2, 3, 3]], |g, v| g.conv2d(v[0], v[1], None, 1, 1, 2)),
        ("layer_norm", vec![&[2, 5, 3, 2], &[5], &[5]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ("gelu", vec![&[3, 4]], |g, v| Ok(g.gelu(v[0]))),
        ("softplus", vec![&[3, 4]], |g, v| Ok(g.softplus(v[0]))),
        ("sigmoid", vec![&[3, 4]], |g, v| Ok(g.sigmoid(v[0]))),
        ("softmax", vec![&[2, 3, 4]], |g, v| g.softmax(v[0], 1)),
        ("adaptive_max_pool", vec![&[1, 2, 5, 7]], |g, v| g.adaptive_max_pool2d(v[0], 2, 3)),
        ("upsample", vec![&[1, 2, 3, 3]], |g, v| g.upsample_nearest2x(v[0])),
        ("resize_nearest", vec![&[1, 2, 3, 2]], |g, v| g.resize_nearest(v[0], 5, 4)),
        ("gather", vec![&[2, 3]], |g, v| g.gather(v[0], &[2, 2], vec![5, 0, 5, 2])),
        ("concat", vec![&[1, 2, 3, 3], &[1, 1, 3, 3]], |g, v| g.concat_channels(v[0], v[1])),
        ("slice", vec![&[2, 5, 2, 2]], |g, v| g.slice_channels(v[0], 1, 3)),
        ("matmul", vec![&[2, 3, 4], &[2, 4, 5]], |g, v| g.matmul(v[0], v[1], false, false)),
        ("matmul_transposed", vec![&[2, 4, 3], &[5, 4]], |g, v| g.matmul(v[0], v[1], true, true)),
        ("add", vec![&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1])),
        ("add_trailing", vec![&[2, 3, 4], &[3, 4]], |g, v| g.add_trailing(v[0], v[1])),
        ("mul", vec![&[3, 3], &[3, 3]], |g, v| g.mul(v[0], v[1])),
        ("scale_shift", vec![&[3, 3]], |g, v| {
            let s = g.scale(v[0], -1.5);
            Ok(g.add_scalar(s, 0.25))
        }),
        ("reshape", vec![&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        ("mean", vec![&[3, 3]], |g, v| {
            let m = g.mean(v[0]);
            Ok(g.scale(m, 3.0))
        }),
        ("sum", vec![&[4]], |g, v| Ok(g.sum(v[0]))),
    ];
    let mut report = GradReport::default();
    for (i, (name, shapes, f)) in cases.into_iter().enumerate() {
        report.merge(&format!("{name}."), op_case(&shapes, 100 + i as u64, f)?);
    }
    Ok(report)
}

/// Gradcheck of a layer built into a fresh store, contracted with probe
/// weights over its output.
fn layer_case<L>(
    input: &[usize],
    seed: u64,
    build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> L,
    forward: impl Fn(&mut Graph<'_, f64>, Var, &L) -> Result<Var>,
) -> Result<GradReport> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded_rng(seed);
    let layer = build(&mut ParamBuilder::new(&mut store, &mut rng));
    let x = random_tensor(input, 1.0, seed + 1);
    GradCheck::default().run(&mut store, |g| {
        let xv = g.input(x.clone());
        let y = forward(g, xv, &layer)?;
        let w = probe_weights(g.shape(y), seed);
        g.weighted_sum(y, w)
    })
}

fn attention(variant: Variant, window: usize, shift: bool) -> AttentionConfig {
    AttentionConfig { variant, window: WindowSize::Fixed(window), shift, heads: 2, ffn_ratio: 2, resample_small: true }
}

fn layer_suite() -> Result<GradReport> {
    let mut report = GradReport::default();
    report.merge(
        "conv_norm_act.",
        layer_case(&[1, 4, 5, 5], 1, |pb| ConvNormAct::new(pb, "cna", ConvSpec::k3(4, 6, 2)), |g, x, l| l.forward(g, x))?,
    );
    let variants = [
        ("attention.standard.", attention(Variant::Standard, 4, false), 4),
        ("attention.local_window.", attention(Variant::LocalWindow, 4, false), 4),
        ("attention.local_window_shifted.", attention(Variant::LocalWindow, 4, true), 4),
        ("attention.efficient_global.", attention(Variant::EfficientGlobal, 4, false), 4),
        ("attention.efficient_global_small.", attention(Variant::EfficientGlobal, 8, false), 8),
    ];
    for (i, (name, cfg, window)) in variants.into_iter().enumerate() {
        let seed = 10 + i as u64;
        report.merge(
            name,
            layer_case(&[1, 8, 6, 7], seed, |pb| AttentionParams::new(pb, "attn", 8, 2, window), |g, x, p| self_attention(g, x, &cfg, p))?,
        );
    }
    report.merge("mixed_ffn.", layer_case(&[1, 8, 4, 4], 20, |pb| MixedFfnParams::new(pb, "ffn", 8, 2), mixed_ffn)?);
    let cfg = attention(Variant::EfficientGlobal, 4, false);
    report.merge(
        "transformer_layer.",
        layer_case(&[1, 8, 8, 8], 21, |pb| TransformerLayerParams::new(pb, "layer", 8, &cfg, 4), |g, x, p| transformer_layer(g, x, p, &cfg))?,
    );
    report.merge(
        "conv_bottleneck.",
        layer_case(&[1, 8, 5, 5], 22, |pb| BottleneckParams::conv(pb, "b", 8), |g, x, p| p.forward(g, x, &cfg))?,
    );
    report.merge(
        "sa_bottleneck.",
        layer_case(&[1, 16, 6, 6], 23, |pb| BottleneckParams::sa(pb, "b", 16, &cfg, 4), |g, x, p| p.forward(g, x, &cfg))?,
    );
    for (name, kind, seed) in [("csp_conv.", BlockKind::Conv, 24), ("csp_sa.", BlockKind::Sa, 25)] {
        report.merge(
            name,
            layer_case(&[1, 16, 6, 6], seed, |pb| CspBlockParams::new(pb, "csp", 16, 16, 2, kind, &cfg, 4), |g, x, p| {
                csp_block(g, x, p, &cfg)
            })?,
        );
    }
    report.merge("head_loss.", head_loss_case()?);
    Ok(report)
}

fn sample_targets() -> Vec<GroundTruth> {
    vec![GroundTruth::new(vec![(0, BBox::new(3.0, 4.0, 14.0, 12.0)), (1, BBox::new(2.0, 1.0, 30.0, 28.0))])]
}

fn head_loss_case() -> Result<GradReport> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded_rng(30);
    let head = HeadParams::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, 2, &HeadConfig { width: 8, prior: 0.01 });
    let feats = [random_tensor(&[1, 8, 8, 8], 1.0, 31), random_tensor(&[1, 8, 4, 4], 1.0, 32)];
    let gts = sample_targets();
    GradCheck::default().run(&mut store, |g| {
        let xs: Vec<Var> = feats.iter().map(|f| g.input(f.clone())).collect();
        let outs = head_forward(g, &xs, &[4, 8], &head)?;
        Ok(assign_and_loss(g, &outs, &gts, &LossConfig::default())?.0)
    })
}

fn tiny_neck(kind: NeckKind) -> NeckConfig {
    NeckConfig {
        kind,
        channels: 16,
        depth: 1,
        attention: attention(Variant::EfficientGlobal, 2, false),
        backbone_widths: [6, 8, 10, 12],
    }
}

fn neck_suite() -> Result<GradReport> {
    let mut report = GradReport::default();
    for (name, kind, seed) in [("attn_pafpn.", NeckKind::AttnPafpn, 40), ("csp_pafpn.", NeckKind::CspPafpn, 41), ("plain_fpn.", NeckKind::PlainFpn, 42)] {
        let cfg = tiny_neck(kind);
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(seed);
        let neck = NeckParams::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg, 32)?;
        let feats: Vec<Tensor<f64>> = cfg
            .backbone_widths
            .iter()
            .zip([8usize, 4, 2, 1])
            .enumerate()
            .map(|(i, (&c, e))| random_tensor(&[1, c, e, e], 1.0, seed + 10 + i as u64))
            .collect();
        let r = GradCheck { samples_per_param: 8, ..GradCheck::default() }.run(&mut store, |g| {
            let xs: Vec<Var> = feats.iter().map(|f| g.input(f.clone())).collect();
            let outs = neck_forward(g, &xs, &neck, &cfg)?;
            let mut acc: Option<Var> = None;
            for (i, o) in outs.iter().enumerate() {
                let w = probe_weights(g.shape(*o), seed + i as u64);
                let s = g.weighted_sum(*o, w)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, s)?,
                    None => s,
                });
            }
            acc.ok_or_else(|| Error::invalid("audit", "neck produced no levels"))
        })?;
        report.merge(name, r);
    }
    Ok(report)
}

/// Model used by the full-scope audit: a 32x32 image, so every pyramid
/// level is at most 8x8.
pub fn audit_model_config() -> ModelConfig {
    let mut cfg = ModelConfig { neck: tiny_neck(NeckKind::AttnPafpn), head: HeadConfig { width: 8, prior: 0.01 }, num_classes: 2 };
    cfg.neck.backbone_widths = [16, 16, 16, 16];
    cfg
}

fn full_suite() -> Result<GradReport> {
    let cfg = audit_model_config();
    let mut store = ParamStore::<f64>::new();
    let det = Detector::new(&mut store, &cfg, 32, 50)?;
    let image = random_tensor(&[1, 3, 32, 32], 1.0, 51);
    let gts = sample_targets();
    GradCheck { samples_per_param: 4, ..GradCheck::default() }.run(&mut store, |g| {
        let x = g.input(image.clone());
        let outs = det.forward_any_extent(g, x)?;
        Ok(assign_and_loss(g, &outs, &gts, &LossConfig::default())?.0)
    })
}

/// Negative control: a fused node whose backward is deliberately wrong
/// (`3x` instead of `2x` for `sum(x^2)`).
fn corrupted_case() -> Result<GradReport> {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", random_tensor(&[4], 1.0, 60));
    GradCheck::default().run(&mut store, |g| {
        let x = g.param(id);
        let v = g.value(x).data().to_vec();
        let value = v.iter().map(|a| a * a).sum();
        let wrong = v.iter().map(|a| 3.0 * a).collect();
        g.fused_scalar(vec![x], value, vec![wrong])
    })
}

/// Runs the suite for `scope`. With `inject_fault` a deliberately broken
/// group is appended, which must fail.
pub fn run(scope: Scope, inject_fault: bool) -> Result<GradReport> {
    let mut report = match scope {
        Scope::Op => op_suite()?,
        Scope::Layer => layer_suite()?,
        Scope::Neck => neck_suite()?,
        Scope::Full => full_suite()?,
    };
    if inject_fault {
        report.merge("fault.corrupted_backward.", corrupted_case()?);
    }
    Ok(report)
}

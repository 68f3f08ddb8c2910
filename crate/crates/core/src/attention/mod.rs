//! Multi-head self-attention over NCHW maps with relative position bias,
//! the convolutional feed-forward network, and the pre-norm transformer
//! layer that combines them.
//!
//! Three attention variants share one parameter layout:
//!
//! * `Standard` attends over every pixel of the map.
//! * `LocalWindow` partitions the map into `g x g` windows (optionally
//!   cyclically shifted by `g/2`) and attends within each.
//! * `EfficientGlobal` max-pools the map to `g x g`, attends among those
//!   `g^2` tokens, and resizes the projected result back.

pub mod window;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::FlopCount;
use crate::scalar::Scalar;
use crate::tensor::{ConvParams, ConvSpec, Graph, NormParams, ParamBuilder, ParamId, ParamStore, Tensor, Var};
use window::{
    crop, cyclic_shift, merge_heads, pad_bottom_right, relative_position_index, split_heads, window_mask,
    window_partition, window_reverse,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Standard,
    LocalWindow,
    EfficientGlobal,
}

/// Window extent: a fixed token count per side, or the image extent divided
/// by a denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowSize {
    Fixed(usize),
    Ratio(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub variant: Variant,
    pub window: WindowSize,
    /// Shifted windows; only meaningful for `LocalWindow`.
    pub shift: bool,
    /// Requested head count. The layer uses the largest divisor of its
    /// channel width not exceeding this.
    pub heads: usize,
    /// Hidden expansion of the feed-forward network.
    pub ffn_ratio: usize,
    /// Efficient-global only: maps smaller than `g` are pooled to their own
    /// extent and resized up to `g x g` instead of being rejected.
    pub resample_small: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            variant: Variant::EfficientGlobal,
            window: WindowSize::Fixed(16),
            shift: false,
            heads: 4,
            ffn_ratio: 4,
            resample_small: false,
        }
    }
}

impl AttentionConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Resolves the window side for an image of extent `image_extent`.
    pub fn window_for(&self, image_extent: usize) -> Result<usize> {
        let g = match self.window {
            WindowSize::Fixed(g) => g,
            WindowSize::Ratio(den) => {
                if den == 0 {
                    return Err(Error::invalid("window", "ratio denominator must be positive"));
                }
                image_extent / den
            }
        };
        if g == 0 {
            return Err(Error::invalid("window", format!("{:?} gives an empty window at extent {image_extent}", self.window)));
        }
        Ok(g)
    }
}

/// Largest divisor of `channels` that is at most `requested`.
pub fn effective_heads(channels: usize, requested: usize) -> usize {
    (1..=requested.max(1).min(channels)).rev().find(|h| channels.is_multiple_of(*h)).unwrap_or(1)
}

/// Learned bias table `[(2g-1)^2, heads]` indexed by relative token offset.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativePositionBias {
    pub table: ParamId,
    pub window: usize,
    pub heads: usize,
}

impl RelativePositionBias {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, window: usize, heads: usize) -> Self {
        let rows = (2 * window - 1) * (2 * window - 1);
        let table = pb.normal("rel_bias", &[rows, heads], 0.02);
        RelativePositionBias { table, window, heads }
    }

    pub fn rows(&self) -> usize {
        (2 * self.window - 1) * (2 * self.window - 1)
    }

    pub fn param_count(&self) -> usize {
        self.rows() * self.heads
    }
}

/// Gathers the bias matrix `[heads, T, T]` for a `wh x ww` token grid:
/// entry `(head, i, j)` is `table[index[i, j], head]`.
pub fn relative_bias_matrix<T: Scalar>(
    g: &mut Graph<'_, T>,
    bias: &RelativePositionBias,
    wh: usize,
    ww: usize,
) -> Result<Var> {
    let table = g.param(bias.table);
    let idx = relative_position_index(wh, ww, bias.window);
    let t = wh * ww;
    let heads = bias.heads;
    let mut index = Vec::with_capacity(heads * t * t);
    for head in 0..heads {
        index.extend(idx.iter().map(|row| row * heads + head));
    }
    g.gather(table, &[heads, t, t], index)
}

/// Softmax attention weights `[B, h, Tq, Tk]` for `q: [B, h, Tq, d]` and
/// `k: [B, h, Tk, d]`. `bias` is `[h, Tq, Tk]`, `mask` is a constant
/// broadcast over heads: `[B, Tq, Tk]`.
pub fn attention_weights<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    bias: Option<Var>,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if sq.len() != 4 || sk.len() != 4 || sq[0] != sk[0] || sq[1] != sk[1] || sq[3] != sk[3] {
        return Err(Error::shape("scaled_dot_attention", format!("q {sq:?} and k {sk:?} disagree")));
    }
    let (b, heads, tq, d) = (sq[0], sq[1], sq[2], sq[3]);
    let tk = sk[2];
    g.attention_scope(|g| {
        let logits = g.matmul(q, k, false, true)?;
        let mut logits = g.scale(logits, 1.0 / (d as f64).sqrt());
        if let Some(bias) = bias {
            if g.shape(bias) != [heads, tq, tk] {
                return Err(Error::shape("scaled_dot_attention", format!("bias {:?} vs logits [{heads}, {tq}, {tk}]", g.shape(bias))));
            }
            logits = g.add_trailing(logits, bias)?;
        }
        if let Some(mask) = mask {
            if mask.shape() != [b, tq, tk] {
                return Err(Error::shape("scaled_dot_attention", format!("mask {:?} vs [{b}, {tq}, {tk}]", mask.shape())));
            }
            let plane = tq * tk;
            let mut data = Vec::with_capacity(b * heads * plane);
            for bi in 0..b {
                for _ in 0..heads {
                    data.extend_from_slice(&mask.data()[bi * plane..][..plane]);
                }
            }
            let m = g.input(Tensor::from_vec(&[b, heads, tq, tk], data)?);
            logits = g.add(logits, m)?;
        }
        g.softmax(logits, 3)
    })
}

/// `softmax(q k^T / sqrt(d) + bias + mask) v` per batch entry and head.
pub fn scaled_dot_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let (sk, sv) = (g.shape(k).to_vec(), g.shape(v).to_vec());
    if sv.len() != 4 || sk.len() != 4 || sk[..3] != sv[..3] {
        return Err(Error::shape("scaled_dot_attention", format!("k {sk:?} and v {sv:?} disagree")));
    }
    let attn = attention_weights(g, q, k, bias, mask)?;
    g.attention_scope(|g| g.matmul(attn, v, false, false))
}

/// Query, key, value and output projections plus the relative bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: ConvParams,
    pub wk: ConvParams,
    pub wv: ConvParams,
    pub wo: ConvParams,
    pub heads: usize,
    pub head_dim: usize,
    pub bias: RelativePositionBias,
}

impl AttentionParams {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, heads: usize, window: usize) -> Self {
        assert!(window > 0, "window must be positive");
        let heads = effective_heads(channels, heads);
        let mut sub = pb.sub(name);
        let wq = ConvParams::new(&mut sub, "wq", ConvSpec::pointwise(channels, channels));
        let wk = ConvParams::new(&mut sub, "wk", ConvSpec::pointwise(channels, channels));
        let wv = ConvParams::new(&mut sub, "wv", ConvSpec::pointwise(channels, channels));
        let wo = ConvParams::new(&mut sub, "wo", ConvSpec::pointwise(channels, channels));
        let bias = RelativePositionBias::new(&mut sub, window, heads);
        AttentionParams { wq, wk, wv, wo, heads, head_dim: channels / heads, bias }
    }

    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn window(&self) -> usize {
        self.bias.window
    }

    pub fn param_count(&self) -> usize {
        [&self.wq, &self.wk, &self.wv, &self.wo].iter().map(|c| c.param_count()).sum::<usize>() + self.bias.param_count()
    }

    /// Attention over all pixels of `x`, without the output projection.
    fn attend_map<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let dims = g.value(x).dims4()?;
        let (_, _, h, w) = dims;
        let q = self.heads_of(g, x, &self.wq, h, w)?;
        let k = self.heads_of(g, x, &self.wk, h, w)?;
        let v = self.heads_of(g, x, &self.wv, h, w)?;
        let bias = relative_bias_matrix(g, &self.bias, h, w)?;
        let o = scaled_dot_attention(g, q, k, v, Some(bias), None)?;
        let o = merge_heads(g, o)?;
        window_reverse(g, o, h, w, dims)
    }

    fn heads_of<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, proj: &ConvParams, wh: usize, ww: usize) -> Result<Var> {
        let y = proj.forward(g, x)?;
        let tokens = window_partition(g, y, wh, ww)?;
        split_heads(g, tokens, self.heads)
    }

    fn check_channels<T: Scalar>(&self, g: &Graph<'_, T>, x: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        let dims = g.value(x).dims4()?;
        if dims.1 != self.channels() {
            return Err(Error::shape(op, format!("{} channels, layer expects {}", dims.1, self.channels())));
        }
        Ok(dims)
    }
}

/// Global attention over every pixel; offsets beyond the bias table reuse
/// its edge entries.
pub fn standard_attention<T: Scalar>(g: &mut Graph<'_, T>, x: Var, p: &AttentionParams) -> Result<Var> {
    p.check_channels(g, x, "standard_attention")?;
    let y = p.attend_map(g, x)?;
    p.wo.forward(g, y)
}

/// Effective window and shift for a `h x w` map: each side is clamped to the
/// map, and no shift is applied along a side covered by a single window.
pub fn local_geometry(window: usize, shift: bool, h: usize, w: usize) -> ((usize, usize), (usize, usize), (usize, usize)) {
    let (wh, ww) = (window.min(h), window.min(w));
    let (hp, wp) = (h.div_ceil(wh) * wh, w.div_ceil(ww) * ww);
    let sy = if shift && hp > wh { wh / 2 } else { 0 };
    let sx = if shift && wp > ww { ww / 2 } else { 0 };
    ((wh, ww), (hp, wp), (sy, sx))
}

pub fn local_window_attention<T: Scalar>(g: &mut Graph<'_, T>, x: Var, cfg: &AttentionConfig, p: &AttentionParams) -> Result<Var> {
    let (n, c, h, w) = p.check_channels(g, x, "local_window_attention")?;
    let ((wh, ww), (hp, wp), (sy, sx)) = local_geometry(p.window(), cfg.shift, h, w);
    let windows = (hp / wh) * (wp / ww);
    let needs_mask = (hp, wp) != (h, w) || sy > 0 || sx > 0;
    let mask = needs_mask.then(|| {
        let per_image = window_mask::<T>(hp, wp, wh, ww, sy, sx, h, w);
        let mut data = Vec::with_capacity(n * per_image.numel());
        for _ in 0..n {
            data.extend_from_slice(per_image.data());
        }
        Tensor::from_vec(&[n * windows, wh * ww, wh * ww], data).expect("mask shape")
    });

    let prep = |g: &mut Graph<'_, T>, proj: &ConvParams| -> Result<Var> {
        let y = proj.forward(g, x)?;
        let y = pad_bottom_right(g, y, hp, wp)?;
        let y = cyclic_shift(g, y, sy as isize, sx as isize)?;
        let tokens = window_partition(g, y, wh, ww)?;
        split_heads(g, tokens, p.heads)
    };
    let q = prep(g, &p.wq)?;
    let k = prep(g, &p.wk)?;
    let v = prep(g, &p.wv)?;
    let bias = relative_bias_matrix(g, &p.bias, wh, ww)?;
    let o = scaled_dot_attention(g, q, k, v, Some(bias), mask.as_ref())?;
    let o = merge_heads(g, o)?;
    let o = window_reverse(g, o, wh, ww, (n, c, hp, wp))?;
    let o = cyclic_shift(g, o, -(sy as isize), -(sx as isize))?;
    let o = crop(g, o, h, w)?;
    p.wo.forward(g, o)
}

/// Extent the map is pooled to before the optional resize up to `g x g`.
fn pooled_extent(g: usize, h: usize, w: usize, cfg: &AttentionConfig, op: &'static str) -> Result<(usize, usize)> {
    if h < g || w < g {
        if !cfg.resample_small {
            return Err(Error::invalid(op, format!("window {g} exceeds the {h}x{w} input")));
        }
        return Ok((h.min(g), w.min(g)));
    }
    Ok((g, g))
}

pub fn efficient_global_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    cfg: &AttentionConfig,
    p: &AttentionParams,
) -> Result<Var> {
    let (_, _, h, w) = p.check_channels(g, x, "efficient_global_attention")?;
    let win = p.window();
    let (ph, pw) = pooled_extent(win, h, w, cfg, "efficient_global_attention")?;
    let pooled = if (ph, pw) == (h, w) { x } else { g.adaptive_max_pool2d(x, ph, pw)? };
    let pooled = g.resize_nearest(pooled, win, win)?;
    let y = p.attend_map(g, pooled)?;
    let y = p.wo.forward(g, y)?;
    g.resize_nearest(y, h, w)
}

pub fn self_attention<T: Scalar>(g: &mut Graph<'_, T>, x: Var, cfg: &AttentionConfig, p: &AttentionParams) -> Result<Var> {
    match cfg.variant {
        Variant::Standard => standard_attention(g, x, p),
        Variant::LocalWindow => local_window_attention(g, x, cfg, p),
        Variant::EfficientGlobal => efficient_global_attention(g, x, cfg, p),
    }
}

/// Analytic operation count of [`self_attention`] on an `n x C x h x w` map.
pub fn attention_flops(p: &AttentionParams, cfg: &AttentionConfig, n: usize, h: usize, w: usize) -> Result<FlopCount> {
    let proj = |hh: usize, ww: usize| -> FlopCount { p.wq.flops(n, hh, ww) + p.wk.flops(n, hh, ww) + p.wv.flops(n, hh, ww) };
    let c = p.channels();
    Ok(match cfg.variant {
        Variant::Standard => proj(h, w) + FlopCount::attention_core(n, p.heads, h * w, p.head_dim) + p.wo.flops(n, h, w),
        Variant::LocalWindow => {
            let ((wh, ww), (hp, wp), _) = local_geometry(p.window(), cfg.shift, h, w);
            let windows = (hp / wh) * (wp / ww);
            proj(h, w) + FlopCount::attention_core(n * windows, p.heads, wh * ww, p.head_dim) + p.wo.flops(n, h, w)
        }
        Variant::EfficientGlobal => {
            let win = p.window();
            let (ph, pw) = pooled_extent(win, h, w, cfg, "attention_flops")?;
            let pool = if (ph, pw) == (h, w) { FlopCount::default() } else { FlopCount::max_pool(n * c * h * w) };
            pool + proj(win, win) + FlopCount::attention_core(n, p.heads, win * win, p.head_dim) + p.wo.flops(n, win, win)
        }
    })
}

/// `pw1 (C -> rC) -> LN -> GeLU -> dw3x3 -> LN -> GeLU -> pw2 (rC -> C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedFfnParams {
    pub pw1: ConvParams,
    pub norm1: NormParams,
    pub dw: ConvParams,
    pub norm2: NormParams,
    pub pw2: ConvParams,
}

impl MixedFfnParams {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, ratio: usize) -> Self {
        let hidden = channels * ratio.max(1);
        let mut sub = pb.sub(name);
        MixedFfnParams {
            pw1: ConvParams::new(&mut sub, "pw1", ConvSpec::pointwise(channels, hidden)),
            norm1: NormParams::new(&mut sub, "norm1", hidden),
            dw: ConvParams::new(&mut sub, "dw", ConvSpec::depthwise3(hidden)),
            norm2: NormParams::new(&mut sub, "norm2", hidden),
            pw2: ConvParams::new(&mut sub, "pw2", ConvSpec::pointwise(hidden, channels)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.pw1.param_count() + self.norm1.param_count() + self.dw.param_count() + self.norm2.param_count() + self.pw2.param_count()
    }

    pub fn flops(&self, n: usize, h: usize, w: usize) -> FlopCount {
        self.pw1.flops(n, h, w) + self.dw.flops(n, h, w) + self.pw2.flops(n, h, w)
    }
}

pub fn mixed_ffn<T: Scalar>(g: &mut Graph<'_, T>, x: Var, p: &MixedFfnParams) -> Result<Var> {
    let y = p.pw1.forward(g, x)?;
    let y = p.norm1.forward(g, y)?;
    let y = g.gelu(y);
    let y = p.dw.forward(g, y)?;
    let y = p.norm2.forward(g, y)?;
    let y = g.gelu(y);
    p.pw2.forward(g, y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayerParams {
    pub ln1: NormParams,
    pub attn: AttentionParams,
    pub ln2: NormParams,
    pub ffn: MixedFfnParams,
}

impl TransformerLayerParams {
    /// `window` is the resolved side `g` (see [`AttentionConfig::window_for`]).
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, cfg: &AttentionConfig, window: usize) -> Self {
        let mut sub = pb.sub(name);
        TransformerLayerParams {
            ln1: NormParams::new(&mut sub, "ln1", channels),
            attn: AttentionParams::new(&mut sub, "attn", channels, cfg.heads, window),
            ln2: NormParams::new(&mut sub, "ln2", channels),
            ffn: MixedFfnParams::new(&mut sub, "ffn", channels, cfg.ffn_ratio),
        }
    }

    pub fn param_count(&self) -> usize {
        self.ln1.param_count() + self.attn.param_count() + self.ln2.param_count() + self.ffn.param_count()
    }

    pub fn flops(&self, cfg: &AttentionConfig, n: usize, h: usize, w: usize) -> Result<FlopCount> {
        Ok(attention_flops(&self.attn, cfg, n, h, w)? + self.ffn.flops(n, h, w))
    }

    /// Zeroes both output projections, turning the layer into the identity.
    pub fn zero_outputs<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.attn.wo.zero(store);
        self.ffn.pw2.zero(store);
    }
}

/// `y* = SA(LN(x)) + x`, then `y = FFN(LN(y*)) + y*`.
pub fn transformer_layer<T: Scalar>(g: &mut Graph<'_, T>, x: Var, p: &TransformerLayerParams, cfg: &AttentionConfig) -> Result<Var> {
    let n1 = p.ln1.forward(g, x)?;
    let a = self_attention(g, n1, cfg, &p.attn)?;
    let y = g.add(a, x)?;
    let n2 = p.ln2.forward(g, y)?;
    let f = mixed_ffn(g, n2, &p.ffn)?;
    g.add(f, y)
}

#[cfg(test)]
mod tests;

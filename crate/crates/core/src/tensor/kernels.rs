//! Forward and backward kernels over raw slices. Shape validation happens in
//! the graph layer; these functions assume consistent extents.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        weight: &[usize],
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let [n, cin, h, w] = x[..] else {
            return Err(Error::shape("conv2d", format!("input must be NCHW, got {x:?}")));
        };
        let [cout, cin_g, kh, kw] = weight[..] else {
            return Err(Error::shape("conv2d", format!("weight must be [Cout, Cin/g, Kh, Kw], got {weight:?}")));
        };
        if groups == 0 || stride == 0 {
            return Err(Error::invalid("conv2d", "stride and groups must be positive"));
        }
        if cin % groups != 0 || cout % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("Cin={cin} and Cout={cout} must both be divisible by groups={groups}"),
            ));
        }
        if cin / groups != cin_g {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight expects {} ({cin_g} x {groups} groups)", cin_g * groups),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit {h}x{w} input with padding {pad}"),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        if ho == 0 || wo == 0 {
            return Err(Error::shape("conv2d", "zero output extent"));
        }
        Ok(ConvGeom { n, cin, h, w, cout, kh, kw, stride, pad, groups, ho, wo })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    /// Multiply-accumulate count of the convolution (bias excluded).
    pub fn macs(&self) -> u64 {
        (self.n * self.cout * self.ho * self.wo * self.cin_g() * self.kh * self.kw) as u64
    }
}

/// Unfolds the channels of one group of one sample into `[Cin_g*Kh*Kw, Ho*Wo]`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.ho * g.wo;
    for c in 0..g.cin_g() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column buffer back onto one group of one sample.
fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let p = g.ho * g.wo;
    for c in 0..g.cin_g() {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>, out: &mut [T]) {
    let p = g.ho * g.wo;
    let in_plane = g.h * g.w;
    if g.is_depthwise() {
        depthwise_forward(g, x, w, out);
    } else {
        let k = g.col_rows();
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for n in 0..g.n {
            for grp in 0..g.groups {
                let xs = &x[(n * g.cin + grp * g.cin_g()) * in_plane..][..g.cin_g() * in_plane];
                let cols: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(g, xs, &mut col);
                    &col
                };
                let ws = &w[grp * g.cout_g() * k..][..g.cout_g() * k];
                let os = &mut out[(n * g.cout + grp * g.cout_g()) * p..][..g.cout_g() * p];
                T::gemm(g.cout_g(), k, p, T::one(), ws, k as isize, 1, cols, p as isize, 1, T::zero(), os, p as isize, 1);
            }
        }
    }
    if let Some(b) = b {
        for n in 0..g.n {
            for (o, bias) in b.iter().enumerate() {
                out[(n * g.cout + o) * p..][..p].iter_mut().for_each(|v| *v = *v + *bias);
            }
        }
    }
}

fn depthwise_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let kk = g.kh * g.kw;
    for n in 0..g.n {
        for c in 0..g.cin {
            let plane = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let wk = &w[c * kk..(c + 1) * kk];
            let o = &mut out[(n * g.cout + c) * g.ho * g.wo..][..g.ho * g.wo];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = T::zero();
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                acc = acc + wk[ky * g.kw + kx] * plane[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                    o[oy * g.wo + ox] = acc;
                }
            }
        }
    }
}

/// Accumulates weight, bias and (optionally) input gradients.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let p = g.ho * g.wo;
    if let Some(db) = db {
        for n in 0..g.n {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc = *acc + dy[(n * g.cout + o) * p..][..p].iter().copied().sum::<T>();
            }
        }
    }
    if g.is_depthwise() {
        depthwise_backward(g, x, w, dy, dx, dw);
        return;
    }
    let in_plane = g.h * g.w;
    let k = g.col_rows();
    let cg = g.cin_g();
    let og = g.cout_g();
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    if let Some(dw) = dw {
        for n in 0..g.n {
            for grp in 0..g.groups {
                let xs = &x[(n * g.cin + grp * cg) * in_plane..][..cg * in_plane];
                let cols: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(g, xs, &mut col);
                    &col
                };
                let dys = &dy[(n * g.cout + grp * og) * p..][..og * p];
                let dws = &mut dw[grp * og * k..][..og * k];
                // dW[o, r] += sum_p dY[o, p] * col[r, p]
                T::gemm(og, p, k, T::one(), dys, p as isize, 1, cols, 1, p as isize, T::one(), dws, k as isize, 1);
            }
        }
    }
    if let Some(dx) = dx {
        let mut dcol = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for n in 0..g.n {
            for grp in 0..g.groups {
                let dys = &dy[(n * g.cout + grp * og) * p..][..og * p];
                let ws = &w[grp * og * k..][..og * k];
                let dxs = &mut dx[(n * g.cin + grp * cg) * in_plane..][..cg * in_plane];
                if g.is_pointwise() {
                    // dX[r, p] += sum_o W[o, r] * dY[o, p]
                    T::gemm(k, og, p, T::one(), ws, 1, k as isize, dys, p as isize, 1, T::one(), dxs, p as isize, 1);
                } else {
                    T::gemm(k, og, p, T::one(), ws, 1, k as isize, dys, p as isize, 1, T::zero(), &mut dcol, p as isize, 1);
                    col2im(g, &dcol, dxs);
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let kk = g.kh * g.kw;
    for n in 0..g.n {
        for c in 0..g.cin {
            let base = (n * g.cin + c) * g.h * g.w;
            let dyp = &dy[(n * g.cout + c) * g.ho * g.wo..][..g.ho * g.wo];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let d = dyp[oy * g.wo + ox];
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let xi = base + iy as usize * g.w + ix as usize;
                            let wi = c * kk + ky * g.kw + kx;
                            if let Some(dw) = dw.as_deref_mut() {
                                dw[wi] = dw[wi] + d * x[xi];
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xi] = dx[xi] + d * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-position channel statistics saved by the forward pass.
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalises the C-vector at every `(n, h, w)` of an NCHW tensor.
pub fn layer_norm_forward<T: Scalar>(
    dims: (usize, usize, usize, usize),
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
) -> NormStats<T> {
    let (n, c, h, w) = dims;
    let hw = h * w;
    let inv_c = T::one() / T::lit(c as f64);
    let mut mean = vec![T::zero(); n * hw];
    let mut rstd = vec![T::zero(); n * hw];
    let mut acc = vec![T::zero(); hw];
    for b in 0..n {
        let xs = &x[b * c * hw..][..c * hw];
        let m = &mut mean[b * hw..][..hw];
        acc.iter_mut().for_each(|v| *v = T::zero());
        for ch in 0..c {
            for (a, v) in acc.iter_mut().zip(&xs[ch * hw..][..hw]) {
                *a = *a + *v;
            }
        }
        for (mi, a) in m.iter_mut().zip(&acc) {
            *mi = *a * inv_c;
        }
        acc.iter_mut().for_each(|v| *v = T::zero());
        for ch in 0..c {
            for ((a, v), mi) in acc.iter_mut().zip(&xs[ch * hw..][..hw]).zip(m.iter()) {
                let d = *v - *mi;
                *a = *a + d * d;
            }
        }
        let r = &mut rstd[b * hw..][..hw];
        for (ri, a) in r.iter_mut().zip(&acc) {
            *ri = T::one() / (*a * inv_c + eps).sqrt();
        }
        let os = &mut out[b * c * hw..][..c * hw];
        for ch in 0..c {
            let (gm, bt) = (gamma[ch], beta[ch]);
            for (((o, v), mi), ri) in os[ch * hw..][..hw].iter_mut().zip(&xs[ch * hw..][..hw]).zip(m.iter()).zip(r.iter()) {
                *o = (*v - *mi) * *ri * gm + bt;
            }
        }
    }
    NormStats { mean, rstd }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    dims: (usize, usize, usize, usize),
    x: &[T],
    gamma: &[T],
    stats: &NormStats<T>,
    dy: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let (n, c, h, w) = dims;
    let hw = h * w;
    let inv_c = T::one() / T::lit(c as f64);
    let xhat = |b: usize, ch: usize, i: usize| (x[(b * c + ch) * hw + i] - stats.mean[b * hw + i]) * stats.rstd[b * hw + i];
    if let Some(dg) = dgamma {
        for b in 0..n {
            for (ch, acc) in dg.iter_mut().enumerate() {
                let dys = &dy[(b * c + ch) * hw..][..hw];
                let mut s = T::zero();
                for (i, d) in dys.iter().enumerate() {
                    s = s + *d * xhat(b, ch, i);
                }
                *acc = *acc + s;
            }
        }
    }
    if let Some(dbt) = dbeta {
        for b in 0..n {
            for (ch, acc) in dbt.iter_mut().enumerate() {
                *acc = *acc + dy[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
            }
        }
    }
    if let Some(dx) = dx {
        let mut s1 = vec![T::zero(); hw];
        let mut s2 = vec![T::zero(); hw];
        for b in 0..n {
            s1.iter_mut().for_each(|v| *v = T::zero());
            s2.iter_mut().for_each(|v| *v = T::zero());
            for ch in 0..c {
                let dys = &dy[(b * c + ch) * hw..][..hw];
                for i in 0..hw {
                    let g = dys[i] * gamma[ch];
                    s1[i] = s1[i] + g;
                    s2[i] = s2[i] + g * xhat(b, ch, i);
                }
            }
            for ch in 0..c {
                let dys = &dy[(b * c + ch) * hw..][..hw];
                let dxs = &mut dx[(b * c + ch) * hw..][..hw];
                for i in 0..hw {
                    let g = dys[i] * gamma[ch];
                    let r = stats.rstd[b * hw + i];
                    dxs[i] = dxs[i] + r * (g - s1[i] * inv_c - xhat(b, ch, i) * s2[i] * inv_c);
                }
            }
        }
    }
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward<T: Scalar>(shape: &[usize], axis: usize, x: &[T], out: &mut [T]) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..len {
                m = m.max(x[idx(j)]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (x[idx(j)] - m).exp();
                out[idx(j)] = e;
                s = s + e;
            }
            let inv = T::one() / s;
            for j in 0..len {
                out[idx(j)] = out[idx(j)] * inv;
            }
        }
    }
}

pub fn softmax_backward<T: Scalar>(shape: &[usize], axis: usize, y: &[T], dy: &[T], dx: &mut [T]) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot = dot + dy[idx(j)] * y[idx(j)];
            }
            for j in 0..len {
                let k = idx(j);
                dx[k] = dx[k] + y[k] * (dy[k] - dot);
            }
        }
    }
}

/// Half-open input range covered by output cell `i` of an adaptive pooling
/// from extent `size` down to `out`.
pub fn adaptive_region(i: usize, size: usize, out: usize) -> (usize, usize) {
    let start = (i * size) / out;
    let end = ((i + 1) * size).div_ceil(out);
    (start, end)
}

/// Returns the flat input index of each output's maximum (first occurrence in
/// row-major scan order wins ties).
pub fn adaptive_max_pool_forward<T: Scalar>(
    dims: (usize, usize, usize, usize),
    oh: usize,
    ow: usize,
    x: &[T],
    out: &mut [T],
) -> Vec<usize> {
    let (n, c, h, w) = dims;
    let mut arg = vec![0usize; n * c * oh * ow];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1) = adaptive_region(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_region(ox, w, ow);
                let mut best = base + y0 * w + x0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let k = base + y * w + xx;
                        if x[k] > x[best] || (x[k].is_nan() && !x[best].is_nan()) {
                            best = k;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out[o] = x[best];
                arg[o] = best;
            }
        }
    }
    arg
}

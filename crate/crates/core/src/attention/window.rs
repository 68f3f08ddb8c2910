//! Token layouts for windowed attention: partitioning, cyclic shifts,
//! padding, head splitting, shift masks and relative-position indices.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var, GATHER_ZERO};

/// Additive logit value that removes a key from a query's softmax.
pub const MASKED: f64 = -1e9;

/// Tiles an NCHW map row-major into `(H/wh)*(W/ww)` windows per image and
/// returns tokens `[N*windows, wh*ww, C]`.
pub fn window_partition<T: Scalar>(g: &mut Graph<'_, T>, x: Var, wh: usize, ww: usize) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4()?;
    if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 {
        return Err(Error::shape("window_partition", format!("{h}x{w} map is not tiled by {wh}x{ww} windows")));
    }
    let (nh, nw) = (h / wh, w / ww);
    let t = wh * ww;
    let mut index = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for wy in 0..nh {
            for wx in 0..nw {
                for ty in 0..wh {
                    for tx in 0..ww {
                        let (y, xx) = (wy * wh + ty, wx * ww + tx);
                        for ch in 0..c {
                            index.push(((b * c + ch) * h + y) * w + xx);
                        }
                    }
                }
            }
        }
    }
    g.gather(x, &[n * nh * nw, t, c], index)
}

/// Exact inverse of [`window_partition`] back to `[N, C, H, W]`.
pub fn window_reverse<T: Scalar>(
    g: &mut Graph<'_, T>,
    tokens: Var,
    wh: usize,
    ww: usize,
    dims: (usize, usize, usize, usize),
) -> Result<Var> {
    let (n, c, h, w) = dims;
    if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 {
        return Err(Error::shape("window_reverse", format!("{h}x{w} map is not tiled by {wh}x{ww} windows")));
    }
    let (nh, nw) = (h / wh, w / ww);
    let t = wh * ww;
    if g.shape(tokens) != [n * nh * nw, t, c] {
        return Err(Error::shape("window_reverse", format!("tokens {:?} do not match {dims:?}", g.shape(tokens))));
    }
    let mut index = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let win = (b * nh + y / wh) * nw + xx / ww;
                    let tok = (y % wh) * ww + xx % ww;
                    index.push((win * t + tok) * c + ch);
                }
            }
        }
    }
    g.gather(tokens, &[n, c, h, w], index)
}

/// Cyclic roll: `out[y][x] = in[(y + sy) mod H][(x + sx) mod W]`.
pub fn cyclic_shift<T: Scalar>(g: &mut Graph<'_, T>, x: Var, sy: isize, sx: isize) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4()?;
    if sy == 0 && sx == 0 {
        return Ok(x);
    }
    let mut index = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for y in 0..h {
            let src_y = (y as isize + sy).rem_euclid(h as isize) as usize;
            for xx in 0..w {
                let src_x = (xx as isize + sx).rem_euclid(w as isize) as usize;
                index.push((plane * h + src_y) * w + src_x);
            }
        }
    }
    g.gather(x, &[n, c, h, w], index)
}

/// Zero-pads the bottom and right edges up to `hp x wp`.
pub fn pad_bottom_right<T: Scalar>(g: &mut Graph<'_, T>, x: Var, hp: usize, wp: usize) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4()?;
    if hp < h || wp < w {
        return Err(Error::shape("pad_bottom_right", format!("{hp}x{wp} smaller than {h}x{w}")));
    }
    if (hp, wp) == (h, w) {
        return Ok(x);
    }
    let mut index = Vec::with_capacity(n * c * hp * wp);
    for plane in 0..n * c {
        for y in 0..hp {
            for xx in 0..wp {
                index.push(if y < h && xx < w { (plane * h + y) * w + xx } else { GATHER_ZERO });
            }
        }
    }
    g.gather(x, &[n, c, hp, wp], index)
}

/// Keeps the top-left `h x w` region.
pub fn crop<T: Scalar>(g: &mut Graph<'_, T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let (n, c, hp, wp) = g.value(x).dims4()?;
    if h > hp || w > wp {
        return Err(Error::shape("crop", format!("{h}x{w} larger than {hp}x{wp}")));
    }
    if (hp, wp) == (h, w) {
        return Ok(x);
    }
    let mut index = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                index.push((plane * hp + y) * wp + xx);
            }
        }
    }
    g.gather(x, &[n, c, h, w], index)
}

/// `[B, T, C]` tokens to `[B, heads, T, C/heads]`; channel `c` belongs to head `c / d`.
pub fn split_heads<T: Scalar>(g: &mut Graph<'_, T>, tokens: Var, heads: usize) -> Result<Var> {
    let [b, t, c] = g.shape(tokens)[..] else {
        return Err(Error::shape("split_heads", format!("expected [B, T, C], got {:?}", g.shape(tokens))));
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape("split_heads", format!("{c} channels not divisible into {heads} heads")));
    }
    let d = c / heads;
    let mut index = Vec::with_capacity(b * t * c);
    for bi in 0..b {
        for hh in 0..heads {
            for ti in 0..t {
                for j in 0..d {
                    index.push((bi * t + ti) * c + hh * d + j);
                }
            }
        }
    }
    g.gather(tokens, &[b, heads, t, d], index)
}

pub fn merge_heads<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let [b, heads, t, d] = g.shape(x)[..] else {
        return Err(Error::shape("merge_heads", format!("expected [B, h, T, d], got {:?}", g.shape(x))));
    };
    let c = heads * d;
    let mut index = Vec::with_capacity(b * t * c);
    for bi in 0..b {
        for ti in 0..t {
            for ch in 0..c {
                index.push(((bi * heads + ch / d) * t + ti) * d + ch % d);
            }
        }
    }
    g.gather(x, &[b, t, c], index)
}

/// Flat relative-position index `[T*T]` for a `wh x ww` token grid into a
/// `(2g-1)^2`-row bias table. Offsets beyond the table are clipped to its edge.
pub fn relative_position_index(wh: usize, ww: usize, table_window: usize) -> Vec<usize> {
    let span = 2 * table_window - 1;
    let lim = table_window as isize - 1;
    let t = wh * ww;
    let mut index = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = ((i / ww) as isize, (i % ww) as isize);
        for j in 0..t {
            let (yj, xj) = ((j / ww) as isize, (j % ww) as isize);
            let dy = (yi - yj).clamp(-lim, lim) + lim;
            let dx = (xi - xj).clamp(-lim, lim) + lim;
            index.push(dy as usize * span + dx as usize);
        }
    }
    index
}

/// Logit mask for a padded, optionally shifted map of `hp x wp` tiled into
/// `wh x ww` windows: returns `[windows, T, T]` with 0 for permitted pairs
/// and [`MASKED`] otherwise. A pair is blocked when the key is padding or
/// when the shift brought the two tokens from different sides of the wrap.
#[allow(clippy::too_many_arguments)]
pub fn window_mask<T: Scalar>(
    hp: usize,
    wp: usize,
    wh: usize,
    ww: usize,
    sy: usize,
    sx: usize,
    h: usize,
    w: usize,
) -> Tensor<T> {
    let region = |pos: usize, size: usize, win: usize, shift: usize| -> usize {
        if shift == 0 || pos < size - win {
            0
        } else if pos < size - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (hp / wh, wp / ww);
    let t = wh * ww;
    let mut data = vec![T::zero(); nh * nw * t * t];
    let neg = T::lit(MASKED);
    for wy in 0..nh {
        for wx in 0..nw {
            let win = wy * nw + wx;
            let coords: Vec<(usize, usize)> = (0..t).map(|k| (wy * wh + k / ww, wx * ww + k % ww)).collect();
            for (i, &(yi, xi)) in coords.iter().enumerate() {
                let ri = (region(yi, hp, wh, sy), region(xi, wp, ww, sx));
                for (j, &(yj, xj)) in coords.iter().enumerate() {
                    let rj = (region(yj, hp, wh, sy), region(xj, wp, ww, sx));
                    // position of the key in the unshifted padded map
                    let oy = (yj + sy) % hp;
                    let ox = (xj + sx) % wp;
                    let padding = oy >= h || ox >= w;
                    if ri != rj || padding {
                        data[(win * t + i) * t + j] = neg;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[nh * nw, t, t], data).expect("mask shape")
}

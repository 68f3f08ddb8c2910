use super::*;
use crate::gradcheck::{probe_weights, random_tensor, GradCheck};
use crate::tensor::seeded_rng;
use proptest::prelude::*;

fn build<T: Scalar>(channels: usize, cfg: &AttentionConfig, window: usize, seed: u64) -> (ParamStore<T>, TransformerLayerParams) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed);
    let p = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        TransformerLayerParams::new(&mut pb, "layer", channels, cfg, window)
    };
    (store, p)
}

fn cfg(variant: Variant, g: usize) -> AttentionConfig {
    AttentionConfig { variant, window: WindowSize::Fixed(g), heads: 2, ..AttentionConfig::default() }
}

fn randomize_bias(store: &mut ParamStore<f64>, p: &AttentionParams, seed: u64) {
    let t = store.get_mut(p.bias.table);
    let r = random_tensor(t.shape(), 0.5, seed);
    t.data_mut().copy_from_slice(r.data());
}

fn run_attention(store: &ParamStore<f64>, x: &Tensor<f64>, c: &AttentionConfig, p: &AttentionParams) -> Tensor<f64> {
    let mut g = Graph::new(store);
    let xv = g.input(x.clone());
    let y = self_attention(&mut g, xv, c, p).unwrap();
    g.value(y).clone()
}

fn qkv(g: &mut Graph<'_, f64>, q: &[f64], k: &[f64], v: &[f64], t: usize, d: usize) -> (Var, Var, Var) {
    let mk = |g: &mut Graph<'_, f64>, data: &[f64], rows: usize| g.input(Tensor::from_vec(&[1, 1, rows, d], data.to_vec()).unwrap());
    let (qv, kv, vv) = (mk(g, q, q.len() / d), mk(g, k, t), mk(g, v, t));
    (qv, kv, vv)
}

#[test]
fn single_key_returns_value() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let (q, k, v) = qkv(&mut g, &[3.0, -1.0, 0.2, 7.0], &[0.5, 0.5], &[1.25, -4.0], 1, 2);
    let o = scaled_dot_attention(&mut g, q, k, v, None, None).unwrap();
    assert_eq!(g.value(o).data(), &[1.25, -4.0, 1.25, -4.0]);
}

#[test]
fn identical_keys_average_values() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let (q, k, v) = qkv(&mut g, &[0.3, 0.9], &[1.0, 2.0, 1.0, 2.0], &[1.0, 3.0, 5.0, -1.0], 2, 2);
    let o = scaled_dot_attention(&mut g, q, k, v, None, None).unwrap();
    assert_eq!(g.value(o).data(), &[3.0, 1.0]);
}

#[test]
fn mismatched_extents_rejected() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let q = g.input(Tensor::zeros(&[1, 1, 2, 2]));
    let k = g.input(Tensor::zeros(&[1, 1, 3, 3]));
    let v = g.input(Tensor::zeros(&[1, 1, 3, 2]));
    assert!(scaled_dot_attention(&mut g, q, k, v, None, None).is_err());
    let k2 = g.input(Tensor::zeros(&[1, 1, 3, 2]));
    let v2 = g.input(Tensor::zeros(&[1, 1, 4, 2]));
    assert!(scaled_dot_attention(&mut g, q, k2, v2, None, None).is_err());
}

/// Naive softmax attention in f64 for one head.
fn naive_attention(q: &[f64], k: &[f64], v: &[f64], bias: &[f64], t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let logits: Vec<f64> = (0..t)
            .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt() + bias[i * t + j])
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for j in 0..t {
            for c in 0..d {
                out[i * d + c] += e[j] / s * v[j * d + c];
            }
        }
    }
    out
}

#[test]
fn four_tokens_match_naive_reference() {
    let (t, d) = (4, 2);
    let q = random_tensor(&[1, 1, t, d], 2.0, 1);
    let k = random_tensor(&[1, 1, t, d], 2.0, 2);
    let v = random_tensor(&[1, 1, t, d], 2.0, 3);
    let b = random_tensor(&[1, t, t], 1.0, 4);
    let want = naive_attention(q.data(), k.data(), v.data(), b.data(), t, d);

    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store);
    let (qv, kv, vv, bv) = (g.input(q.cast()), g.input(k.cast()), g.input(v.cast()), g.input(b.cast()));
    let o = scaled_dot_attention(&mut g, qv, kv, vv, Some(bv), None).unwrap();
    let got = g.value(o).data();
    for (a, w) in got.iter().zip(&want) {
        assert!((*a as f64 - w).abs() < 1e-6, "{a} vs {w}");
    }
}

#[test]
fn bias_matrix_gathers_table() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded_rng(0);
    let (b1, b2) = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        (RelativePositionBias::new(&mut pb.sub("a"), 1, 3), RelativePositionBias::new(&mut pb.sub("b"), 2, 2))
    };
    store.get_mut(b1.table).data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
    for (i, v) in store.get_mut(b2.table).data_mut().iter_mut().enumerate() {
        *v = i as f64;
    }
    let mut g = Graph::new(&store);
    let m1 = relative_bias_matrix(&mut g, &b1, 1, 1).unwrap();
    assert_eq!(g.shape(m1), &[3, 1, 1]);
    assert_eq!(g.value(m1).data(), &[0.5, -1.0, 2.0]);

    let m2 = relative_bias_matrix(&mut g, &b2, 2, 2).unwrap();
    let vals = g.value(m2).data().to_vec();
    for head in 0..2 {
        for i in 0..4 {
            for j in 0..4 {
                let dy = (i / 2) as isize - (j / 2) as isize;
                let dx = (i % 2) as isize - (j % 2) as isize;
                let row = ((dy + 1) * 3 + dx + 1) as usize;
                assert_eq!(vals[(head * 4 + i) * 4 + j], (row * 2 + head) as f64);
            }
        }
    }

    store.get_mut(b2.table).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut g = Graph::new(&store);
    let m = relative_bias_matrix(&mut g, &b2, 2, 2).unwrap();
    assert!(g.value(m).data().iter().all(|v| *v == 0.0));
}

#[test]
fn one_window_local_equals_standard() {
    let (store0, p) = build::<f64>(4, &cfg(Variant::LocalWindow, 4), 4, 11);
    let mut store = store0;
    randomize_bias(&mut store, &p.attn, 5);
    let x = random_tensor(&[2, 4, 4, 4], 1.0, 3);
    let local = run_attention(&store, &x, &cfg(Variant::LocalWindow, 4), &p.attn);
    let std = run_attention(&store, &x, &cfg(Variant::Standard, 4), &p.attn);
    assert!(local.max_abs_diff(&std) < 1e-5);
    // a window bigger than the map clamps to a single window
    let mut big = cfg(Variant::LocalWindow, 4);
    big.shift = true;
    let x3 = random_tensor(&[1, 4, 3, 3], 1.0, 4);
    let a = run_attention(&store, &x3, &big, &p.attn);
    let b = run_attention(&store, &x3, &cfg(Variant::Standard, 4), &p.attn);
    assert!(a.max_abs_diff(&b) < 1e-5);
}

#[test]
fn pooled_window_equal_to_map_equals_standard() {
    let (mut store, p) = build::<f64>(4, &cfg(Variant::EfficientGlobal, 4), 4, 12);
    randomize_bias(&mut store, &p.attn, 6);
    let x = random_tensor(&[1, 4, 4, 4], 1.0, 7);
    let eff = run_attention(&store, &x, &cfg(Variant::EfficientGlobal, 4), &p.attn);
    let std = run_attention(&store, &x, &cfg(Variant::Standard, 4), &p.attn);
    assert!(eff.max_abs_diff(&std) < 1e-5);
}

#[test]
fn constant_input_gives_constant_windows() {
    let (mut store, p) = build::<f64>(4, &cfg(Variant::LocalWindow, 2), 2, 13);
    store.get_mut(p.attn.bias.table).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut c = cfg(Variant::LocalWindow, 2);
    for shift in [false, true] {
        c.shift = shift;
        let x = Tensor::<f64>::full(&[1, 4, 4, 4], 0.7);
        let y = run_attention(&store, &x, &c, &p.attn);
        for ch in 0..4 {
            let plane = &y.data()[ch * 16..][..16];
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }
}

#[test]
fn oversized_window_rejected_unless_resampled() {
    let mut c = cfg(Variant::EfficientGlobal, 8);
    let (store, p) = build::<f64>(4, &c, 8, 14);
    let mut g = Graph::new(&store);
    let x = g.input(random_tensor(&[1, 4, 4, 6], 1.0, 1));
    assert!(efficient_global_attention(&mut g, x, &c, &p.attn).is_err());
    c.resample_small = true;
    let y = efficient_global_attention(&mut g, x, &c, &p.attn).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 4, 6]);
}

#[test]
fn ratio_window_resolves_from_extent() {
    let c = AttentionConfig { window: WindowSize::Ratio(64), ..AttentionConfig::default() };
    assert_eq!(c.window_for(1024).unwrap(), 16);
    assert_eq!(c.window_for(256).unwrap(), 4);
    assert!(c.window_for(32).is_err());
    assert_eq!(AttentionConfig::default().window_for(1).unwrap(), 16);
}

#[test]
fn efficient_global_core_flops_fixed_across_resolutions() {
    let c = cfg(Variant::EfficientGlobal, 16);
    let (store, p) = build::<f32>(8, &c, 16, 15);
    let mut cores = Vec::new();
    for size in [128usize, 256, 512] {
        let analytic = attention_flops(&p.attn, &c, 1, size, size).unwrap();
        cores.push(analytic.attn_core);
        if size == 128 {
            let mut g = Graph::new(&store);
            let x = g.input(random_tensor(&[1, 8, size, size], 1.0, 2).cast());
            self_attention(&mut g, x, &c, &p.attn).unwrap();
            assert_eq!(g.flops(), analytic);
        }
    }
    assert_eq!(cores[0], cores[1]);
    assert_eq!(cores[1], cores[2]);
    assert_eq!(cores[0], FlopCount::attention_core(1, 2, 256, 4).attn_core);
}

#[test]
fn ffn_zero_output_and_shape() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded_rng(3);
    let p = MixedFfnParams::new(&mut ParamBuilder::new(&mut store, &mut rng), "ffn", 3, 4);
    let x = random_tensor(&[1, 3, 5, 2], 1.0, 9);
    {
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let y = mixed_ffn(&mut g, xv, &p).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 5, 2]);
        assert!(g.value(y).data().iter().any(|v| *v != 0.0));
    }
    p.pw2.zero(&mut store);
    let mut g = Graph::new(&store);
    let xv = g.input(x);
    let y = mixed_ffn(&mut g, xv, &p).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    assert_eq!(p.param_count(), (3 * 12 + 12) + 24 + (12 * 9 + 12) + 24 + (12 * 3 + 3));
}

#[test]
fn ffn_gradcheck() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded_rng(4);
    let p = MixedFfnParams::new(&mut ParamBuilder::new(&mut store, &mut rng), "ffn", 4, 4);
    let x = random_tensor(&[1, 4, 4, 4], 1.0, 10);
    let probe = probe_weights(&[1, 4, 4, 4], 1);
    let report = GradCheck::default()
        .run(&mut store, |g| {
            let xv = g.input(x.clone());
            let y = mixed_ffn(g, xv, &p)?;
            g.weighted_sum(y, probe.clone())
        })
        .unwrap();
    assert!(report.passed(1e-3), "{report:?}");
}

#[test]
fn zeroed_outputs_make_layer_identity() {
    for variant in [Variant::Standard, Variant::LocalWindow, Variant::EfficientGlobal] {
        let mut c = cfg(variant, 2);
        c.shift = variant == Variant::LocalWindow;
        let (mut store, p) = build::<f64>(4, &c, 2, 16);
        let x = random_tensor(&[2, 4, 4, 6], 1.0, 5);
        let run = |s: &ParamStore<f64>| {
            let mut g = Graph::new(s);
            let xv = g.input(x.clone());
            let y = transformer_layer(&mut g, xv, &p, &c).unwrap();
            g.value(y).clone()
        };
        let before = run(&store);
        assert_eq!(before.shape(), x.shape());
        assert!(before.max_abs_diff(&x) > 0.0);
        p.zero_outputs(&mut store);
        assert_eq!(run(&store), x, "{variant:?}");
    }
}

fn layer_gradcheck(c: &AttentionConfig, shape: [usize; 4], g: usize, seed: u64) {
    let (mut store, p) = build::<f64>(shape[1], c, g, seed);
    randomize_bias(&mut store, &p.attn, seed + 1);
    let x = random_tensor(&shape, 1.0, seed + 2);
    let probe = probe_weights(&shape, seed + 3);
    let report = GradCheck::default()
        .run(&mut store, |gr| {
            let xv = gr.input(x.clone());
            let y = transformer_layer(gr, xv, &p, c)?;
            gr.weighted_sum(y, probe.clone())
        })
        .unwrap();
    assert!(report.passed(1e-3), "{:?}", report.failures(1e-3).collect::<Vec<_>>());
}

#[test]
fn efficient_global_layer_gradcheck() {
    layer_gradcheck(&cfg(Variant::EfficientGlobal, 4), [1, 8, 8, 8], 4, 20);
}

#[test]
fn shifted_padded_window_layer_gradcheck() {
    let mut c = cfg(Variant::LocalWindow, 4);
    c.shift = true;
    layer_gradcheck(&c, [1, 4, 6, 7], 4, 30);
}

#[test]
fn standard_layer_gradcheck() {
    layer_gradcheck(&cfg(Variant::Standard, 2), [1, 4, 3, 3], 2, 40);
}

/// Pixel-loop reference for shifted-window attention: queries see exactly
/// the keys that share their shifted window and were contiguous before the
/// shift; bias is looked up by the original coordinate offset.
#[allow(clippy::too_many_arguments)]
fn naive_shifted_window(
    store: &ParamStore<f64>,
    p: &AttentionParams,
    x: &Tensor<f64>,
    win: usize,
    s: usize,
) -> Vec<f64> {
    let (_, c, h, w) = x.dims4().unwrap();
    let proj = |cp: &ConvParams| -> Vec<f64> {
        let wt = store.get(cp.weight).data();
        let b = store.get(cp.bias.unwrap()).data();
        let mut out = vec![0.0; c * h * w];
        for o in 0..c {
            for pix in 0..h * w {
                out[o * h * w + pix] = b[o] + (0..c).map(|i| wt[o * c + i] * x.data()[i * h * w + pix]).sum::<f64>();
            }
        }
        out
    };
    let (q, k, v) = (proj(&p.wq), proj(&p.wk), proj(&p.wv));
    let table = store.get(p.bias.table).data();
    let (heads, d) = (p.heads, p.head_dim);
    let span = 2 * win - 1;
    let shifted = |y: usize, x: usize| ((y + h - s) % h, (x + w - s) % w);
    let mut attn_out = vec![0.0; c * h * w];
    for qy in 0..h {
        for qx in 0..w {
            let (sqy, sqx) = shifted(qy, qx);
            let keys: Vec<(usize, usize)> = (0..h)
                .flat_map(|ky| (0..w).map(move |kx| (ky, kx)))
                .filter(|&(ky, kx)| {
                    let (sky, skx) = shifted(ky, kx);
                    sky / win == sqy / win && skx / win == sqx / win && ky.abs_diff(qy) < win && kx.abs_diff(qx) < win
                })
                .collect();
            for head in 0..heads {
                let logits: Vec<f64> = keys
                    .iter()
                    .map(|&(ky, kx)| {
                        let dot: f64 = (0..d)
                            .map(|j| {
                                let ch = head * d + j;
                                q[ch * h * w + qy * w + qx] * k[ch * h * w + ky * w + kx]
                            })
                            .sum();
                        let dy = (qy as isize - ky as isize + win as isize - 1) as usize;
                        let dx = (qx as isize - kx as isize + win as isize - 1) as usize;
                        dot / (d as f64).sqrt() + table[(dy * span + dx) * heads + head]
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..d {
                    let ch = head * d + j;
                    attn_out[ch * h * w + qy * w + qx] =
                        keys.iter().zip(&e).map(|(&(ky, kx), e)| e / z * v[ch * h * w + ky * w + kx]).sum();
                }
            }
        }
    }
    let wo = store.get(p.wo.weight).data();
    let bo = store.get(p.wo.bias.unwrap()).data();
    let mut out = vec![0.0; c * h * w];
    for o in 0..c {
        for pix in 0..h * w {
            out[o * h * w + pix] = bo[o] + (0..c).map(|i| wo[o * c + i] * attn_out[i * h * w + pix]).sum::<f64>();
        }
    }
    out
}

#[test]
fn shifted_windows_match_pixel_reference() {
    let mut c = cfg(Variant::LocalWindow, 4);
    c.shift = true;
    let (mut store, p) = build::<f64>(4, &c, 4, 50);
    randomize_bias(&mut store, &p.attn, 51);
    let x = random_tensor(&[1, 4, 8, 8], 1.0, 52);
    let got = run_attention(&store, &x, &c, &p.attn);
    let want = naive_shifted_window(&store, &p.attn, &x, 4, 2);
    let err = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-10, "{err}");
}

#[test]
fn effective_heads_divides_channels() {
    assert_eq!(effective_heads(128, 4), 4);
    assert_eq!(effective_heads(6, 4), 3);
    assert_eq!(effective_heads(7, 4), 1);
    assert_eq!(effective_heads(2, 8), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn attention_rows_are_distributions(b in 1usize..3, h in 1usize..3, t in 1usize..7, d in 1usize..4, seed in 0u64..1000) {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let q = g.input(random_tensor(&[b, h, t, d], 3.0, seed));
        let k = g.input(random_tensor(&[b, h, t, d], 3.0, seed + 1));
        let bias = g.input(random_tensor(&[h, t, t], 2.0, seed + 2));
        let a = attention_weights(&mut g, q, k, Some(bias), None).unwrap();
        for row in g.value(a).data().chunks(t) {
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn permuting_keys_and_values_together_is_invariant(t in 2usize..7, d in 1usize..4, i in 0usize..7, j in 0usize..7, seed in 0u64..1000) {
        let (i, j) = (i % t, j % t);
        let q = random_tensor(&[1, 1, t, d], 1.0, seed);
        let k = random_tensor(&[1, 1, t, d], 1.0, seed + 1);
        let v = random_tensor(&[1, 1, t, d], 1.0, seed + 2);
        let swap = |x: &Tensor<f64>| {
            let mut data = x.data().to_vec();
            for c in 0..d {
                data.swap(i * d + c, j * d + c);
            }
            Tensor::from_vec(x.shape(), data).unwrap()
        };
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
        let a = scaled_dot_attention(&mut g, qv, kv, vv, None, None).unwrap();
        let (ks, vs) = (g.input(swap(&k)), g.input(swap(&v)));
        let b = scaled_dot_attention(&mut g, qv, ks, vs, None, None).unwrap();
        prop_assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
    }

    #[test]
    fn analytic_flops_match_graph_counter(variant in 0usize..3, shift in any::<bool>(), n in 1usize..3, h in 2usize..10, w in 2usize..10, win in 2usize..5) {
        let variant = [Variant::Standard, Variant::LocalWindow, Variant::EfficientGlobal][variant];
        let mut c = cfg(variant, win);
        c.shift = shift;
        c.resample_small = true;
        let (store, p) = build::<f64>(4, &c, win, 60);
        let mut g = Graph::new(&store);
        let x = g.input(random_tensor(&[n, 4, h, w], 1.0, 61));
        let y = transformer_layer(&mut g, x, &p, &c).unwrap();
        prop_assert_eq!(g.shape(y), &[n, 4, h, w]);
        prop_assert_eq!(g.flops(), p.flops(&c, n, h, w).unwrap());
    }
}

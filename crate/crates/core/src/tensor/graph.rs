//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward op together with whatever the backward
//! pass needs (argmax indices, normalisation statistics, ...). Nodes are
//! appended in execution order, so a reverse sweep over the tape is a valid
//! topological order.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom, NormStats};
use super::params::{ParamId, ParamStore};
use super::value::{check_rank, Tensor};
use crate::error::{Error, Result};
use crate::flops::FlopCount;
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Marks a gather index that produces zero (used for padding).
pub const GATHER_ZERO: usize = usize::MAX;

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: NormStats<T> },
    Gelu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    MaxPool { x: Var, arg: Vec<usize> },
    Gather { x: Var, index: Vec<usize> },
    SliceChannels { x: Var, start: usize },
    Concat { a: Var, b: Var },
    Add(Var, Var),
    AddTrailing(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(MatMulSpec),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Fused { inputs: Vec<Var>, local: Vec<Vec<T>> },
}

#[derive(Clone, Copy)]
struct MatMulSpec {
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    batch_a: usize,
    batch_b: usize,
    rsa: isize,
    csa: isize,
    rsb: isize,
    csb: isize,
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    requires_grad: bool,
}

/// Records a forward computation against a parameter store.
pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    flops: FlopCount,
    attn_scope: usize,
}

/// Result of a backward sweep: gradients of every grad-requiring node and of
/// every parameter reached from the loss.
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &[(ParamId, Vec<T>)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Adds the parameter gradients of one backward pass into the grad buffers.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in &grads.params {
            let buf = self.get_mut(*id).grad_mut();
            for (a, b) in buf.iter_mut().zip(g) {
                *a = *a + *b;
            }
        }
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph { store, nodes: Vec::new(), param_nodes: HashMap::new(), flops: FlopCount::default(), attn_scope: 0 }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> FlopCount {
        self.flops
    }

    /// Runs `f` with matmul/softmax FLOPs additionally attributed to the
    /// attention core.
    pub fn attention_scope<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        self.attn_scope += 1;
        let r = f(self);
        self.attn_scope -= 1;
        r
    }

    fn count(&mut self, flops: u64, core: bool) {
        self.flops.total += flops;
        if core && self.attn_scope > 0 {
            self.flops.attn_core += flops;
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value: Some(value), requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not receive a gradient (images, masks, targets).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: Some(t), requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is retained by [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: Some(t), requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad, groups)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} vs Cout={}", self.shape(b), geom.cout)));
            }
        }
        let mut out = Tensor::zeros(&geom.out_shape());
        kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            out.data_mut(),
        );
        self.count(2 * geom.macs(), false);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Conv { x, w, b, geom }, out, &inputs))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        if self.shape(gamma) != [dims.1] || self.shape(beta) != [dims.1] {
            return Err(Error::shape(
                "layer_norm",
                format!("input has C={} but gamma {:?}, beta {:?}", dims.1, self.shape(gamma), self.shape(beta)),
            ));
        }
        let mut out = Tensor::zeros(self.shape(x));
        let stats = kernels::layer_norm_forward(
            dims,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            T::lit(eps),
            out.data_mut(),
        );
        Ok(self.push(Op::LayerNorm { x, gamma, beta, stats }, out, &[x, gamma, beta]))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let src = self.value(x);
        Tensor::from_vec(src.shape(), src.data().iter().map(|v| f(*v)).collect()).expect("same shape")
    }

    /// Exact GeLU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, gelu);
        self.push(Op::Gelu(x), out, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.map(x, softplus);
        self.push(Op::Softplus(x), out, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, sigmoid);
        self.push(Op::Sigmoid(x), out, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let mut out = Tensor::zeros(&shape);
        kernels::softmax_forward(&shape, axis, self.value(x).data(), out.data_mut());
        self.count(5 * out.numel() as u64, true);
        Ok(self.push(Op::Softmax { x, axis }, out, &[x]))
    }

    pub fn adaptive_max_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let (n, c, h, w) = dims;
        if oh == 0 || ow == 0 {
            return Err(Error::invalid("adaptive_max_pool2d", "output extent must be positive"));
        }
        if oh > h || ow > w {
            return Err(Error::invalid(
                "adaptive_max_pool2d",
                format!("output {oh}x{ow} larger than input {h}x{w}"),
            ));
        }
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let arg = kernels::adaptive_max_pool_forward(dims, oh, ow, self.value(x).data(), out.data_mut());
        self.count((n * c * h * w) as u64, false);
        Ok(self.push(Op::MaxPool { x, arg }, out, &[x]))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, shape: &[usize], index: Vec<usize>) -> Result<Var> {
        check_rank("gather", shape)?;
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", format!("{shape:?} vs {} indices", index.len())));
        }
        let src = self.value(x).data();
        if let Some(bad) = index.iter().find(|i| **i != GATHER_ZERO && **i >= src.len()) {
            return Err(Error::invalid("gather", format!("index {bad} out of range {}", src.len())));
        }
        let data = index.iter().map(|&i| if i == GATHER_ZERO { T::zero() } else { src[i] }).collect();
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(Op::Gather { x, index }, out, &[x]))
    }

    /// Nearest-neighbour resize of an NCHW map; source row for output row `y`
    /// is `floor(y * H / out_h)`.
    pub fn resize_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize_nearest", "output extent must be positive"));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(x);
        }
        let mut index = Vec::with_capacity(n * c * out_h * out_w);
        for plane in 0..n * c {
            for y in 0..out_h {
                let sy = y * h / out_h;
                for xx in 0..out_w {
                    index.push((plane * h + sy) * w + xx * w / out_w);
                }
            }
        }
        self.gather(x, &[n, c, out_h, out_w], index)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        self.resize_nearest(x, 2 * h, 2 * w)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_channels", format!("[{start}, {}) outside {c} channels", start + len)));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            data.extend_from_slice(&src[(b * c + start) * hw..][..len * hw]);
        }
        let out = Tensor::from_vec(&[n, len, h, w], data)?;
        Ok(self.push(Op::SliceChannels { x, start }, out, &[x]))
    }

    pub fn split_channels(&mut self, x: Var, at: usize) -> Result<(Var, Var)> {
        let c = self.value(x).dims4()?.1;
        if at == 0 || at >= c {
            return Err(Error::shape("split_channels", format!("split point {at} outside 1..{c}")));
        }
        Ok((self.slice_channels(x, 0, at)?, self.slice_channels(x, at, c - at)?))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("N/H/W differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let hw = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(na * (ca + cb) * hw);
        for n in 0..na {
            data.extend_from_slice(&da[n * ca * hw..][..ca * hw]);
            data.extend_from_slice(&db[n * cb * hw..][..cb * hw]);
        }
        let out = Tensor::from_vec(&[na, ca + cb, ha, wa], data)?;
        Ok(self.push(Op::Concat { a, b }, out, &[a, b]))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    /// Adds `b` to every leading-index slice of `a`; `b`'s shape must equal
    /// a suffix of `a`'s shape.
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_trailing", format!("{sb:?} is not a suffix of {sa:?}")));
        }
        let src = self.value(b).data();
        let inner = src.len();
        let base = self.value(a);
        let data = base.data().iter().enumerate().map(|(i, v)| *v + src[i % inner]).collect();
        let out = Tensor::from_vec(base.shape(), data)?;
        Ok(self.push(Op::AddTrailing(a, b), out, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.map(x, |v| v * c);
        self.push(Op::Scale(x, c), out, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.map(x, |v| v + c);
        self.push(Op::AddScalar(x), out, &[x])
    }

    /// Batched matrix product over the last two axes. With `trans_a` the
    /// stored operand is `[.., K, M]`; with `trans_b` it is `[.., N, K]`.
    /// Leading extents must match, or one operand must have a single batch.
    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("operands must be at least rank 2: {sa:?}, {sb:?}")));
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (m, ka) = if trans_a { (sa[ra - 1], sa[ra - 2]) } else { (sa[ra - 2], sa[ra - 1]) };
        let (kb, n) = if trans_b { (sb[rb - 1], sb[rb - 2]) } else { (sb[rb - 2], sb[rb - 1]) };
        if ka != kb {
            return Err(Error::shape("matmul", format!("inner extents differ: {sa:?} x {sb:?}")));
        }
        let (lead_a, lead_b) = (&sa[..ra - 2], &sb[..rb - 2]);
        let (batch_a, batch_b) = (lead_a.iter().product::<usize>(), lead_b.iter().product::<usize>());
        let lead = if lead_a == lead_b || batch_b == 1 {
            lead_a
        } else if batch_a == 1 {
            lead_b
        } else {
            return Err(Error::shape("matmul", format!("batch extents not broadcastable: {sa:?} x {sb:?}")));
        };
        let batch = batch_a.max(batch_b);
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        check_rank("matmul", &shape)?;
        let (rsa, csa) = if trans_a { (1, m as isize) } else { (ka as isize, 1) };
        let (rsb, csb) = if trans_b { (1, ka as isize) } else { (n as isize, 1) };
        let spec = MatMulSpec { a, b, m, k: ka, n, batch, batch_a, batch_b, rsa, csa, rsb, csb };
        let mut out = Tensor::zeros(&shape);
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            for i in 0..batch {
                let ao = if batch_a == 1 { 0 } else { i * m * ka };
                let bo = if batch_b == 1 { 0 } else { i * ka * n };
                T::gemm(m, ka, n, T::one(), &da[ao..], rsa, csa, &db[bo..], rsb, csb, T::zero(), &mut od[i * m * n..], n as isize, 1);
            }
        }
        self.count((2 * batch * m * ka * n) as u64, true);
        Ok(self.push(Op::MatMul(spec), out, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), out, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.numel() as f64);
        self.push(Op::Mean(x), Tensor::scalar(s), &[x])
    }

    /// `sum(x * weights)` against a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let w = self.input(weights);
        let p = self.mul(x, w)?;
        Ok(self.sum(p))
    }

    /// Scalar node whose value and local derivatives were computed outside
    /// the tape. `local[i]` is `d value / d inputs[i]`, same length as that input.
    pub fn fused_scalar(&mut self, inputs: Vec<Var>, value: T, local: Vec<Vec<T>>) -> Result<Var> {
        if inputs.len() != local.len() {
            return Err(Error::invalid("fused_scalar", "one local gradient per input"));
        }
        for (v, l) in inputs.iter().zip(&local) {
            if self.value(*v).numel() != l.len() {
                return Err(Error::shape("fused_scalar", "local gradient length differs from input"));
            }
        }
        let ins = inputs.clone();
        Ok(self.push(Op::Fused { inputs, local }, Tensor::scalar(value), &ins))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_t = self.value(loss);
        if loss_t.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_t.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }

        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = grads[i].take() {
                    params.push((id, g));
                }
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { nodes: grads, params })
    }

    fn backward_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut slots = Slots { graph: self, grads };
        let y = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, w, b, geom } => {
                let mut dx = slots.take(*x);
                let mut dw = slots.take(*w);
                let mut db = b.and_then(|b| slots.take(b));
                kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                slots.give(*x, dx);
                slots.give(*w, dw);
                if let Some(b) = b {
                    slots.give(*b, db);
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let dims = self.value(*x).dims4().expect("rank 4");
                let mut dx = slots.take(*x);
                let mut dg = slots.take(*gamma);
                let mut dbt = slots.take(*beta);
                kernels::layer_norm_backward(
                    dims,
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    stats,
                    gy,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    dbt.as_deref_mut(),
                );
                slots.give(*x, dx);
                slots.give(*gamma, dg);
                slots.give(*beta, dbt);
            }
            Op::Gelu(x) => slots.unary(*x, gy, |xv, _, g| g * gelu_grad(xv)),
            Op::Softplus(x) => slots.unary(*x, gy, |xv, _, g| g * sigmoid(xv)),
            Op::Sigmoid(x) => slots.unary(*x, gy, |xv, _, g| {
                let s = sigmoid(xv);
                g * s * (T::one() - s)
            }),
            Op::Scale(x, c) => {
                let c = *c;
                slots.unary(*x, gy, |_, _, g| g * c)
            }
            Op::AddScalar(x) | Op::Reshape(x) => slots.unary(*x, gy, |_, _, g| g),
            Op::Softmax { x, axis } => {
                if let Some(mut dx) = slots.take(*x) {
                    kernels::softmax_backward(y.shape(), *axis, y.data(), gy, &mut dx);
                    slots.give(*x, Some(dx));
                }
            }
            Op::MaxPool { x, arg } => {
                if let Some(mut dx) = slots.take(*x) {
                    for (g, &a) in gy.iter().zip(arg) {
                        dx[a] = dx[a] + *g;
                    }
                    slots.give(*x, Some(dx));
                }
            }
            Op::Gather { x, index } => {
                if let Some(mut dx) = slots.take(*x) {
                    for (g, &k) in gy.iter().zip(index) {
                        if k != GATHER_ZERO {
                            dx[k] = dx[k] + *g;
                        }
                    }
                    slots.give(*x, Some(dx));
                }
            }
            Op::SliceChannels { x, start } => {
                if let Some(mut dx) = slots.take(*x) {
                    let (n, c, h, w) = self.value(*x).dims4().expect("rank 4");
                    let len = y.shape()[1];
                    let hw = h * w;
                    for b in 0..n {
                        let dst = &mut dx[(b * c + start) * hw..][..len * hw];
                        for (d, g) in dst.iter_mut().zip(&gy[b * len * hw..][..len * hw]) {
                            *d = *d + *g;
                        }
                    }
                    slots.give(*x, Some(dx));
                }
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4().expect("rank 4");
                let cb = self.value(*b).dims4().expect("rank 4").1;
                let hw = h * w;
                for (v, off, c) in [(*a, 0, ca), (*b, ca, cb)] {
                    if let Some(mut d) = slots.take(v) {
                        for bi in 0..n {
                            let src = &gy[(bi * (ca + cb) + off) * hw..][..c * hw];
                            for (dst, g) in d[bi * c * hw..][..c * hw].iter_mut().zip(src) {
                                *dst = *dst + *g;
                            }
                        }
                        slots.give(v, Some(d));
                    }
                }
            }
            Op::Add(a, b) => {
                slots.unary(*a, gy, |_, _, g| g);
                slots.unary(*b, gy, |_, _, g| g);
            }
            Op::AddTrailing(a, b) => {
                slots.unary(*a, gy, |_, _, g| g);
                if let Some(mut d) = slots.take(*b) {
                    let inner = d.len();
                    for (k, g) in gy.iter().enumerate() {
                        d[k % inner] = d[k % inner] + *g;
                    }
                    slots.give(*b, Some(d));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(mut d) = slots.take(*a) {
                    for k in 0..d.len() {
                        d[k] = d[k] + gy[k] * vb[k];
                    }
                    slots.give(*a, Some(d));
                }
                if let Some(mut d) = slots.take(*b) {
                    for k in 0..d.len() {
                        d[k] = d[k] + gy[k] * va[k];
                    }
                    slots.give(*b, Some(d));
                }
            }
            Op::MatMul(s) => {
                let (m, k, n) = (s.m, s.k, s.n);
                if let Some(mut da) = slots.take(s.a) {
                    let db = self.value(s.b).data();
                    for i in 0..s.batch {
                        let ao = if s.batch_a == 1 { 0 } else { i * m * k };
                        let bo = if s.batch_b == 1 { 0 } else { i * k * n };
                        // dA = dC * B^T, written through A's storage strides
                        T::gemm(m, n, k, T::one(), &gy[i * m * n..], n as isize, 1, &db[bo..], s.csb, s.rsb, T::one(), &mut da[ao..], s.rsa, s.csa);
                    }
                    slots.give(s.a, Some(da));
                }
                if let Some(mut dbuf) = slots.take(s.b) {
                    let da = self.value(s.a).data();
                    for i in 0..s.batch {
                        let ao = if s.batch_a == 1 { 0 } else { i * m * k };
                        let bo = if s.batch_b == 1 { 0 } else { i * k * n };
                        // dB = A^T * dC
                        T::gemm(k, m, n, T::one(), &da[ao..], s.csa, s.rsa, &gy[i * m * n..], n as isize, 1, T::one(), &mut dbuf[bo..], s.rsb, s.csb);
                    }
                    slots.give(s.b, Some(dbuf));
                }
            }
            Op::Sum(x) => {
                let g = gy[0];
                slots.unary(*x, &[], |_, _, _| g)
            }
            Op::Mean(x) => {
                let g = gy[0] / T::lit(self.value(*x).numel() as f64);
                slots.unary(*x, &[], |_, _, _| g)
            }
            Op::Fused { inputs, local } => {
                let g = gy[0];
                for (v, l) in inputs.iter().zip(local) {
                    if let Some(mut d) = slots.take(*v) {
                        for (dst, lv) in d.iter_mut().zip(l) {
                            *dst = *dst + g * *lv;
                        }
                        slots.give(*v, Some(d));
                    }
                }
            }
        }
    }
}

struct Slots<'a, 'g, 's, T: Scalar> {
    graph: &'g Graph<'s, T>,
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> Slots<'_, '_, '_, T> {
    /// Removes the accumulated gradient buffer of `v` (zeros if none yet), or
    /// `None` when `v` does not require a gradient.
    fn take(&mut self, v: Var) -> Option<Vec<T>> {
        if !self.graph.nodes[v.0].requires_grad {
            return None;
        }
        Some(self.grads[v.0].take().unwrap_or_else(|| vec![T::zero(); self.graph.value(v).numel()]))
    }

    fn give(&mut self, v: Var, buf: Option<Vec<T>>) {
        let Some(buf) = buf else { return };
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(&buf) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(buf),
        }
    }

    /// Elementwise rule `dx += f(x, y, dy)`; an empty `gy` broadcasts a scalar rule.
    fn unary(&mut self, x: Var, gy: &[T], f: impl Fn(T, T, T) -> T) {
        let Some(mut d) = self.take(x) else { return };
        let xv = self.graph.value(x).data();
        for k in 0..d.len() {
            let g = if gy.is_empty() { T::zero() } else { gy[k] };
            d[k] = d[k] + f(xv[k], T::zero(), g);
        }
        self.give(x, Some(d));
    }
}

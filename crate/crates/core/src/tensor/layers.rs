//! Parameterised building blocks shared by every network stage.

use super::{Graph, ParamBuilder, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::flops::FlopCount;
use crate::scalar::Scalar;

/// Convolution weights `[Cout, Cin/groups, K, K]`, optional bias `[Cout]`,
/// and the stride/padding/grouping they are applied with.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn pointwise(cin: usize, cout: usize) -> Self {
        ConvSpec { cin, cout, kernel: 1, stride: 1, padding: 0, groups: 1, bias: true }
    }

    /// 3x3 with padding 1.
    pub fn k3(cin: usize, cout: usize, stride: usize) -> Self {
        ConvSpec { cin, cout, kernel: 3, stride, padding: 1, groups: 1, bias: true }
    }

    pub fn depthwise3(channels: usize) -> Self {
        ConvSpec { cin: channels, cout: channels, kernel: 3, stride: 1, padding: 1, groups: channels, bias: true }
    }
}

impl ConvParams {
    /// He-uniform weights, zero bias.
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, spec: ConvSpec) -> Self {
        assert!(spec.cin.is_multiple_of(spec.groups) && spec.cout.is_multiple_of(spec.groups), "{name}: channels not divisible by groups");
        let mut sub = pb.sub(name);
        let fan_in = spec.cin / spec.groups * spec.kernel * spec.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = sub.uniform("weight", &[spec.cout, spec.cin / spec.groups, spec.kernel, spec.kernel], bound);
        let bias = spec.bias.then(|| sub.zeros("bias", &[spec.cout]));
        ConvParams {
            weight,
            bias,
            cin: spec.cin,
            cout: spec.cout,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }

    pub fn out_extent(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn flops(&self, n: usize, h: usize, w: usize) -> FlopCount {
        FlopCount::conv(n, self.cout, self.out_extent(h), self.out_extent(w), self.cin / self.groups, self.kernel, self.kernel)
    }

    pub fn param_count(&self) -> usize {
        self.cout * (self.cin / self.groups) * self.kernel * self.kernel + if self.bias.is_some() { self.cout } else { 0 }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        v
    }

    /// Sets weight and bias to zero.
    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for id in self.param_ids() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Makes a pointwise `C -> C` convolution the identity.
    pub fn set_identity<T: Scalar>(&self, store: &mut ParamStore<T>) {
        assert!(self.kernel == 1 && self.cin == self.cout && self.groups == 1, "identity needs a square 1x1 conv");
        self.zero(store);
        let w = store.get_mut(self.weight).data_mut();
        for c in 0..self.cout {
            w[c * self.cin + c] = T::one();
        }
    }
}

/// Channel-wise layer normalisation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

pub const NORM_EPS: f64 = 1e-5;

impl NormParams {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let mut sub = pb.sub(name);
        let gamma = sub.constant("gamma", &[channels], 1.0);
        let beta = sub.zeros("beta", &[channels]);
        NormParams { gamma, beta, channels }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, NORM_EPS)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Convolution followed by layer normalisation and GeLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNormAct {
    pub conv: ConvParams,
    pub norm: NormParams,
}

impl ConvNormAct {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, spec: ConvSpec) -> Self {
        let mut sub = pb.sub(name);
        let conv = ConvParams::new(&mut sub, "conv", spec);
        let norm = NormParams::new(&mut sub, "norm", spec.cout);
        ConvNormAct { conv, norm }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.norm.forward(g, y)?;
        Ok(g.gelu(y))
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.norm.param_count()
    }
}

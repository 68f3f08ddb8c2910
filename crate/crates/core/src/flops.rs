//! Analytic operation counts.
//!
//! Counted terms: convolutions and matrix products at 2 FLOPs per
//! multiply-accumulate, softmax at 5 FLOPs per logit (scale, bias, exp, sum,
//! normalise), adaptive max-pooling at one comparison per input element.
//! Elementwise activations, normalisation and data movement are not counted.
//! The attention core is the logit product, the softmax and the value
//! product of every self-attention evaluation.

use std::ops::{Add, AddAssign};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub attn_core: u64,
    pub total: u64,
}

impl FlopCount {
    pub fn conv(n: usize, cout: usize, ho: usize, wo: usize, cin_per_group: usize, kh: usize, kw: usize) -> Self {
        let total = 2 * (n * cout * ho * wo * cin_per_group * kh * kw) as u64;
        FlopCount { attn_core: 0, total }
    }

    pub fn max_pool(input_numel: usize) -> Self {
        FlopCount { attn_core: 0, total: input_numel as u64 }
    }

    /// `batch` independent attentions of `heads` heads over `tokens` tokens of
    /// width `head_dim`.
    pub fn attention_core(batch: usize, heads: usize, tokens: usize, head_dim: usize) -> Self {
        let logits = (batch * heads * tokens * tokens) as u64;
        let core = 2 * logits * head_dim as u64 * 2 + 5 * logits;
        FlopCount { attn_core: core, total: core }
    }
}

impl Add for FlopCount {
    type Output = FlopCount;

    fn add(self, rhs: FlopCount) -> FlopCount {
        FlopCount { attn_core: self.attn_core + rhs.attn_core, total: self.total + rhs.total }
    }
}

impl AddAssign for FlopCount {
    fn add_assign(&mut self, rhs: FlopCount) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for FlopCount {
    fn sum<I: Iterator<Item = FlopCount>>(iter: I) -> FlopCount {
        iter.fold(FlopCount::default(), Add::add)
    }
}

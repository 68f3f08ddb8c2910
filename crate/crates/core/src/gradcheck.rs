//! Central finite-difference audit of analytic gradients on an `f64` replay.

use rand::seq::index::sample;

use crate::error::Result;
use crate::tensor::{seeded_rng, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Central difference step.
    pub step: f64,
    /// Entries probed per parameter tensor; smaller tensors are probed fully.
    pub samples_per_param: usize,
    /// Lower bound of the relative-error denominator, so entries whose true
    /// derivative is ~0 are judged by absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-3, samples_per_param: 16, floor: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub groups: Vec<GroupReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < tol)
    }

    pub fn failures(&self, tol: f64) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(move |g| !(g.max_rel_err < tol))
    }

    pub fn merge(&mut self, prefix: &str, other: GradReport) {
        for mut g in other.groups {
            g.name = format!("{prefix}{}", g.name);
            self.groups.push(g);
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

impl GradCheck {
    /// Compares the backward pass of `loss_fn` against central differences for
    /// every parameter in `store`. `loss_fn` must be a deterministic function
    /// of the store that returns a scalar node.
    pub fn run<F>(&self, store: &mut ParamStore<f64>, loss_fn: F) -> Result<GradReport>
    where
        F: Fn(&mut Graph<f64>) -> Result<Var>,
    {
        let analytic: Vec<Option<Vec<f64>>> = {
            let mut g = Graph::new(store);
            let loss = loss_fn(&mut g)?;
            let grads = g.backward(loss)?;
            store.ids().map(|id| grads.param(id).map(<[f64]>::to_vec)).collect()
        };
        let eval = |s: &ParamStore<f64>| -> Result<f64> {
            let mut g = Graph::new(s);
            let loss = loss_fn(&mut g)?;
            Ok(g.value(loss).data()[0])
        };

        let mut rng = seeded_rng(self.seed);
        let mut report = GradReport::default();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let numel = store.get(id).numel();
            let picks: Vec<usize> = if numel <= self.samples_per_param {
                (0..numel).collect()
            } else {
                let mut v = sample(&mut rng, numel, self.samples_per_param).into_vec();
                v.sort_unstable();
                v
            };
            let grad = analytic[id.index()].clone().unwrap_or_else(|| vec![0.0; numel]);
            let mut worst: f64 = 0.0;
            for i in picks.iter().copied() {
                let orig = store.get(id).data()[i];
                store.get_mut(id).data_mut()[i] = orig + self.step;
                let plus = eval(store)?;
                store.get_mut(id).data_mut()[i] = orig - self.step;
                let minus = eval(store)?;
                store.get_mut(id).data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let err = relative_error(grad[i], numeric, self.floor);
                worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
            }
            report.groups.push(GroupReport {
                name: store.name(id).to_string(),
                checked: picks.len(),
                max_rel_err: worst,
                max_abs_grad: grad.iter().fold(0.0, |m, v| m.max(v.abs())),
            });
        }
        Ok(report)
    }
}

/// Deterministic pseudo-random weights in `[-1, 1]` used to contract a
/// tensor output to a scalar loss.
pub fn probe_weights(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = seeded_rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()).expect("shape")
}

/// Random tensor with entries in `[-scale, scale]`.
pub fn random_tensor(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = seeded_rng(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..=scale)).collect()).expect("shape")
}

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::mlp::{Activation, Mlp, MlpSpec};
use super::NnError;

/// Affine map from network outputs to target units, one entry per output:
/// `prediction = shift + scale * raw`.
///
/// Returns in the toy tasks run to several hundred in magnitude, far beyond
/// what a fixed-step optimizer moves an output bias in a few hundred updates,
/// so critics regress normalized targets and [`OutputScale::refit`] tracks the
/// target statistics while keeping predictions unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputScale {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Smallest scale a refit will set.
pub const MIN_TARGET_SCALE: f64 = 1e-2;

impl OutputScale {
    pub fn identity(outputs: usize) -> Self {
        Self {
            shift: vec![0.0; outputs],
            scale: vec![1.0; outputs],
        }
    }

    pub fn len(&self) -> usize {
        self.shift.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shift.is_empty()
    }

    /// Column means and floored population standard deviations of `targets`.
    pub fn fit(targets: ArrayView2<'_, f64>) -> Self {
        let n = targets.nrows().max(1) as f64;
        let mut out = Self::identity(targets.ncols());
        for (k, col) in targets.columns().into_iter().enumerate() {
            let mean = col.sum() / n;
            let var = col.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
            out.shift[k] = mean;
            out.scale[k] = var.sqrt().max(MIN_TARGET_SCALE);
        }
        out
    }

    /// Replaces `self` by `next`, rewriting output column `k` of `net` (the
    /// `column`-th output of head `k`) so that predictions are unchanged.
    fn preserve(&self, next: &OutputScale, k: usize, net: &mut Mlp, column: usize) {
        let ratio = self.scale[k] / next.scale[k];
        net.output_weights_mut().column_mut(column).mapv_inplace(|w| w * ratio);
        let b = &mut net.output_bias_mut()[column];
        *b = (self.scale[k] * *b + self.shift[k] - next.shift[k]) / next.scale[k];
    }

    fn normalize(&self, k: usize, y: f64) -> f64 {
        (y - self.shift[k]) / self.scale[k]
    }

    fn denormalize(&self, k: usize, raw: f64) -> f64 {
        self.shift[k] + self.scale[k] * raw
    }
}

/// Scalar state-value network.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub net: Mlp,
    pub scale: OutputScale,
}

impl ValueNet {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], activation: Activation, rng: &mut R) -> Self {
        let spec = MlpSpec::new(obs_dim, hidden, 1, activation);
        Self {
            net: Mlp::orthogonal(spec, 1.0, rng),
            scale: OutputScale::identity(1),
        }
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    pub fn predict(&self, states: ArrayView2<'_, f64>) -> Result<Vec<f64>, NnError> {
        Ok(self
            .net
            .predict(states)?
            .column(0)
            .iter()
            .map(|&o| self.scale.denormalize(0, o))
            .collect())
    }

    /// Re-centres the output normalization on `targets` without changing predictions.
    pub fn refit(&mut self, targets: &[f64]) {
        let col = ArrayView2::from_shape((targets.len(), 1), targets).expect("column view");
        let next = OutputScale::fit(col);
        self.scale.preserve(&next, 0, &mut self.net, 0);
        self.scale = next;
    }

    /// Mean squared error in normalized units against `targets`, and its gradient.
    pub fn mse_and_grad(&self, states: ArrayView2<'_, f64>, targets: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
        let cache = self.net.forward(states)?;
        let n = targets.len().max(1) as f64;
        let mut grad_out = Array2::zeros((targets.len(), 1));
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let r = cache.output[[i, 0]] - self.scale.normalize(0, y);
            loss += r * r;
            grad_out[[i, 0]] = 2.0 * r / n;
        }
        Ok((loss / n, self.net.backward(&cache, &grad_out)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CriticHeads {
    MultiHead(Mlp),
    Independent(Vec<Mlp>),
}

/// Cost critic for `K` kernel constraints: one shared trunk with `K` output
/// heads, or `K` independent single-output networks (the ablation baseline).
#[derive(Debug, Clone, PartialEq)]
pub struct CostCritic {
    pub heads: CriticHeads,
    pub scale: OutputScale,
}

impl CostCritic {
    pub fn multi_head<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        heads: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let spec = MlpSpec::new(obs_dim, hidden, heads, activation);
        Self {
            heads: CriticHeads::MultiHead(Mlp::orthogonal(spec, 1.0, rng)),
            scale: OutputScale::identity(heads),
        }
    }

    pub fn independent<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        heads: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let spec = MlpSpec::new(obs_dim, hidden, 1, activation);
        Self {
            heads: CriticHeads::Independent(
                (0..heads)
                    .map(|_| Mlp::orthogonal(spec.clone(), 1.0, rng))
                    .collect(),
            ),
            scale: OutputScale::identity(heads),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.scale.len()
    }

    pub fn is_multi_head(&self) -> bool {
        matches!(self.heads, CriticHeads::MultiHead(_))
    }

    pub fn num_params(&self) -> usize {
        self.nets().iter().map(|m| m.num_params()).sum()
    }

    pub fn nets(&self) -> Vec<&Mlp> {
        match &self.heads {
            CriticHeads::MultiHead(m) => vec![m],
            CriticHeads::Independent(nets) => nets.iter().collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for net in self.nets() {
            net.flatten_into(&mut out);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<(), NnError> {
        if flat.len() != self.num_params() {
            return Err(NnError::ParamLength {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        match &mut self.heads {
            CriticHeads::MultiHead(m) => m.unflatten(flat),
            CriticHeads::Independent(nets) => {
                let mut at = 0;
                for net in nets {
                    at += net.unflatten_from(&flat[at..])?;
                }
                Ok(())
            }
        }
    }

    /// `N x K` matrix of raw (normalized-unit) head outputs.
    fn raw(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>, NnError> {
        match &self.heads {
            CriticHeads::MultiHead(m) => m.predict(states),
            CriticHeads::Independent(nets) => {
                let mut out = Array2::zeros((states.nrows(), nets.len()));
                for (k, net) in nets.iter().enumerate() {
                    let col = net.predict(states)?;
                    out.column_mut(k).assign(&col.column(0));
                }
                Ok(out)
            }
        }
    }

    /// `N x K` matrix of per-head predictions.
    pub fn predict(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>, NnError> {
        let mut out = self.raw(states)?;
        for (k, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|o| self.scale.denormalize(k, o));
        }
        Ok(out)
    }

    /// Re-centres every head's normalization on the `N x K` targets without changing predictions.
    pub fn refit(&mut self, targets: ArrayView2<'_, f64>) {
        let next = OutputScale::fit(targets);
        match &mut self.heads {
            CriticHeads::MultiHead(m) => {
                for k in 0..next.len() {
                    self.scale.preserve(&next, k, m, k);
                }
            }
            CriticHeads::Independent(nets) => {
                for (k, net) in nets.iter_mut().enumerate() {
                    self.scale.preserve(&next, k, net, 0);
                }
            }
        }
        self.scale = next;
    }

    /// Mean over heads of the per-head MSE (normalized units) against the
    /// `N x K` targets, and its gradient.
    pub fn mse_and_grad(&self, states: ArrayView2<'_, f64>, targets: &Array2<f64>) -> Result<(f64, Vec<f64>), NnError> {
        let n = targets.nrows().max(1) as f64;
        let k = targets.ncols().max(1) as f64;
        let scale = 2.0 / (n * k);
        match &self.heads {
            CriticHeads::MultiHead(m) => {
                let cache = m.forward(states)?;
                let mut resid = cache.output.clone();
                for ((i, h), r) in resid.indexed_iter_mut() {
                    *r -= self.scale.normalize(h, targets[[i, h]]);
                }
                let loss = resid.iter().map(|r| r * r).sum::<f64>() / (n * k);
                let grad_out = resid * scale;
                Ok((loss, m.backward(&cache, &grad_out)))
            }
            CriticHeads::Independent(nets) => {
                let mut loss = 0.0;
                let mut grad = Vec::with_capacity(self.num_params());
                for (h, net) in nets.iter().enumerate() {
                    let cache = net.forward(states)?;
                    let mut grad_out = Array2::zeros((targets.nrows(), 1));
                    for i in 0..targets.nrows() {
                        let r = cache.output[[i, 0]] - self.scale.normalize(h, targets[[i, h]]);
                        loss += r * r;
                        grad_out[[i, 0]] = scale * r;
                    }
                    grad.extend(net.backward(&cache, &grad_out));
                }
                Ok((loss / (n * k), grad))
            }
        }
    }
}

/// Adam with bias correction. State is plain vectors so it checkpoints trivially.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn value_mse_zero_at_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = ValueNet::new(3, &[8], Activation::Tanh, &mut rng);
        let s = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let targets = v.predict(s.view()).unwrap();
        let (loss, grad) = v.mse_and_grad(s.view(), &targets).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn multi_head_is_smaller_than_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let multi = CostCritic::multi_head(6, &[64, 64], 10, Activation::LeakyRelu(0.01), &mut rng);
        let indep = CostCritic::independent(6, &[64, 64], 10, Activation::LeakyRelu(0.01), &mut rng);
        assert_eq!(multi.num_heads(), 10);
        assert_eq!(indep.num_heads(), 10);
        assert!(multi.num_params() * 5 <= indep.num_params());
    }

    #[test]
    fn independent_flatten_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = CostCritic::independent(2, &[3], 3, Activation::Tanh, &mut rng);
        let flat = c.flatten();
        let mut d = CostCritic::independent(2, &[3], 3, Activation::Tanh, &mut rng);
        d.unflatten(&flat).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn refit_preserves_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Array2::from_shape_fn((7, 2), |(i, j)| (i as f64) * 0.2 - j as f64);
        for mut c in [
            CostCritic::multi_head(2, &[4], 3, Activation::Tanh, &mut rng),
            CostCritic::independent(2, &[4], 3, Activation::Tanh, &mut rng),
        ] {
            let before = c.predict(s.view()).unwrap();
            let targets = Array2::from_shape_fn((7, 3), |(i, k)| -300.0 + 40.0 * i as f64 + k as f64);
            c.refit(targets.view());
            assert!((c.scale.shift[1] - (-179.0)).abs() < 1e-9);
            let after = c.predict(s.view()).unwrap();
            for (a, b) in before.iter().zip(after.iter()) {
                assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
            }
        }
        let mut v = ValueNet::new(2, &[4], Activation::Tanh, &mut rng);
        let before = v.predict(s.view()).unwrap();
        v.refit(&[-1000.0, -900.0, -950.0]);
        let after = v.predict(s.view()).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn clip_bounds_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let n = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let mut small = vec![0.1, 0.1];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.1]);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut adam = Adam::new(2, 0.1);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[1.0, -1.0]);
        assert!(p[0] < 1.0 && p[1] > -1.0);
    }
}

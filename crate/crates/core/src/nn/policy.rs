use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use super::mlp::{Activation, ForwardCache, Mlp, MlpSpec};
use super::NnError;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Diagonal Gaussian policy: MLP mean plus a state-independent log-std vector.
///
/// Flat parameters are the mean network's parameters followed by `log_std`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean_net: Mlp,
    pub log_std: Array1<f64>,
}

/// A forward pass kept around so gradients and Fisher products can reuse it.
#[derive(Debug, Clone)]
pub struct PolicyEval {
    pub cache: ForwardCache,
    pub std: Array1<f64>,
}

impl PolicyEval {
    pub fn means(&self) -> &Array2<f64> {
        &self.cache.output
    }
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        activation: Activation,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let spec = MlpSpec::new(obs_dim, hidden, act_dim, activation);
        Self {
            mean_net: Mlp::orthogonal(spec, 0.01, rng),
            log_std: Array1::from_elem(act_dim, init_std.ln()),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.mean_net.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn num_params(&self) -> usize {
        self.mean_net.num_params() + self.log_std.len()
    }

    pub fn std(&self) -> Array1<f64> {
        self.log_std.mapv(f64::exp)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.mean_net.flatten_into(&mut out);
        out.extend(self.log_std.iter().copied());
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<(), NnError> {
        if flat.len() != self.num_params() {
            return Err(NnError::ParamLength {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let used = self.mean_net.unflatten_from(flat)?;
        for (d, s) in self.log_std.iter_mut().zip(&flat[used..]) {
            *d = *s;
        }
        Ok(())
    }

    pub fn with_params(&self, flat: &[f64]) -> Result<Self, NnError> {
        let mut p = self.clone();
        p.unflatten(flat)?;
        Ok(p)
    }

    /// Batch means and the (shared) standard deviation vector.
    pub fn forward(&self, states: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>), NnError> {
        let means = self.mean_net.predict(states)?;
        Ok((means, self.std()))
    }

    pub fn evaluate(&self, states: ArrayView2<'_, f64>) -> Result<PolicyEval, NnError> {
        Ok(PolicyEval {
            cache: self.mean_net.forward(states)?,
            std: self.std(),
        })
    }

    /// Backprops per-sample mean gradients and adds a log-std gradient.
    pub fn backward(&self, eval: &PolicyEval, grad_means: &Array2<f64>, grad_log_std: &Array1<f64>) -> Vec<f64> {
        let mut g = vec![0.0; self.num_params()];
        let n = self.mean_net.num_params();
        self.mean_net.backward_into(&eval.cache, grad_means, &mut g[..n]);
        for (d, s) in g[n..].iter_mut().zip(grad_log_std.iter()) {
            *d += s;
        }
        g
    }

    /// Gradient of `sum_i weights[i] * log pi(a_i | s_i)`.
    pub fn weighted_log_prob_grad(
        &self,
        eval: &PolicyEval,
        actions: ArrayView2<'_, f64>,
        weights: &[f64],
    ) -> Vec<f64> {
        let means = eval.means();
        let var = eval.std.mapv(|s| s * s);
        let mut grad_means = Array2::zeros(means.dim());
        let mut grad_log_std = Array1::zeros(self.act_dim());
        for (i, &w) in weights.iter().enumerate() {
            for j in 0..self.act_dim() {
                let diff = actions[[i, j]] - means[[i, j]];
                grad_means[[i, j]] = w * diff / var[j];
                grad_log_std[j] += w * (diff * diff / var[j] - 1.0);
            }
        }
        self.backward(eval, &grad_means, &grad_log_std)
    }
}

/// Diagonal-Gaussian log density of each action row.
pub fn log_prob(means: &Array2<f64>, std: &Array1<f64>, actions: ArrayView2<'_, f64>) -> Array1<f64> {
    let dim = std.len() as f64;
    let log_std_sum: f64 = std.iter().map(|s| s.ln()).sum();
    let norm = -0.5 * dim * LN_2PI - log_std_sum;
    Array1::from_iter(means.outer_iter().zip(actions.outer_iter()).map(|(mu, a)| {
        let quad: f64 = mu
            .iter()
            .zip(a.iter())
            .zip(std.iter())
            .map(|((m, x), s)| {
                let z = (x - m) / s;
                z * z
            })
            .sum();
        norm - 0.5 * quad
    }))
}

/// Batch mean of `KL(old || new)` for diagonal Gaussians.
pub fn kl_mean(
    old_means: &Array2<f64>,
    old_std: ArrayView1<'_, f64>,
    new_means: &Array2<f64>,
    new_std: ArrayView1<'_, f64>,
) -> f64 {
    let n = old_means.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut constant = 0.0;
    for (so, sn) in old_std.iter().zip(new_std.iter()) {
        constant += (sn / so).ln() + so * so / (2.0 * sn * sn) - 0.5;
    }
    let inv_two_var: Vec<f64> = new_std.iter().map(|s| 0.5 / (s * s)).collect();
    let mut quad = 0.0;
    for (mo, mn) in old_means.outer_iter().zip(new_means.outer_iter()) {
        for ((a, b), w) in mo.iter().zip(mn.iter()).zip(&inv_two_var) {
            let d = a - b;
            quad += d * d * w;
        }
    }
    constant + quad / n as f64
}

/// Entropy of the diagonal Gaussian; state independent, so also the batch mean.
pub fn entropy_mean(std: ArrayView1<'_, f64>) -> f64 {
    std.iter().map(|s| 0.5 * (LN_2PI + 1.0) + s.ln()).sum()
}

/// Fisher-vector products of the mean KL at a fixed policy.
///
/// For a diagonal Gaussian with state-independent log-std the Hessian of
/// `KL(old || new)` at `new = old` is block diagonal: `J^T diag(1/sigma^2) J / N`
/// for the mean-network parameters and `2 I` for the log-std entries.
pub struct FisherOperator<'a> {
    policy: &'a GaussianPolicy,
    eval: PolicyEval,
    inv_var: Array1<f64>,
}

impl<'a> FisherOperator<'a> {
    pub fn new(policy: &'a GaussianPolicy, states: ArrayView2<'_, f64>) -> Result<Self, NnError> {
        let eval = policy.evaluate(states)?;
        let inv_var = eval.std.mapv(|s| 1.0 / (s * s));
        Ok(Self {
            policy,
            eval,
            inv_var,
        })
    }

    pub fn apply(&self, v: &[f64], damping: f64) -> Vec<f64> {
        let n_mean = self.policy.mean_net.num_params();
        let batch = self.eval.means().nrows().max(1) as f64;
        let mut jv = self.policy.mean_net.jvp(&self.eval.cache, &v[..n_mean]);
        for mut row in jv.axis_iter_mut(Axis(0)) {
            for (x, w) in row.iter_mut().zip(self.inv_var.iter()) {
                *x *= w / batch;
            }
        }
        let mut out = vec![0.0; v.len()];
        self.policy
            .mean_net
            .backward_into(&self.eval.cache, &jv, &mut out[..n_mean]);
        for (o, x) in out[n_mean..].iter_mut().zip(&v[n_mean..]) {
            *o = 2.0 * x;
        }
        if damping != 0.0 {
            for (o, x) in out.iter_mut().zip(v) {
                *o += damping * x;
            }
        }
        out
    }
}

/// Convenience wrapper for a one-off product.
pub fn fisher_vector_product(
    policy: &GaussianPolicy,
    states: ArrayView2<'_, f64>,
    v: &[f64],
    damping: f64,
) -> Result<Vec<f64>, NnError> {
    Ok(FisherOperator::new(policy, states)?.apply(v, damping))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_prob_examples() {
        let mu = array![[0.0]];
        let std = array![1.0];
        let lp = log_prob(&mu, &std, array![[0.0]].view());
        assert!((lp[0] + 0.918_938_533_204_672_7).abs() < 1e-12);
        let lp = log_prob(&mu, &std, array![[1.0]].view());
        assert!((lp[0] + 1.418_938_533_204_672_7).abs() < 1e-12);
        // diagonal factorization
        let mu2 = array![[0.0, 1.0]];
        let std2 = array![1.0, 2.0];
        let joint = log_prob(&mu2, &std2, array![[0.5, -1.0]].view())[0];
        let a = log_prob(&array![[0.0]], &array![1.0], array![[0.5]].view())[0];
        let b = log_prob(&array![[1.0]], &array![2.0], array![[-1.0]].view())[0];
        assert!((joint - (a + b)).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let m0 = array![[0.0]];
        let m1 = array![[1.0]];
        let one = array![1.0];
        let two = array![2.0];
        assert_eq!(kl_mean(&m0, one.view(), &m0, one.view()), 0.0);
        assert!((kl_mean(&m0, one.view(), &m1, one.view()) - 0.5).abs() < 1e-12);
        // KL(N(0,1) || N(0,2)) = ln 2 + 1/8 - 1/2
        let want = 2f64.ln() + 0.125 - 0.5;
        assert!((kl_mean(&m0, one.view(), &m0, two.view()) - want).abs() < 1e-12);
        assert!((want - 0.318_147).abs() < 1e-6);
    }

    #[test]
    fn entropy_examples() {
        let e1 = entropy_mean(array![1.0].view());
        assert!((e1 - 1.418_938_533_204_672_7).abs() < 1e-12);
        let e2 = entropy_mean(array![1.0, 1.0].view());
        assert!((e2 - 2.837_877_066_409_345).abs() < 1e-12);
        let e3 = entropy_mean(array![2.0, 2.0].view());
        assert!((e3 - e2 - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_shapes_and_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GaussianPolicy::new(3, 2, &[8, 8], Activation::LeakyRelu(0.01), 1.0, &mut rng);
        let (m, s) = p.forward(Array2::zeros((5, 3)).view()).unwrap();
        assert_eq!(m.dim(), (5, 2));
        assert_eq!(s, array![1.0, 1.0]);
    }

    #[test]
    fn flatten_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = GaussianPolicy::new(3, 2, &[4], Activation::Tanh, 0.5, &mut rng);
        let flat = p.flatten();
        assert_eq!(flat.len(), p.num_params());
        let q = p.with_params(&flat).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.flatten(), flat);
    }

    #[test]
    fn fisher_zero_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = GaussianPolicy::new(3, 2, &[4], Activation::Tanh, 1.0, &mut rng);
        let s = Array2::from_elem((6, 3), 0.3);
        let out = fisher_vector_product(&p, s.view(), &vec![0.0; p.num_params()], 0.01).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }
}

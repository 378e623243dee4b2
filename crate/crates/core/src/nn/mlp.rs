use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::NnError;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    /// Recommended orthogonal-init gain for hidden layers.
    fn gain(self) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => (2.0 / (1.0 + slope * slope)).sqrt(),
            Activation::Tanh => 5.0 / 3.0,
        }
    }
}

/// Layer widths from input to output, plus the hidden activation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Self {
        let mut layer_widths = Vec::with_capacity(hidden.len() + 2);
        layer_widths.push(input);
        layer_widths.extend_from_slice(hidden);
        layer_widths.push(output);
        Self {
            layer_widths,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("nonempty widths")
    }

    pub fn num_params(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layer_widths.len() < 3 {
            return Err(NnError::Spec("at least one hidden layer is required".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(NnError::Spec("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    /// `in x out`, so a batch forward is `x.dot(w) + b`.
    w: Array2<f64>,
    b: Array1<f64>,
}

/// Fully connected network with a linear output layer.
///
/// Flattening order: for each layer from input to output, the weight matrix
/// in row-major `(in, out)` order followed by the bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

/// Activations kept from a batch forward pass for backprop and JVPs.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` feeds layer `l`; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    pub fn zeros(spec: MlpSpec) -> Self {
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| Layer {
                w: Array2::zeros((w[0], w[1])),
                b: Array1::zeros(w[1]),
            })
            .collect();
        Self { spec, layers }
    }

    /// Orthogonal hidden layers, output layer scaled by `output_gain`, zero biases.
    pub fn orthogonal<R: Rng + ?Sized>(spec: MlpSpec, output_gain: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(spec);
        let n = net.layers.len();
        let hidden_gain = net.spec.activation.gain();
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let gain = if l + 1 == n { output_gain } else { hidden_gain };
            let (rows, cols) = layer.w.dim();
            layer.w.assign(&(orthogonal_matrix(rows, cols, rng) * gain));
        }
        net
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.flatten_into(&mut out);
        out
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend(layer.w.iter().copied());
            out.extend(layer.b.iter().copied());
        }
    }

    /// Loads parameters from the front of `flat`, returning how many were consumed.
    pub fn unflatten_from(&mut self, flat: &[f64]) -> Result<usize, NnError> {
        let need = self.num_params();
        if flat.len() < need {
            return Err(NnError::ParamLength {
                expected: need,
                got: flat.len(),
            });
        }
        let mut at = 0;
        for layer in &mut self.layers {
            for w in layer.w.iter_mut() {
                *w = flat[at];
                at += 1;
            }
            for b in layer.b.iter_mut() {
                *b = flat[at];
                at += 1;
            }
        }
        Ok(at)
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<(), NnError> {
        let used = self.unflatten_from(flat)?;
        if used != flat.len() {
            return Err(NnError::ParamLength {
                expected: used,
                got: flat.len(),
            });
        }
        Ok(())
    }

    /// Output-layer bias; mostly useful for tests and inspection.
    pub fn output_bias(&self) -> &Array1<f64> {
        &self.layers.last().expect("nonempty").b
    }

    pub fn output_bias_mut(&mut self) -> &mut Array1<f64> {
        &mut self.layers.last_mut().expect("nonempty").b
    }

    /// Output-layer weights, `(in, out)`.
    pub fn output_weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.layers.last_mut().expect("nonempty").w
    }

    /// Flat-index range of the output layer (weights then bias).
    pub fn output_layer_range(&self) -> std::ops::Range<usize> {
        let last = self.layers.last().expect("nonempty");
        let len = last.w.len() + last.b.len();
        let end = self.num_params();
        end - len..end
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache, NnError> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::InputWidth {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let act = self.spec.activation;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n - 1);
        inputs.push(x.to_owned());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = inputs[l].dot(&layer.w);
            z += &layer.b;
            if z.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite { layer: l });
            }
            if l + 1 == n {
                return Ok(ForwardCache {
                    inputs,
                    pre,
                    output: z,
                });
            }
            let a = z.mapv(|v| act.apply(v));
            pre.push(z);
            inputs.push(a);
        }
        unreachable!("network has an output layer")
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, NnError> {
        Ok(self.forward(x)?.output)
    }

    /// Gradient of `sum(grad_out * output)` with respect to the flat parameters.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> Vec<f64> {
        let mut grads = vec![0.0; self.num_params()];
        self.backward_into(cache, grad_out, &mut grads);
        grads
    }

    /// Like [`Mlp::backward`] but accumulates into `grads`.
    pub fn backward_into(&self, cache: &ForwardCache, grad_out: &Array2<f64>, grads: &mut [f64]) {
        debug_assert_eq!(grads.len(), self.num_params());
        let act = self.spec.activation;
        let offsets = self.layer_offsets();
        let mut delta = grad_out.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let dw = cache.inputs[l].t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            let off = offsets[l];
            for (g, v) in grads[off..off + dw.len()].iter_mut().zip(dw.iter()) {
                *g += v;
            }
            let boff = off + dw.len();
            for (g, v) in grads[boff..boff + db.len()].iter_mut().zip(db.iter()) {
                *g += v;
            }
            if l > 0 {
                let mut prev = delta.dot(&layer.w.t());
                ndarray::Zip::from(&mut prev)
                    .and(&cache.pre[l - 1])
                    .and(&cache.inputs[l])
                    .for_each(|d, &z, &a| *d *= act.derivative(z, a));
                delta = prev;
            }
        }
    }

    /// Directional derivative of the outputs along a parameter tangent.
    pub fn jvp(&self, cache: &ForwardCache, tangent: &[f64]) -> Array2<f64> {
        debug_assert_eq!(tangent.len(), self.num_params());
        let act = self.spec.activation;
        let offsets = self.layer_offsets();
        let batch = cache.inputs[0].nrows();
        let mut da: Option<Array2<f64>> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let (rows, cols) = layer.w.dim();
            let off = offsets[l];
            let dw = ndarray::ArrayView2::from_shape((rows, cols), &tangent[off..off + rows * cols])
                .expect("tangent slice shape");
            let db = ndarray::ArrayView1::from(&tangent[off + rows * cols..off + rows * cols + cols]);
            let mut dz = cache.inputs[l].dot(&dw);
            dz += &db;
            if let Some(prev) = &da {
                dz += &prev.dot(&layer.w);
            }
            if l + 1 == self.layers.len() {
                debug_assert_eq!(dz.nrows(), batch);
                return dz;
            }
            ndarray::Zip::from(&mut dz)
                .and(&cache.pre[l])
                .and(&cache.inputs[l + 1])
                .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            da = Some(dz);
        }
        unreachable!("network has an output layer")
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for layer in &self.layers {
            offsets.push(at);
            at += layer.w.len() + layer.b.len();
        }
        offsets
    }
}

/// `rows x cols` matrix with orthonormal rows or columns (whichever is fewer),
/// from modified Gram-Schmidt on a Gaussian draw.
pub fn orthogonal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let (long, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // Orthonormalize `short` vectors of length `long`.
    let mut q = Array2::<f64>::zeros((short, long));
    for v in q.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    for i in 0..short {
        for j in 0..i {
            let proj = q.row(i).dot(&q.row(j));
            let qj = q.row(j).to_owned();
            q.row_mut(i).scaled_add(-proj, &qj);
        }
        let norm = q.row(i).dot(&q.row(i)).sqrt();
        if norm > 1e-12 {
            q.row_mut(i).mapv_inplace(|v| v / norm);
        }
    }
    if rows >= cols {
        q.t().to_owned()
    } else {
        q
    }
}

use nalgebra::DMatrix;
use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use super::NetError;
use crate::seeding::Rng;

/// Fully connected layer computing `y = W x + b` with `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_out, fan_in)), bias: Array1::zeros(fan_out) }
    }

    /// Orthogonal weights scaled by `gain`, zero bias.
    pub fn orthogonal(fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) -> Self {
        let (rows, cols) = (fan_out.max(fan_in), fan_out.min(fan_in));
        let a = DMatrix::<f64>::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
        let qr = a.qr();
        let (mut q, r) = (qr.q(), qr.r());
        // Sign fix makes the distribution uniform over orthogonal matrices.
        for j in 0..cols {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let weight = Array2::from_shape_fn((fan_out, fan_in), |(o, i)| {
            let v = if fan_out >= fan_in { q[(o, i)] } else { q[(i, o)] };
            (gain * v) as f32
        });
        Self { weight, bias: Array1::zeros(fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ForwardCache {
    /// Input of every layer; for `l > 0` this is the tanh output of layer `l - 1`.
    inputs: Vec<Array2<f32>>,
}

/// Tanh MLP with a linear output layer.
///
/// Flat parameter order is layer-major: each layer's weights in row-major
/// (`out x in`) order, then its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    cache: Option<ForwardCache>,
}

impl Mlp {
    pub fn from_layers(layers: Vec<Dense>) -> Self {
        assert!(!layers.is_empty());
        for w in layers.windows(2) {
            assert_eq!(w[0].fan_out(), w[1].fan_in(), "layer shapes do not chain");
        }
        Self { layers, cache: None }
    }

    /// Orthogonal initialization: `hidden_gain` on hidden layers, `output_gain` on the last.
    pub fn new(sizes: &[usize], hidden_gain: f64, output_gain: f64, rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2);
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let gain = if l + 1 == n { output_gain } else { hidden_gain };
                Dense::orthogonal(sizes[l], sizes[l + 1], gain, rng)
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// `[in, hidden..., out]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].fan_in()];
        s.extend(self.layers.iter().map(Dense::fan_out));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    fn run(&self, x: ArrayView2<f32>, mut keep: Option<&mut Vec<Array2<f32>>>) -> Result<Array2<f32>, NetError> {
        if x.ncols() != self.input_dim() {
            return Err(NetError::InputShape { expected: self.input_dim(), got: x.ncols() });
        }
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Array2::<f32>::zeros((h.nrows(), layer.fan_out()));
            out += &layer.bias;
            general_mat_mul(1.0, &h, &layer.weight.t(), 1.0, &mut out);
            if l < last {
                out.mapv_inplace(f32::tanh);
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NonFinite { layer: l });
            }
            if let Some(k) = keep.as_deref_mut() {
                k.push(std::mem::replace(&mut h, out));
            } else {
                h = out;
            }
        }
        Ok(h)
    }

    /// Forward pass without caching. `x` is `batch x input_dim`.
    pub fn forward(&self, x: ArrayView2<f32>) -> Result<Array2<f32>, NetError> {
        self.run(x, None)
    }

    /// Forward pass that caches activations for [`Mlp::backward`].
    pub fn forward_train(&mut self, x: ArrayView2<f32>) -> Result<Array2<f32>, NetError> {
        self.cache = None;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let out = self.run(x, Some(&mut inputs))?;
        self.cache = Some(ForwardCache { inputs });
        Ok(out)
    }

    /// Gradient of a scalar loss with respect to all parameters, in flat
    /// order, given `dL/d(output)` for the cached batch.
    pub fn backward(&self, grad_out: ArrayView2<f32>) -> Result<Vec<f32>, NetError> {
        let cache = self.cache.as_ref().ok_or(NetError::NoForwardCache)?;
        let batch = cache.inputs[0].nrows();
        if grad_out.dim() != (batch, self.output_dim()) {
            return Err(NetError::LengthMismatch { expected: batch * self.output_dim(), got: grad_out.len() });
        }
        let mut grads: Vec<Vec<f32>> = vec![Vec::new(); self.layers.len()];
        let mut delta = grad_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.inputs[l];
            let mut dw = Array2::<f32>::zeros((layer.fan_out(), layer.fan_in()));
            general_mat_mul(1.0, &delta.t(), input, 0.0, &mut dw);
            let db = delta.sum_axis(Axis(0));
            let mut g = Vec::with_capacity(layer.num_params());
            g.extend(dw.iter());
            g.extend(db.iter());
            grads[l] = g;
            if l > 0 {
                let mut prev = Array2::<f32>::zeros((batch, layer.fan_in()));
                general_mat_mul(1.0, &delta, &layer.weight, 0.0, &mut prev);
                // tanh'(z) = 1 - tanh(z)^2, and the cached input is tanh(z).
                prev.zip_mut_with(input, |d, &y| *d *= 1.0 - y * y);
                delta = prev;
            }
        }
        Ok(grads.concat())
    }

    pub fn get_flat(&self) -> Vec<f32> {
        let mut flat = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            flat.extend(layer.weight.iter());
            flat.extend(layer.bias.iter());
        }
        flat
    }

    pub fn set_flat(&mut self, flat: &[f32]) -> Result<(), NetError> {
        if flat.len() != self.num_params() {
            return Err(NetError::LengthMismatch { expected: self.num_params(), got: flat.len() });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weight.iter_mut() {
                *w = flat[offset];
                offset += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = flat[offset];
                offset += 1;
            }
        }
        self.cache = None;
        Ok(())
    }

    /// `params -= step` elementwise, in flat order.
    pub fn apply_delta(&mut self, delta: &[f32]) -> Result<(), NetError> {
        let mut flat = self.get_flat();
        if delta.len() != flat.len() {
            return Err(NetError::LengthMismatch { expected: flat.len(), got: delta.len() });
        }
        flat.iter_mut().zip(delta).for_each(|(p, d)| *p += d);
        self.set_flat(&flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;
    use ndarray::array;

    #[test]
    fn linear_unit_gradient() {
        let mut layer = Dense::zeros(1, 1);
        layer.weight[[0, 0]] = 0.7;
        let mut net = Mlp::from_layers(vec![layer]);
        let y = net.forward_train(array![[3.0f32]].view()).unwrap();
        assert!((y[[0, 0]] - 2.1).abs() < 1e-6);
        let g = net.backward(array![[1.0f32]].view()).unwrap();
        assert_eq!(g, vec![3.0, 1.0]);
    }

    #[test]
    fn backward_requires_forward() {
        let net = Mlp::new(&[2, 3, 1], 1.0, 1.0, &mut rng_for(0, &[]));
        assert_eq!(net.backward(array![[1.0f32]].view()), Err(NetError::NoForwardCache));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut net = Mlp::new(&[3, 5, 2], 2f64.sqrt(), 1.0, &mut rng_for(1, &[]));
        net.forward_train(array![[0.1f32, -0.2, 0.3], [1.0, 2.0, 3.0]].view()).unwrap();
        let g = net.backward(Array2::zeros((2, 2)).view()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flat_round_trip_and_zero_params() {
        let mut rng = rng_for(2, &[]);
        let mut net = Mlp::new(&[4, 8, 8, 3], 2f64.sqrt(), 0.01, &mut rng);
        let x = array![[0.5f32, -1.0, 2.0, 0.0]];
        let before = net.forward(x.view()).unwrap();
        let flat = net.get_flat();
        assert_eq!(flat.len(), net.num_params());
        net.set_flat(&flat).unwrap();
        assert_eq!(net.forward(x.view()).unwrap(), before);
        net.apply_delta(&vec![0.0; flat.len()]).unwrap();
        assert_eq!(net.forward(x.view()).unwrap(), before);
        net.set_flat(&vec![0.0; flat.len()]).unwrap();
        assert!(net.forward(x.view()).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(net.set_flat(&[0.0; 3]), Err(NetError::LengthMismatch { .. })));
    }

    #[test]
    fn flat_order_is_weights_row_major_then_bias() {
        let mut layer = Dense::zeros(2, 2);
        layer.weight = array![[1.0, 2.0], [3.0, 4.0]];
        layer.bias = array![5.0, 6.0];
        let net = Mlp::from_layers(vec![layer]);
        assert_eq!(net.get_flat(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn orthogonal_columns_are_orthonormal() {
        let mut rng = rng_for(3, &[]);
        for (i, o) in [(4, 16), (16, 4), (8, 8)] {
            let d = Dense::orthogonal(i, o, 1.0, &mut rng);
            let w = d.weight.mapv(|v| v as f64);
            let gram = if o >= i { w.t().dot(&w) } else { w.dot(&w.t()) };
            for r in 0..gram.nrows() {
                for c in 0..gram.ncols() {
                    let expect = if r == c { 1.0 } else { 0.0 };
                    assert!((gram[[r, c]] - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let mut net = Mlp::new(&[1, 2, 1], 1.0, 1.0, &mut rng_for(4, &[]));
        let mut flat = net.get_flat();
        let n = flat.len();
        flat[n - 1] = f32::INFINITY;
        net.set_flat(&flat).unwrap();
        assert_eq!(net.forward(array![[1.0f32]].view()), Err(NetError::NonFinite { layer: 1 }));
    }
}

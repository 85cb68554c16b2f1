//! Dense layers with explicit backward passes.

use serde::{Deserialize, Serialize};

use super::matrix::{axpy, gemm, Matrix};
use super::rng::Rng;
use crate::error::{Error, Result};

/// Affine map `y = W x + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Gradient buffers matching a [`LinearLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearGrad {
    pub fn zeros_like(layer: &LinearLayer) -> Self {
        Self {
            weight: Matrix::zeros(layer.out_dim(), layer.in_dim()),
            bias: vec![0.0; layer.out_dim()],
        }
    }

    pub fn zero(&mut self) {
        self.weight.fill(0.0);
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn add_assign(&mut self, other: &LinearGrad) {
        axpy(1.0, other.weight.as_slice(), self.weight.as_mut_slice());
        axpy(1.0, &other.bias, &mut self.bias);
    }
}

impl LinearLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// He-uniform weights (`U(-√(6/in), √(6/in))`), zero bias.
    pub fn he_uniform(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let mut layer = Self::zeros(in_dim, out_dim);
        for w in layer.weight.as_mut_slice() {
            *w = rng.uniform_range(-limit, limit);
        }
        layer
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape("LinearLayer bias", weight.rows(), bias.len()));
        }
        Ok(Self { weight, bias })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn num_params(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weight.matvec(x)?;
        axpy(1.0, &self.bias, &mut y);
        Ok(y)
    }

    /// Accumulates `grad_out ⊗ x` into `grad.weight` and `grad_out` into
    /// `grad.bias`; returns `Wᵀ grad_out`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grad: &mut LinearGrad) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::shape("LinearLayer::backward input", self.in_dim(), x.len()));
        }
        if grad_out.len() != self.out_dim() {
            return Err(Error::shape(
                "LinearLayer::backward grad_out",
                self.out_dim(),
                grad_out.len(),
            ));
        }
        for (r, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(g, x, grad.weight.row_mut(r));
            grad.bias[r] += g;
        }
        self.weight.matvec_transposed(grad_out)
    }
}

impl LinearLayer {
    /// Row-major batch of `n` inputs (`n × in`) to `n × out`.
    pub fn forward_batch(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        let (i, o) = (self.in_dim(), self.out_dim());
        if x.len() != n * i {
            return Err(Error::shape("LinearLayer::forward_batch", n * i, x.len()));
        }
        let mut y = Vec::with_capacity(n * o);
        for _ in 0..n {
            y.extend_from_slice(&self.bias);
        }
        // Y = X·Wᵀ + 1·bᵀ
        gemm(n, i, o, (x, i as isize, 1), (self.weight.as_slice(), 1, i as isize), 1.0, &mut y);
        Ok(y)
    }

    /// Batched [`LinearLayer::backward`]: accumulates `Gᵀ·X` and the column
    /// sums of `G`, returns `G·W` (`n × in`).
    pub fn backward_batch(&self, x: &[f64], grad_out: &[f64], n: usize, grad: &mut LinearGrad) -> Result<Vec<f64>> {
        let (i, o) = (self.in_dim(), self.out_dim());
        if x.len() != n * i {
            return Err(Error::shape("LinearLayer::backward_batch input", n * i, x.len()));
        }
        if grad_out.len() != n * o {
            return Err(Error::shape("LinearLayer::backward_batch grad_out", n * o, grad_out.len()));
        }
        gemm(o, n, i, (grad_out, 1, o as isize), (x, i as isize, 1), 1.0, grad.weight.as_mut_slice());
        for row in grad_out.chunks_exact(o) {
            axpy(1.0, row, &mut grad.bias);
        }
        let mut gx = vec![0.0; n * i];
        gemm(n, o, i, (grad_out, o as isize, 1), (self.weight.as_slice(), i as isize, 1), 0.0, &mut gx);
        Ok(gx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn forward(self, x: &[f64]) -> Vec<f64> {
        match self {
            Activation::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            Activation::Identity => x.to_vec(),
        }
    }

    /// Gradient w.r.t. the pre-activation `x`. ReLU uses subgradient 0 at 0.
    pub fn backward(self, x: &[f64], grad_out: &[f64]) -> Vec<f64> {
        match self {
            Activation::Relu => x
                .iter()
                .zip(grad_out)
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect(),
            Activation::Identity => grad_out.to_vec(),
        }
    }
}

/// Stack of dense layers with ReLU between them and no activation on the
/// final layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
}

/// Intermediate values kept from [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// [`MlpCache`] for a row-major batch.
#[derive(Debug, Clone)]
pub struct MlpBatchCache {
    rows: usize,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpBatchCache {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// `rows × out_dim`, row-major.
    pub fn output(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn output_row(&self, r: usize) -> &[f64] {
        let out = self.output();
        let w = out.len() / self.rows.max(1);
        &out[r * w..(r + 1) * w]
    }
}

impl Mlp {
    /// Builds `dims[0] -> dims[1] -> ... -> dims[n]` with He-uniform init.
    pub fn he_uniform(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "mlp needs at least two positive dims, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| LinearLayer::he_uniform(w[0], w[1], rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, LinearLayer::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, LinearLayer::out_dim)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LinearLayer::num_params).sum()
    }

    fn activation_after(&self, i: usize) -> Activation {
        if i + 1 == self.layers.len() {
            Activation::Identity
        } else {
            Activation::Relu
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = self.activation_after(i).forward(&layer.forward(&h)?);
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<MlpCache> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let p = layer.forward(&h)?;
            let next = self.activation_after(i).forward(&p);
            inputs.push(h);
            pre.push(p);
            h = next;
        }
        Ok(MlpCache { inputs, pre })
    }

    /// Backpropagates `grad_out` (w.r.t. the network output), accumulating
    /// into `grads` (one entry per layer). Returns the gradient w.r.t. the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], grads: &mut [LinearGrad]) -> Result<Vec<f64>> {
        if grads.len() != self.layers.len() {
            return Err(Error::shape("Mlp::backward grads", self.layers.len(), grads.len()));
        }
        let mut g = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            g = self.activation_after(i).backward(&cache.pre[i], &g);
            g = self.layers[i].backward(&cache.inputs[i], &g, &mut grads[i])?;
        }
        Ok(g)
    }

    pub fn zero_grads(&self) -> Vec<LinearGrad> {
        self.layers.iter().map(LinearGrad::zeros_like).collect()
    }

    /// Forward pass over `rows` inputs stored row-major in `x`.
    pub fn forward_batch(&self, x: &[f64], rows: usize) -> Result<MlpBatchCache> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let p = layer.forward_batch(&h, rows)?;
            let next = self.activation_after(i).forward(&p);
            inputs.push(h);
            pre.push(p);
            h = next;
        }
        Ok(MlpBatchCache { rows, inputs, pre })
    }

    /// Batched [`Mlp::backward`]; `grad_out` is `rows × out_dim`.
    pub fn backward_batch(&self, cache: &MlpBatchCache, grad_out: &[f64], grads: &mut [LinearGrad]) -> Result<Vec<f64>> {
        if grads.len() != self.layers.len() {
            return Err(Error::shape("Mlp::backward_batch grads", self.layers.len(), grads.len()));
        }
        let mut g = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            g = self.activation_after(i).backward(&cache.pre[i], &g);
            g = self.layers[i].backward_batch(&cache.inputs[i], &g, cache.rows, &mut grads[i])?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(rows: &[Vec<f64>], bias: Vec<f64>) -> LinearLayer {
        LinearLayer::from_parts(Matrix::from_rows(rows).unwrap(), bias).unwrap()
    }

    #[test]
    fn identity_forward() {
        let l = layer(&[vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]);
        assert_eq!(l.forward(&[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn two_by_two_forward() {
        let l = layer(&[vec![1.0, 2.0], vec![0.0, 1.0]], vec![1.0, 0.0]);
        assert_eq!(l.forward(&[1.0, 1.0]).unwrap(), vec![4.0, 1.0]);
    }

    #[test]
    fn forward_rejects_wrong_input_len() {
        let l = LinearLayer::zeros(3, 2);
        assert!(matches!(l.forward(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_grad_out_leaves_buffers_untouched() {
        let mut rng = Rng::new(3);
        let l = LinearLayer::he_uniform(4, 3, &mut rng);
        let mut g = LinearGrad::zeros_like(&l);
        let gx = l.backward(&[1.0, 2.0, 3.0, 4.0], &[0.0; 3], &mut g).unwrap();
        assert_eq!(gx, vec![0.0; 4]);
        assert!(g.weight.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_backward_passes_gradient_through() {
        let l = layer(&[vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]);
        let mut g = LinearGrad::zeros_like(&l);
        let gx = l.backward(&[5.0, 6.0], &[0.25, -2.0], &mut g).unwrap();
        assert_eq!(gx, vec![0.25, -2.0]);
        assert_eq!(g.bias, vec![0.25, -2.0]);
        assert_eq!(g.weight.row(1), &[-10.0, -12.0]);
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let x = [-1.0, 0.0, 2.0];
        assert_eq!(Activation::Relu.forward(&x), vec![0.0, 0.0, 2.0]);
        assert_eq!(Activation::Relu.backward(&x, &[1.0, 1.0, 1.0]), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn mlp_rejects_degenerate_dims() {
        let mut rng = Rng::new(0);
        assert!(Mlp::he_uniform(&[4], &mut rng).is_err());
        assert!(Mlp::he_uniform(&[4, 0, 2], &mut rng).is_err());
    }

    #[test]
    fn he_uniform_within_limit() {
        let mut rng = Rng::new(11);
        let l = LinearLayer::he_uniform(24, 16, &mut rng);
        let limit = (6.0f64 / 24.0).sqrt();
        assert!(l.weight.as_slice().iter().all(|w| w.abs() <= limit));
        assert!(l.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn batch_matches_per_item() {
        let mut rng = Rng::new(5);
        let mlp = Mlp::he_uniform(&[7, 9, 3], &mut rng).unwrap();
        let n = 5;
        let xs: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vec(7, 1.0)).collect();
        let gs: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vec(3, 1.0)).collect();
        let flat: Vec<f64> = xs.concat();
        let cache = mlp.forward_batch(&flat, n).unwrap();
        let mut gb = mlp.zero_grads();
        let gx = mlp.backward_batch(&cache, &gs.concat(), &mut gb).unwrap();

        let mut gi = mlp.zero_grads();
        for (r, (x, g)) in xs.iter().zip(&gs).enumerate() {
            let c = mlp.forward_cached(x).unwrap();
            for (a, b) in c.output().iter().zip(cache.output_row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
            let gxi = mlp.backward(&c, g, &mut gi).unwrap();
            for (a, b) in gxi.iter().zip(&gx[r * 7..(r + 1) * 7]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for (a, b) in gi.iter().zip(&gb) {
            for (u, v) in a.weight.as_slice().iter().zip(b.weight.as_slice()) {
                assert!((u - v).abs() < 1e-12);
            }
            for (u, v) in a.bias.iter().zip(&b.bias) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }
}

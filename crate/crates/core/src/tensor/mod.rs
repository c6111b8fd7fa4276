//! Dense f32 tensors, eager ops, reverse-mode differentiation and Adam.

mod adam;
pub mod kernels;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{Dropout, Grads, Tape, Var};

use crate::error::{contract_err, shape_err, Result};

/// Dense row-major tensor of 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err(format!("dimensions must be positive, got {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(format!("shape {shape:?} holds {numel} elements but {} were supplied", data.len()));
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// Marks the tensor as trainable.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the stored gradient, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32], scale: f32) -> Result<()> {
        if g.len() != self.data.len() {
            return shape_err(format!("gradient of length {} does not match tensor shape {:?}", g.len(), self.shape));
        }
        let slot = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (s, &v) in slot.iter_mut().zip(g) {
            *s += scale * v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn take_grad(&mut self) -> Option<Vec<f32>> {
        self.grad.take()
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    Tensor::new(&[m, n], kernels::matmul(a.data(), b.data(), m, k, n))
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => shape_err(format!("matmul cannot combine shapes {a:?} and {b:?}")),
    }
}

/// Softmax along `axis`, max-subtracted.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let layout = AxisLayout::new(x.shape(), axis)?;
    let mut out = x.data().to_vec();
    layout.softmax_in_place(&mut out);
    Tensor::new(x.shape(), out)
}

/// Layer normalization over the last dimension with population statistics.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = *x.shape().last().unwrap_or(&0);
    if gamma.shape() != [d] || beta.shape() != [d] {
        return shape_err(format!(
            "layer_norm over last dim {d} needs gamma/beta of shape [{d}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    if eps <= 0.0 {
        return contract_err("layer_norm eps must be positive");
    }
    let mut out = vec![0.0; x.len()];
    kernels::layer_norm_rows(x.data(), gamma.data(), beta.data(), eps, &mut out);
    Tensor::new(x.shape(), out)
}

/// Elementwise GELU (tanh approximation).
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| kernels::gelu(v)).collect();
    Tensor { shape: x.shape.clone(), data, requires_grad: false, grad: None }
}

/// Describes the slices of a tensor along one axis: `outer` blocks of
/// `len` elements spaced `inner` apart.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisLayout {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisLayout {
    pub(crate) fn new(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return shape_err(format!("axis {axis} out of range for shape {shape:?}"));
        }
        Ok(AxisLayout {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    fn for_each_slice(&self, mut f: impl FnMut(&mut dyn FnMut(usize) -> usize)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                let base = o * self.len * self.inner + i;
                let stride = self.inner;
                f(&mut move |j| base + j * stride);
            }
        }
    }

    pub(crate) fn softmax_in_place(&self, data: &mut [f32]) {
        if self.inner == 1 {
            kernels::softmax_rows(data, self.len);
            return;
        }
        let mut buf = vec![0.0f32; self.len];
        let len = self.len;
        self.for_each_slice(|idx| {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[idx(j)];
            }
            kernels::softmax_rows(&mut buf, len);
            for (j, &b) in buf.iter().enumerate() {
                data[idx(j)] = b;
            }
        });
    }

    pub(crate) fn softmax_backward(&self, y: &[f32], dy: &[f32], dx: &mut [f32]) {
        if self.inner == 1 {
            kernels::softmax_rows_backward(y, dy, dx, self.len);
            return;
        }
        self.for_each_slice(|idx| {
            let s: f32 = (0..self.len).map(|j| y[idx(j)] * dy[idx(j)]).sum();
            for j in 0..self.len {
                let p = idx(j);
                dx[p] += y[p] * (dy[p] - s);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Triple loop over indices, accumulated in f64.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_worked_example() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let oracle = matmul_oracle(&a, &b, 2, 2, 2);
        assert_eq!(oracle, vec![19.0, 22.0, 43.0, 50.0]);
        let c = matmul(&t(&[2, 2], &[1., 2., 3., 4.]), &t(&[2, 2], &[5., 6., 7., 8.])).unwrap();
        let got: Vec<f64> = c.data().iter().map(|&v| v as f64).collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn matmul_identity() {
        let m = t(&[3, 3], &[0.3, -1.0, 2.0, 4.5, 0.0, 1.0, -7.0, 8.0, 9.0]);
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(matmul(&eye, &m).unwrap().data(), m.data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.matches("[2, 3]").count() == 2, "{err}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax(&t(&[2], &[1000.0, 0.0]), 0).unwrap();
        assert!(s.data().iter().all(|v| v.is_finite()));
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1].abs() < 1e-6);

        // exp(k)/Σexp evaluated in f64
        let denom: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        let oracle: Vec<f64> = (1..=3).map(|k| (k as f64).exp() / denom).collect();
        assert!((oracle[0] - 0.0900).abs() < 1e-4);
        assert!((oracle[1] - 0.2447).abs() < 1e-4);
        assert!((oracle[2] - 0.6652).abs() < 1e-4);
        let s = softmax(&t(&[3], &[1.0, 2.0, 3.0]), 0).unwrap();
        for (g, o) in s.data().iter().zip(&oracle) {
            assert!((*g as f64 - o).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = t(&[2, 3], &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]);
        let s = softmax(&x, 0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = t(&[2], &[1.0, 1.0]);
        let zeros = t(&[2], &[0.0, 0.0]);
        let y = layer_norm(&t(&[1, 2], &[3.0, 3.0]), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);

        // mean 0, population std 1
        let y = layer_norm(&t(&[1, 2], &[-1.0, 1.0]), &ones, &zeros, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6 && (y.data()[1] - 1.0).abs() < 1e-6);

        let c = t(&[2], &[0.7, 0.7]);
        let y = layer_norm(&t(&[1, 2], &[5.0, -2.0]), &zeros, &c, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.7, 0.7]);

        assert!(layer_norm(&t(&[1, 3], &[1., 2., 3.]), &ones, &zeros, 1e-5).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(&Tensor::scalar(0.0)).data(), &[0.0]);
        let big = gelu(&Tensor::scalar(12.0)).data()[0];
        assert!((big - 12.0).abs() < 1e-5);
        let x = 1.0f64;
        let oracle = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
        assert!((oracle - 0.8412).abs() < 1e-3);
        assert!((gelu(&Tensor::scalar(1.0)).data()[0] as f64 - oracle).abs() < 1e-6);
    }

    #[test]
    fn tensor_rejects_mismatched_data() {
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(&[0], vec![]).is_err());
    }
}

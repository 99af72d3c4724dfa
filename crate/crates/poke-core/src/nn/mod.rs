//! Deterministic differentiable numeric kernel: dense row-major f64
//! arrays, valid convolution, dense and relu layers, classification and
//! regression losses, Adam, and a finite-difference gradient checker.
//!
//! Everything is 64-bit and allocation-explicit. Accumulation orders are
//! fixed (including the 4-lane dot-product splits below), so results are
//! bit-identical across runs and platforms.

mod adam;
mod gradcheck;
mod ops;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{max_rel_error, GradCheckConfig, GradCheckReport, GradCheckTarget};
pub use ops::{
    conv2d, conv2d_backward, conv_out_dim, dense, dense_backward, l1_loss, relu, relu_backward,
    softmax_cross_entropy,
};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::rng::{uniform_in, RngCore};

/// Dense row-major array of f64 with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdArray {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        NdArray {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                expected: format!("{expected} values for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        Ok(NdArray {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// self += other * scale (shapes must match).
    pub fn add_scaled(&mut self, other: &NdArray, scale: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add_scaled",
                expected: shape_string(&self.shape),
                got: shape_string(&other.shape),
            });
        }
        axpy(&mut self.data, scale, &other.data);
        Ok(())
    }

    /// Euclidean norm of all values.
    pub fn l2_norm(&self) -> f64 {
        fmath::sqrt(dot(&self.data, &self.data))
    }
}

pub(crate) fn shape_string(shape: &[usize]) -> String {
    format!("{shape:?}")
}

/// Weights and biases of one layer together with their gradient
/// accumulators (always the same shapes as the parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w: NdArray,
    pub b: NdArray,
    pub gw: NdArray,
    pub gb: NdArray,
}

impl LayerParams {
    /// Dense layer `out x in`, scaled-uniform weight init, zero biases.
    pub fn new_dense(out_dim: usize, in_dim: usize, rng: &mut impl RngCore) -> Self {
        let mut w = NdArray::zeros(&[out_dim, in_dim]);
        init_uniform(&mut w, in_dim, out_dim, rng);
        Self::wrap(w, NdArray::zeros(&[out_dim]))
    }

    /// Conv kernel `out_c x in_c x kh x kw`, scaled-uniform init, zero biases.
    pub fn new_conv(out_c: usize, in_c: usize, kh: usize, kw: usize, rng: &mut impl RngCore) -> Self {
        let mut w = NdArray::zeros(&[out_c, in_c, kh, kw]);
        init_uniform(&mut w, in_c * kh * kw, out_c * kh * kw, rng);
        Self::wrap(w, NdArray::zeros(&[out_c]))
    }

    fn wrap(w: NdArray, b: NdArray) -> Self {
        let gw = NdArray::zeros(w.shape());
        let gb = NdArray::zeros(b.shape());
        LayerParams { w, b, gw, gb }
    }

    pub fn zero_grads(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Flat coordinate access over (w, then b); used by the grad checker
    /// and the checkpoint writer.
    pub fn coord(&self, i: usize) -> f64 {
        if i < self.w.len() {
            self.w.data()[i]
        } else {
            self.b.data()[i - self.w.len()]
        }
    }

    pub fn set_coord(&mut self, i: usize, v: f64) {
        let nw = self.w.len();
        if i < nw {
            self.w.data_mut()[i] = v;
        } else {
            self.b.data_mut()[i - nw] = v;
        }
    }

    pub fn grad_coord(&self, i: usize) -> f64 {
        if i < self.gw.len() {
            self.gw.data()[i]
        } else {
            self.gb.data()[i - self.gw.len()]
        }
    }
}

fn init_uniform(w: &mut NdArray, fan_in: usize, fan_out: usize, rng: &mut impl RngCore) {
    let bound = fmath::sqrt(6.0 / (fan_in + fan_out) as f64);
    for v in w.data_mut() {
        *v = uniform_in(rng, -bound, bound);
    }
}

/// Dot product with a fixed 4-lane accumulation order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut rest = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        rest += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest
}

/// y += a * x, elementwise.
#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

//! Layer primitives with hand-written forward and backward passes.

use super::linalg::{Matrix, Vector};
use super::rng::SeedStream;
use super::MathError;
use rand::Rng;

/// Affine map `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Matrix,
    pub b: Vector,
}

/// Gradients of an [`Affine`] layer, same shapes as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub w: Matrix,
    pub b: Vector,
}

impl Affine {
    pub fn new(w: Matrix, b: Vector) -> Result<Self, MathError> {
        if b.dim() != w.rows() {
            return Err(MathError::DimMismatch { expected: w.rows(), got: b.dim() });
        }
        Ok(Affine { w, b })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Affine { w: Matrix::zeros(out_dim, in_dim), b: Vector::zeros(out_dim) }
    }

    /// Weights uniform in `[-1/sqrt(in_dim), 1/sqrt(in_dim))`, bias zero.
    pub fn init(out_dim: usize, in_dim: usize, seeds: &SeedStream) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut rng = seeds.rng();
        let mut w = Matrix::zeros(out_dim, in_dim);
        for v in w.as_mut_slice().iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
        Affine { w, b: Vector::zeros(out_dim) }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vector, MathError> {
        let mut y = self.w.matvec(x)?;
        for (yi, bi) in y.iter_mut().zip(self.b.iter()) {
            *yi += bi;
        }
        Ok(y)
    }

    /// Backward pass given the input of the matching forward call and the
    /// upstream gradient. Returns the input gradient and accumulates the
    /// parameter gradients into `grads`.
    pub fn backward_into(
        &self,
        x: &[f64],
        grad_out: &[f64],
        grads: &mut AffineGrads,
    ) -> Result<Vector, MathError> {
        if grad_out.len() != self.out_dim() {
            return Err(MathError::DimMismatch { expected: self.out_dim(), got: grad_out.len() });
        }
        grads.w.add_outer(grad_out, x)?;
        for (gb, g) in grads.b.iter_mut().zip(grad_out.iter()) {
            *gb += g;
        }
        self.w.matvec_transpose(grad_out)
    }

    pub fn grads_like(&self) -> AffineGrads {
        AffineGrads { w: Matrix::zeros(self.out_dim(), self.in_dim()), b: Vector::zeros(self.out_dim()) }
    }

    pub fn param_count(&self) -> usize {
        self.w.rows() * self.w.cols() + self.b.dim()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w.as_slice());
        out.extend_from_slice(self.b.as_slice());
    }

    /// Reads parameters back from a flat slice; inverse of `flatten_into`.
    pub fn unflatten_from(&mut self, src: &[f64]) -> Result<usize, MathError> {
        let need = self.param_count();
        if src.len() < need {
            return Err(MathError::ShapeMismatch { left: need, right: src.len() });
        }
        let wlen = self.w.rows() * self.w.cols();
        self.w.as_mut_slice().copy_from_slice(&src[..wlen]);
        self.b.copy_from_slice(&src[wlen..need]);
        Ok(need)
    }
}

impl AffineGrads {
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w.as_slice());
        out.extend_from_slice(self.b.as_slice());
    }

    pub fn scale(&mut self, alpha: f64) {
        super::linalg::scale(self.w.as_mut_slice(), alpha);
        super::linalg::scale(&mut self.b, alpha);
    }

    pub fn zero_bias(&mut self) {
        for v in self.b.iter_mut() {
            *v = 0.0;
        }
    }
}

/// Elementwise tanh.
pub fn tanh_forward(x: &[f64]) -> Vector {
    Vector::from_vec(x.iter().map(|v| v.tanh()).collect())
}

/// Gradient through tanh given its *output* `y`: `grad_in = grad_out * (1 - y^2)`.
pub fn tanh_backward(y: &[f64], grad_out: &[f64]) -> Vector {
    debug_assert_eq!(y.len(), grad_out.len());
    Vector::from_vec(
        y.iter().zip(grad_out.iter()).map(|(yi, g)| g * (1.0 - yi * yi)).collect(),
    )
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vector {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Vector::from_vec(exps.iter().map(|e| e / sum).collect())
}

/// Cross-entropy of softmax(logits) against an integer label.
/// Returns the loss and the logit gradient `softmax(logits) - onehot(label)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vector), MathError> {
    if label >= logits.len() {
        return Err(MathError::BadLabel { label, classes: logits.len() });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let loss = sum_exp.ln() - (logits[label] - max);
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

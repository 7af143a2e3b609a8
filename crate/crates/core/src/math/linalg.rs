//! Small dense vector/matrix types over `f64`.
//!
//! These are deliberately minimal: contiguous row-major storage plus the
//! handful of operations the encoder and heads need. Shape checks live in
//! the fallible entry points; inner loops assume shapes already agree.

use super::MathError;
use std::ops::{Deref, DerefMut};

/// Dense `f64` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    values: Vec<f64>,
}

impl Vector {
    pub fn from_vec(values: Vec<f64>) -> Self {
        Vector { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Vector { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn dot(&self, other: &Vector) -> Result<f64, MathError> {
        if self.dim() != other.dim() {
            return Err(MathError::DimMismatch { expected: self.dim(), got: other.dim() });
        }
        Ok(dot(&self.values, &other.values))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }

    /// Appends `other` to `self`, producing `[self; other]`.
    pub fn concat(&self, other: &Vector) -> Vector {
        let mut values = Vec::with_capacity(self.dim() + other.dim());
        values.extend_from_slice(&self.values);
        values.extend_from_slice(&other.values);
        Vector { values }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.values
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

impl From<Vec<f64>> for Vector {
    fn from(values: Vec<f64>) -> Self {
        Vector { values }
    }
}

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, MathError> {
        if values.len() != rows * cols {
            return Err(MathError::ShapeMismatch { left: rows * cols, right: values.len() });
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `self * x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vector, MathError> {
        if x.len() != self.cols {
            return Err(MathError::DimMismatch { expected: self.cols, got: x.len() });
        }
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            out.push(dot(self.row(r), x));
        }
        Ok(Vector::from_vec(out))
    }

    /// `self^T * y` for a column vector `y`.
    pub fn matvec_transpose(&self, y: &[f64]) -> Result<Vector, MathError> {
        if y.len() != self.rows {
            return Err(MathError::DimMismatch { expected: self.rows, got: y.len() });
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let yr = y[r];
            if yr == 0.0 {
                continue;
            }
            let row = self.row(r);
            for c in 0..self.cols {
                out[c] += yr * row[c];
            }
        }
        Ok(Vector::from_vec(out))
    }

    /// Accumulates the outer product `y * x^T` into `self`.
    pub fn add_outer(&mut self, y: &[f64], x: &[f64]) -> Result<(), MathError> {
        if y.len() != self.rows {
            return Err(MathError::DimMismatch { expected: self.rows, got: y.len() });
        }
        if x.len() != self.cols {
            return Err(MathError::DimMismatch { expected: self.cols, got: x.len() });
        }
        for r in 0..self.rows {
            let yr = y[r];
            if yr == 0.0 {
                continue;
            }
            let row = self.row_mut(r);
            for c in 0..x.len() {
                row[c] += yr * x[c];
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales `a` to unit norm; returns `None` for a zero vector.
pub fn normalized(a: &[f64]) -> Option<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 {
        return None;
    }
    Some(a.iter().map(|v| v / n).collect())
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
}

pub fn scale(a: &mut [f64], alpha: f64) {
    for v in a.iter_mut() {
        *v *= alpha;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_small() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = m.matvec(&[1.0, 0.0, -1.0]).unwrap();
        assert_eq!(y.as_slice(), &[-2.0, -2.0]);
    }

    #[test]
    fn matvec_transpose_matches_manual() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = m.matvec_transpose(&[1.0, -1.0]).unwrap();
        assert_eq!(y.as_slice(), &[-3.0, -3.0, -3.0]);
    }

    #[test]
    fn matvec_rejects_bad_dim() {
        let m = Matrix::zeros(2, 3);
        assert_eq!(
            m.matvec(&[1.0, 2.0]).unwrap_err(),
            MathError::DimMismatch { expected: 3, got: 2 }
        );
    }

    #[test]
    fn outer_accumulates() {
        let mut m = Matrix::zeros(2, 2);
        m.add_outer(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        m.add_outer(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(m.as_slice(), &[4.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn concat_order() {
        let a = Vector::from_vec(vec![1.0, 2.0]);
        let b = Vector::from_vec(vec![3.0]);
        assert_eq!(a.concat(&b).as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn normalized_zero_is_none() {
        assert!(normalized(&[0.0, 0.0]).is_none());
        let u = normalized(&[3.0, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15);
        assert!((u[1] - 0.8).abs() < 1e-15);
    }
}

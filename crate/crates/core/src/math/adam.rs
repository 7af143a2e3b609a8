//! Adam optimizer over a flat parameter slice, with bias correction.

use super::MathError;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamHyper {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamHyper { learning_rate, ..AdamHyper::default() }
    }
}

/// Optimizer state: first/second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    hyper: AdamHyper,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize, hyper: AdamHyper) -> Self {
        AdamState { hyper, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// Rebuilds a state saved in a checkpoint.
    pub fn restore(hyper: AdamHyper, m: Vec<f64>, v: Vec<f64>, t: u64) -> Result<Self, MathError> {
        if m.len() != v.len() {
            return Err(MathError::ShapeMismatch { left: m.len(), right: v.len() });
        }
        Ok(AdamState { hyper, m, v, t })
    }

    pub fn hyper(&self) -> &AdamHyper {
        &self.hyper
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One update: `p -= lr * m_hat / (sqrt(v_hat) + eps)` with bias-corrected
    /// moment estimates.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), MathError> {
        if params.len() != self.m.len() {
            return Err(MathError::ShapeMismatch { left: self.m.len(), right: params.len() });
        }
        if grads.len() != params.len() {
            return Err(MathError::ShapeMismatch { left: params.len(), right: grads.len() });
        }
        self.t += 1;
        let h = &self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g;
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
        }
        Ok(())
    }
}

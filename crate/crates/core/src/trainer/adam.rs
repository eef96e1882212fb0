use crate::autodiff::ParamVector;
use crate::error::{Result, TvoError};

pub const DEFAULT_LR: f64 = 3e-4;

/// Bias-corrected Adam with per-coordinate moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<u64>,
    skipped: u64,
}

impl AdamState {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            steps: vec![0; dim],
            skipped: 0,
        }
    }

    /// Updates taken by the most-updated coordinate.
    pub fn step_count(&self) -> u64 {
        self.steps.iter().copied().max().unwrap_or(0)
    }

    /// Steps rejected because of non-finite gradients.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// One update. `maximize` ascends the gradient. Coordinates with a zero in
    /// `mask` keep their values and moments. Returns `false` (params untouched)
    /// when the gradient has a non-finite entry.
    pub fn step(&mut self, params: &mut ParamVector, grad: &[f64], maximize: bool, mask: Option<&[f64]>) -> Result<bool> {
        if grad.len() != params.dim() || self.m.len() != params.dim() {
            return Err(TvoError::Usage(format!(
                "Adam dimension mismatch: params {}, gradient {}, state {}",
                params.dim(),
                grad.len(),
                self.m.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return Ok(false);
        }
        let sign = if maximize { 1.0 } else { -1.0 };
        let values = params.values_mut();
        for d in 0..values.len() {
            if mask.is_some_and(|m| m[d] == 0.0) {
                continue;
            }
            // ascent on sign * f
            let g = -sign * grad[d];
            self.steps[d] += 1;
            let t = self.steps[d] as i32;
            self.m[d] = self.beta1 * self.m[d] + (1.0 - self.beta1) * g;
            self.v[d] = self.beta2 * self.v[d] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[d] / (1.0 - self.beta1.powi(t));
            let v_hat = self.v[d] / (1.0 - self.beta2.powi(t));
            values[d] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(true)
    }
}

/// Functional form: a fresh copy of `params` after one step.
pub fn adam_step(state: &mut AdamState, params: &ParamVector, grad: &[f64], maximize: bool) -> Result<ParamVector> {
    let mut out = params.clone();
    state.step(&mut out, grad, maximize, None)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamLayout;
    use std::sync::Arc;

    fn scalar(v: f64) -> ParamVector {
        let layout = Arc::new(ParamLayout::new([("theta/a", vec![1])]).unwrap());
        ParamVector::from_values(layout, vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_is_null_update() {
        let mut s = AdamState::new(1, 0.1);
        let p = adam_step(&mut s, &scalar(2.0), &[0.0], true).unwrap();
        assert_eq!(p.values(), &[2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for (g, maximize, expect) in [(5.0, true, 1.001), (-0.02, true, 0.999), (5.0, false, 0.999)] {
            let mut s = AdamState::new(1, 1e-3);
            let p = adam_step(&mut s, &scalar(1.0), &[g], maximize).unwrap();
            assert!((p.values()[0] - expect).abs() < 1e-9, "{g} {maximize}");
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let mut s = AdamState::new(1, 0.1);
        let mut p = scalar(0.0);
        for _ in 0..200 {
            let a = p.values()[0];
            p = adam_step(&mut s, &p, &[2.0 * (a - 3.0)], false).unwrap();
        }
        assert!((p.values()[0] - 3.0).abs() < 0.05, "{}", p.values()[0]);
    }

    #[test]
    fn non_finite_gradient_keeps_params() {
        let mut s = AdamState::new(1, 0.1);
        let mut p = scalar(1.0);
        assert!(!s.step(&mut p, &[f64::NAN], true, None).unwrap());
        assert_eq!(p.values(), &[1.0]);
        assert_eq!(s.skipped(), 1);
        assert_eq!(s.step_count(), 0);
    }
}

use serde::{Deserialize, Serialize};

use super::{Param, Real};

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter in model order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        Self { step: 0, m, v }
    }
}

impl Adam {
    pub fn step<T: Real>(&self, state: &mut AdamState<T>, params: &mut [&mut Param<T>], lr: f64) {
        assert_eq!(state.m.len(), params.len(), "optimizer state does not match parameters");
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                p.value[i] = p.value[i] - step_size * m[i] / denom;
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(params: &mut [&mut Param<T>], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = T::of(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = *g * scale);
        }
    }
    norm
}

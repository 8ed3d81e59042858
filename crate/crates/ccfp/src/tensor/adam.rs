//! Adam optimizer with bias correction.

use super::Real;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One Adam update on a flat parameter buffer.
///
/// `t` is the 1-based step count after the current increment.
pub fn adam_update<T: Real>(
    data: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
) {
    debug_assert_eq!(data.len(), grad.len());
    let one = T::one();
    let bc1 = one - beta1.powi(t as i32);
    let bc2 = one - beta2.powi(t as i32);
    for i in 0..data.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (one - beta1) * g;
        v[i] = beta2 * v[i] + (one - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Moment buffers for a fixed group of parameters, keyed by parameter id.
///
/// `step_count` increases by one per `step` call. Parameters that received no
/// gradient in a step are left untouched (their moments do not decay).
#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AdamState<T: Real> {
    pub beta1: T,
    pub beta2: T,
    pub eps_opt: T,
    pub step_count: u64,
    moments: BTreeMap<u32, (Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps_opt: T::from_f64(1e-8),
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Start a new optimization step; returns the incremented step count.
    pub fn begin_step(&mut self) -> u64 {
        self.step_count += 1;
        self.step_count
    }

    /// Update one parameter within the current step.
    pub fn update(&mut self, id: u32, data: &mut [T], grad: &[T], lr: T) {
        let t = self.step_count.max(1);
        let (m, v) = self
            .moments
            .entry(id)
            .or_insert_with(|| (vec![T::zero(); data.len()], vec![T::zero(); data.len()]));
        adam_update(data, grad, m, v, t, lr, self.beta1, self.beta2, self.eps_opt);
    }

    /// Apply one Adam step to every `(id, data, grad)` triple.
    pub fn step<'a, I>(&mut self, lr: T, params: I)
    where
        I: IntoIterator<Item = (u32, &'a mut [T], &'a [T])>,
        T: 'a,
    {
        self.begin_step();
        for (id, data, grad) in params {
            self.update(id, data, grad, lr);
        }
    }
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With fresh moments, m_hat/(sqrt(v_hat)+eps) = g/(|g|+eps) ~ sign(g).
        let mut p = [1.0f64, -2.0];
        let g = [0.3, -0.7];
        let mut m = [0.0; 2];
        let mut v = [0.0; 2];
        adam_update(&mut p, &g, &mut m, &mut v, 1, 0.01, 0.9, 0.999, 1e-8);
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = [1.0f64, -2.0];
        let g = [0.0, 0.0];
        let mut m = [0.0; 2];
        let mut v = [0.0; 2];
        for t in 1..=10 {
            adam_update(&mut p, &g, &mut m, &mut v, t, 0.1, 0.9, 0.999, 1e-8);
        }
        assert_eq!(p, [1.0, -2.0]);
    }

    #[test]
    fn five_step_trace_matches_reference_recurrence() {
        // Scalar quadratic loss f(x) = x^2 with gradient 2x, lr 0.1.
        // Reference trace computed by an independent evaluation of the Adam
        // recurrence with bias correction.
        let (beta1, beta2, eps, lr) = (0.9f64, 0.999, 1e-8, 0.1);
        let mut x_ref = 1.0f64;
        let (mut m_ref, mut v_ref) = (0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for t in 1..=5 {
            let g = 2.0 * x_ref;
            m_ref = beta1 * m_ref + (1.0 - beta1) * g;
            v_ref = beta2 * v_ref + (1.0 - beta2) * g * g;
            let mh = m_ref / (1.0 - beta1.powi(t));
            let vh = v_ref / (1.0 - beta2.powi(t));
            x_ref -= lr * mh / (vh.sqrt() + eps);
            trace.push(x_ref);
        }

        let mut x = [1.0f64];
        let mut m = [0.0];
        let mut v = [0.0];
        for (t, expected) in trace.iter().enumerate() {
            let g = [2.0 * x[0]];
            adam_update(&mut x, &g, &mut m, &mut v, (t + 1) as u64, lr, beta1, beta2, eps);
            assert!(
                (x[0] - expected).abs() < 1e-12,
                "step {}: {} vs {}",
                t + 1,
                x[0],
                expected
            );
        }
    }

    #[test]
    fn group_step_counts_and_skips_missing() {
        let mut st: AdamState<f64> = AdamState::new();
        let mut a = vec![1.0f64];
        let ga = vec![1.0f64];
        st.step(0.1, vec![(0u32, a.as_mut_slice(), ga.as_slice())]);
        assert_eq!(st.step_count, 1);
        st.step(0.1, Vec::<(u32, &mut [f64], &[f64])>::new());
        assert_eq!(st.step_count, 2);
    }
}

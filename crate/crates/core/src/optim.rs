//! Decoupled-weight-decay adaptive-moment optimizer and the linear
//! learning-rate schedule.

use std::collections::BTreeMap;

use crate::scalar::Scalar;

#[derive(Clone, Debug)]
struct Moments<F> {
    m: Vec<F>,
    v: Vec<F>,
}

/// AdamW: adaptive moments on the gradient, weight decay applied directly
/// to the parameter (not through the gradient).
#[derive(Clone, Debug)]
pub struct AdamW<F: Scalar> {
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub weight_decay: F,
    step_count: u64,
    state: BTreeMap<String, Moments<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: F::of_f64(0.9),
            beta2: F::of_f64(0.999),
            eps: F::of_f64(1e-8),
            weight_decay: F::of_f64(weight_decay),
            step_count: 0,
            state: BTreeMap::new(),
        }
    }

    /// Advance the shared step counter; call once per optimizer step before
    /// updating parameters.
    pub fn begin_step(&mut self) {
        self.step_count += 1;
    }

    pub fn update(&mut self, name: &str, data: &mut [F], grad: &[F], lr: F) {
        debug_assert!(self.step_count > 0, "begin_step before update");
        debug_assert_eq!(data.len(), grad.len());
        let moments = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![F::zero(); data.len()],
            v: vec![F::zero(); data.len()],
        });
        let t = self.step_count as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        for i in 0..data.len() {
            let g = grad[i];
            moments.m[i] = self.beta1 * moments.m[i] + (F::one() - self.beta1) * g;
            moments.v[i] = self.beta2 * moments.v[i] + (F::one() - self.beta2) * g * g;
            let m_hat = moments.m[i] / bc1;
            let v_hat = moments.v[i] / bc2;
            data[i] = data[i]
                - lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i]);
        }
    }
}

/// Linear decay from `initial` to `minimum` over `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct LinearSchedule {
    pub initial: f64,
    pub minimum: f64,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps <= 1 || step + 1 >= self.total_steps {
            return if self.total_steps <= 1 { self.initial } else { self.minimum };
        }
        let t = step as f64 / (self.total_steps - 1) as f64;
        self.initial + (self.minimum - self.initial) * t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_hits_both_endpoints() {
        let s = LinearSchedule {
            initial: 5e-4,
            minimum: 1e-6,
            total_steps: 100,
        };
        assert_eq!(s.lr_at(0), 5e-4);
        assert!((s.lr_at(99) - 1e-6).abs() < 1e-18);
        assert!(s.lr_at(50) < 5e-4 && s.lr_at(50) > 1e-6);
        // single-step schedule keeps the initial rate
        let one = LinearSchedule {
            initial: 1e-3,
            minimum: 1e-6,
            total_steps: 1,
        };
        assert_eq!(one.lr_at(0), 1e-3);
    }

    #[test]
    fn zero_gradient_and_zero_decay_leave_parameters_unchanged() {
        let mut opt: AdamW<f64> = AdamW::new(0.0);
        let mut data = vec![1.0, -2.0, 3.0];
        let orig = data.clone();
        opt.begin_step();
        opt.update("w", &mut data, &[0.0, 0.0, 0.0], 1e-3);
        assert_eq!(data, orig);
    }

    #[test]
    fn weight_decay_is_decoupled_from_the_gradient_path() {
        let mut opt: AdamW<f64> = AdamW::new(0.1);
        let mut data = vec![1.0];
        opt.begin_step();
        opt.update("w", &mut data, &[0.0], 0.01);
        // pure decay: 1 − 0.01·0.1·1
        assert!((data[0] - (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn gradient_descent_direction_is_respected() {
        let mut opt: AdamW<f64> = AdamW::new(0.0);
        let mut data = vec![1.0];
        for _ in 0..50 {
            let grad = vec![2.0 * data[0]]; // d/dx of x²
            opt.begin_step();
            opt.update("w", &mut data, &grad, 0.05);
        }
        assert!(data[0].abs() < 0.5, "x² descent stalled at {}", data[0]);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut opt: AdamW<f64> = AdamW::new(0.01);
            let mut data = vec![0.5, -0.25];
            for step in 0..10 {
                opt.begin_step();
                let g = vec![0.1 * step as f64, -0.2];
                opt.update("w", &mut data, &g, 1e-2);
            }
            data
        };
        assert_eq!(run(), run());
    }
}

//! Cosine learning-rate decay and AdamW.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `lr_end + ½(lr_start − lr_end)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_start: f64, lr_end: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Contract(format!("step {step} outside 0..={total_steps}")));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T: Scalar> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Moments {
            m: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
        }
    }
}

impl AdamW {
    /// One update at 1-based step `t`: decoupled decay `w ← w(1 − lr·λ)`, then
    /// the bias-corrected Adam step. `name` labels a non-finite gradient.
    pub fn step<T: Scalar>(
        &self,
        name: &str,
        w: &mut [T],
        g: &[T],
        state: &mut Moments<T>,
        t: u64,
        lr: f64,
    ) -> Result<()> {
        if w.len() != g.len() || w.len() != state.m.len() {
            return Err(Error::dim("adamw_step", &[w.len()], &[g.len()]));
        }
        if t == 0 {
            return Err(Error::Contract("adam steps are 1-based".into()));
        }
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { term: name.to_string() });
        }
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let one = T::one();
        let c1 = T::of(1.0 - self.beta1.powi(t as i32));
        let c2 = T::of(1.0 - self.beta2.powi(t as i32));
        let decay = T::of(1.0 - lr * self.weight_decay);
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let (m, v) = (state.m.data_mut(), state.v.data_mut());
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            w[i] = w[i] * decay - lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 2e-4, 1e-7).unwrap(), 2e-4);
        assert_eq!(cosine_lr(100, 100, 2e-4, 1e-7).unwrap(), 1e-7);
        let mid = cosine_lr(50, 100, 2e-4, 1e-7).unwrap();
        assert!((mid - (2e-4 + 1e-7) / 2.0).abs() < 1e-12);
        assert!(cosine_lr(101, 100, 2e-4, 1e-7).is_err());
        assert!(cosine_lr(0, 0, 2e-4, 1e-7).is_err());
        let lrs: Vec<f64> = (0..=10).map(|s| cosine_lr(s, 10, 2e-4, 1e-7).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn scalar_step() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut w = [1.0f64];
        let mut st = Moments::zeros(&[1]);
        opt.step("w", &mut w, &[1.0], &mut st, 1, 0.1).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut w = [0.3f64, -2.0];
        let mut st = Moments::zeros(&[2]);
        opt.step("w", &mut w, &[0.0, 0.0], &mut st, 1, 0.1).unwrap();
        assert_eq!(w, [0.3, -2.0]);
    }

    #[test]
    fn decay_only() {
        let opt = AdamW {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut w = [2.0f64];
        let mut st = Moments::zeros(&[1]);
        opt.step("w", &mut w, &[0.0], &mut st, 1, 0.1).unwrap();
        assert!((w[0] - 2.0 * 0.99).abs() < 1e-15);
    }

    #[test]
    fn non_finite_grad_names_tensor() {
        let opt = AdamW::default();
        let mut w = [1.0f32];
        let mut st = Moments::zeros(&[1]);
        match opt.step("decoder.w", &mut w, &[f32::NAN], &mut st, 1, 0.1) {
            Err(Error::NonFinite { term }) => assert_eq!(term, "decoder.w"),
            other => panic!("{other:?}"),
        }
    }
}

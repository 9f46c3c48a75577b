use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamConfig) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(Tensor::zeros_like).collect();
        let second = first.clone();
        Adam {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, state for {}",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            p.same_shape(g, "adam_step")?;
            p.same_shape(m, "adam_step")?;
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let (pd, gd) = (p.data_mut(), g.data());
            for (((pi, &gi), mi), vi) in pd
                .iter_mut()
                .zip(gd)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::new([2], vec![1.0, -3.0]).unwrap();
        let mut adam = Adam::new([&p], AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[Tensor::zeros([2])], 1e-3).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -3.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::scalar(0.0);
        let mut adam = Adam::new([&p], AdamConfig::default());
        adam.step(&mut [&mut p], &[Tensor::scalar(1.0)], 0.001).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        assert!((p.data()[0] + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut p = Tensor::scalar(0.0);
        let mut adam = Adam::new([&p], AdamConfig::default());
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..2000 {
            adam.step(&mut [&mut p], &[Tensor::scalar(0.37)], 0.01).unwrap();
            last_step = prev - p.data()[0];
            prev = p.data()[0];
        }
        assert!((last_step - 0.01).abs() < 1e-6, "{last_step}");
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut p = Tensor::scalar(0.0);
        let mut adam = Adam::new([&p], AdamConfig::default());
        assert!(adam.step(&mut [&mut p], &[Tensor::scalar(1.0)], 0.0).is_err());
        assert!(adam.step(&mut [&mut p], &[Tensor::scalar(1.0)], -1.0).is_err());
    }
}

//! Adam optimizer with bias correction.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Adam> {
        Adam::with_hyperparams(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Adam> {
        if lr <= 0.0 {
            return Err(Error::invalid("Adam", format!("learning rate {lr} must be > 0")));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
            return Err(Error::invalid("Adam", "betas must be in [0,1), eps > 0"));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr.max(0.0);
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over `params`, reading each tensor's accumulated gradient
    /// (missing gradient storage counts as zero). The parameter list must be
    /// the same, in the same order, on every call.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid("Adam::step", "parameter list changed size"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter().enumerate() {
            if self.m[i].len() != p.len() {
                return Err(Error::invalid("Adam::step", "parameter shape changed"));
            }
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.len()]);
            let mut data = p.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.set_data(&data)?;
        }
        Ok(())
    }

    /// Flat copies of the first/second moment state, for checkpointing.
    pub fn state(&self) -> (u64, &[Vec<f64>], &[Vec<f64>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::super::tape;
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let p = Tensor::param(vec![1.0, -2.0], &[2]).unwrap();
        let mut adam = Adam::new(1e-3).unwrap();
        adam.step(&[p.clone()]).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // With a constant gradient g, bias-corrected Adam moves by
        // lr * g / (|g| + eps) ~ lr * sign(g) on the first step.
        tape::clear();
        let p = Tensor::param(vec![0.5, -0.25], &[2]).unwrap();
        p.accumulate_grad(|g| {
            g[0] = 3.0;
            g[1] = -0.7;
        });
        let mut adam = Adam::new(1e-2).unwrap();
        adam.step(&[p.clone()]).unwrap();
        let d = p.to_vec();
        assert!((d[0] - (0.5 - 1e-2)).abs() < 1e-8);
        assert!((d[1] - (-0.25 + 1e-2)).abs() < 1e-8);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        assert!(Adam::new(0.0).is_err());
        assert!(Adam::new(-1.0).is_err());
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            tape::clear();
            let p = Tensor::param(vec![0.3, 0.7, -0.2], &[3]).unwrap();
            let mut adam = Adam::new(1e-3).unwrap();
            for step in 0..25 {
                p.zero_grad();
                let loss = p.square().sum().mul_scalar(1.0 + step as f64 * 0.1).sum();
                loss.backward().unwrap();
                adam.step(&[p.clone()]).unwrap();
                tape::clear();
            }
            p.to_vec()
        };
        let a = run();
        let b = run();
        // bitwise identical
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

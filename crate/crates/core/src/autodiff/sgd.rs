use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Momentum SGD with a step-wise learning-rate schedule.
///
/// Update: `v ← momentum·v − lr·g; p ← p + v`. After every `decay_every`
/// steps the learning rate is multiplied by `decay_factor`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub step_count: u64,
    pub decay_every: u64,
    pub decay_factor: f64,
    #[serde(skip)]
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            step_count: 0,
            decay_every: 4000,
            decay_factor: 0.1,
            velocity: Vec::new(),
        })
    }

    pub fn with_decay(mut self, every: u64, factor: f64) -> Self {
        self.decay_every = every;
        self.decay_factor = factor;
        self
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.len() != g.len() || p.len() != v.len() {
                return Err(Error::Shape("parameter, gradient and velocity shapes differ".into()));
            }
            for ((pi, &gi), vi) in p.values_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi - self.lr * gi.to_f64();
                *pi = T::from_f64(pi.to_f64() + *vi);
            }
        }
        self.step_count += 1;
        if self.decay_every > 0 && self.step_count % self.decay_every == 0 {
            self.lr *= self.decay_factor;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one() -> Vec<Tensor<f64>> {
        vec![Tensor::new(vec![1], vec![0.0]).unwrap()]
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = one();
        let mut s = SgdState::new(0.1, 0.0).unwrap();
        s.step(&mut p, &[vec![1.0]]).unwrap();
        assert!((p[0].values()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = one();
        let mut s = SgdState::new(0.1, 0.99).unwrap();
        s.step(&mut p, &[vec![1.0]]).unwrap();
        assert!((s.velocity()[0][0] + 0.1).abs() < 1e-15);
        assert!((p[0].values()[0] + 0.1).abs() < 1e-15);
        s.step(&mut p, &[vec![1.0]]).unwrap();
        assert!((s.velocity()[0][0] + 0.199).abs() < 1e-15);
        assert!((p[0].values()[0] + 0.299).abs() < 1e-15);
        assert_eq!(s.step_count, 2);
    }

    #[test]
    fn lr_drops_tenfold_every_4000_steps() {
        let mut p = one();
        let mut s = SgdState::new(0.01, 0.0).unwrap();
        for _ in 0..3999 {
            s.step(&mut p, &[vec![0.0]]).unwrap();
        }
        assert_eq!(s.lr, 0.01);
        s.step(&mut p, &[vec![0.0]]).unwrap();
        assert!((s.lr - 0.001).abs() < 1e-15);
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(SgdState::new(0.0, 0.5).is_err());
        assert!(SgdState::new(0.1, 1.0).is_err());
    }
}

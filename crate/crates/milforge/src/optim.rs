//! Adam with decoupled weight decay and bias correction.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// (first moment, second moment) per parameter, same shapes.
    moments: Vec<(Matrix, Matrix)>,
}

impl OptimizerState {
    pub fn new(lr: f64, weight_decay: f64, shapes: &[(usize, usize)]) -> Self {
        OptimizerState {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: shapes
                .iter()
                .map(|&(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
                .collect(),
        }
    }

    pub fn adam_step(&mut self, params: &mut [Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.moments.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps)
                    + self.lr * self.weight_decay * p.data[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let mut p = vec![Matrix::from_rows(&[vec![1.5, -2.0]])];
        let g = vec![Matrix::zeros(1, 2)];
        let mut s = OptimizerState::new(1e-3, 0.0, &[(1, 2)]);
        s.adam_step(&mut p, &g).unwrap();
        assert_eq!(p[0].data, vec![1.5, -2.0]);
    }

    #[test]
    fn single_step_moves_by_about_lr() {
        // With bias correction, one step with constant gradient g moves the
        // parameter by lr * g/(|g| + eps') ~= lr * sign(g).
        let lr = 2e-4;
        for &g0 in &[0.7, -1.3] {
            let mut p = vec![Matrix::scalar(1.0)];
            let g = vec![Matrix::scalar(g0)];
            let mut s = OptimizerState::new(lr, 0.0, &[(1, 1)]);
            s.adam_step(&mut p, &g).unwrap();
            let delta = p[0].data[0] - 1.0;
            assert!((delta + lr * g0.signum()).abs() < 1e-8, "delta {delta}");
        }
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // minimize (w - 3)^2 from w = 2.7 at the trained learning rate.
        let mut p = vec![Matrix::scalar(2.7)];
        let mut s = OptimizerState::new(2e-4, 0.0, &[(1, 1)]);
        for _ in 0..5000 {
            let w = p[0].data[0];
            let g = vec![Matrix::scalar(2.0 * (w - 3.0))];
            s.adam_step(&mut p, &g).unwrap();
        }
        assert!((p[0].data[0] - 3.0).abs() < 1e-2, "w = {}", p[0].data[0]);
    }

    #[test]
    fn deterministic_given_identical_inputs() {
        let run = || {
            let mut p = vec![Matrix::from_rows(&[vec![0.3, -0.4, 0.9]])];
            let mut s = OptimizerState::new(1e-3, 1e-5, &[(1, 3)]);
            for i in 0..50 {
                let g = vec![Matrix::from_rows(&[vec![
                    (i as f64).sin(),
                    0.1,
                    -0.2 * i as f64,
                ]])];
                s.adam_step(&mut p, &g).unwrap();
            }
            p[0].data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![Matrix::zeros(1, 2)];
        let g = vec![Matrix::zeros(2, 1)];
        let mut s = OptimizerState::new(1e-3, 0.0, &[(1, 2)]);
        assert!(s.adam_step(&mut p, &g).is_err());
    }
}

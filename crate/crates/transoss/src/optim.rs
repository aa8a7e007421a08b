//! Stochastic gradient descent with classical momentum.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SGD state. Velocity buffers are indexed by the caller's tensor order,
/// which must stay stable across steps (and across checkpoint resume).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            weight_decay: 0.0,
            velocity: Vec::new(),
        }
    }

    /// Update one tensor in place: `v <- mu*v + g`, `p <- p - lr*v`.
    pub fn step_tensor(&mut self, idx: usize, t: &mut Tensor<f64>, lr: f64) -> Result<()> {
        let n = t.numel();
        if self.velocity.len() <= idx {
            self.velocity.resize(idx + 1, Vec::new());
        }
        if self.velocity[idx].is_empty() {
            self.velocity[idx] = vec![0.0; n];
        } else if self.velocity[idx].len() != n {
            return Err(Error::Invalid(format!(
                "optimizer slot {idx} holds {} elements, tensor has {n}",
                self.velocity[idx].len()
            )));
        }
        let grad = t
            .grad()
            .ok_or_else(|| Error::Invalid(format!("sgd step on tensor {idx} without gradient")))?
            .to_vec();
        let v = &mut self.velocity[idx];
        let data = t.data_mut();
        for i in 0..n {
            let mut g = grad[i];
            if self.weight_decay != 0.0 {
                g += self.weight_decay * data[i];
            }
            v[i] = self.momentum * v[i] + g;
            data[i] -= lr * v[i];
        }
        Ok(())
    }

    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn set_velocities(&mut self, v: Vec<Vec<f64>>) {
        self.velocity = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(data: Vec<f64>, grad: Vec<f64>) -> Tensor<f64> {
        let n = data.len();
        let mut t = Tensor::from_vec(vec![n], data).with_grad();
        t.set_grad(grad);
        t
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut opt = Sgd::new(0.9);
        let mut p = with_grad(vec![1.0, -2.0], vec![5.0, 5.0]);
        opt.step_tensor(0, &mut p, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn plain_step_arithmetic() {
        let mut opt = Sgd::new(0.0);
        let mut p = with_grad(vec![1.0], vec![2.0]);
        opt.step_tensor(0, &mut p, 0.5).unwrap();
        assert_eq!(p.data(), &[0.0]);
    }

    #[test]
    fn missing_grad_errors() {
        let mut opt = Sgd::new(0.9);
        let mut p = Tensor::from_vec(vec![1], vec![1.0]).with_grad();
        assert!(opt.step_tensor(0, &mut p, 0.1).is_err());
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut opt = Sgd::new(0.6);
        let mut p = Tensor::from_vec(vec![3], vec![5.0, -3.0, 2.0]).with_grad();
        for _ in 0..100 {
            let g: Vec<f64> = p.data().iter().map(|&x| 2.0 * x).collect();
            p.set_grad(g);
            opt.step_tensor(0, &mut p, 0.2).unwrap();
        }
        let norm: f64 = p.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "norm after descent: {norm}");
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = Sgd::new(0.9);
        let mut p = with_grad(vec![0.0], vec![1.0]);
        opt.step_tensor(0, &mut p, 1.0).unwrap();
        assert_eq!(p.data(), &[-1.0]);
        p.set_grad(vec![1.0]);
        opt.step_tensor(0, &mut p, 1.0).unwrap();
        // second step applies v = 0.9*1 + 1
        assert!((p.data()[0] - (-2.9)).abs() < 1e-12);
    }
}

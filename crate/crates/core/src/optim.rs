//! Parameter-update rules for the training loops.
//!
//! Plain SGD is the default everywhere for reproducibility; Adam sits behind
//! a config switch and drives critic fitting, where SGD is too slow to reach
//! a usable bound within the step budgets used here.

use crate::diffcore::Tensor;

pub trait Optimizer {
    /// Apply one update; `grads[i]` matches `params[i]` in shape.
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]);
}

pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        for (p, g) in params.iter_mut().zip(grads) {
            for (pv, gv) in p.data.iter_mut().zip(&g.data) {
                *pv -= self.lr * gv;
            }
        }
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let (p, g) = (&mut params[i], &grads[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * gj;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * gj * gj;
                let mhat = self.m[i][j] / bc1;
                let vhat = self.v[i][j] / bc2;
                p.data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in &mut g.data {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_minimizes_a_quadratic() {
        let mut p = vec![Tensor::scalar(5.0)];
        let mut opt = Sgd { lr: 0.2 };
        for _ in 0..50 {
            let g = vec![Tensor::scalar(2.0 * p[0].data[0])];
            opt.step(&mut p, &g);
        }
        assert!(p[0].data[0].abs() < 1e-5);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![Tensor::scalar(5.0)];
        let mut opt = Adam::new(0.3);
        for _ in 0..200 {
            let g = vec![Tensor::scalar(2.0 * p[0].data[0])];
            opt.step(&mut p, &g);
        }
        assert!(p[0].data[0].abs() < 1e-2, "{}", p[0].data[0]);
    }

    #[test]
    fn clip_preserves_direction_and_caps_norm() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        let pre = clip_global_norm(&mut g, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        assert!((g[0].data[0] - 0.6).abs() < 1e-12);
        assert!((g[0].data[1] - 0.8).abs() < 1e-12);
    }
}

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Tensor;

/// Standard deviation of the initial convolution weights.
pub const INIT_STD: f64 = 0.02;

/// Tensor of N(0, 0.02²) draws.
pub fn normal_init<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restores accumulators, e.g. from a checkpoint.
    pub fn set_state(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) {
        assert!(m.len() == self.m.len() && v.len() == self.v.len(), "optimizer state size mismatch");
        self.step = step;
        self.m = m;
        self.v = v;
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert!(params.len() == self.m.len() && grads.len() == params.len(), "parameter count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            let (pd, gd) = (p.data_mut(), g.data());
            for (((x, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::real::Real;

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − η·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<T>,
    pub steps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<T: Real> Sgd<T> {
    pub fn new(n_params: usize, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: vec![T::zero(); n_params],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        debug_assert_eq!(params.len(), grads.len());
        let (lr, mu, wd) = (T::of(self.lr), T::of(self.momentum), T::of(self.weight_decay));
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            *v = mu * *v + g + wd * *p;
            *p -= lr * *v;
        }
        self.steps += 1;
    }
}

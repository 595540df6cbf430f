use serde::{Deserialize, Serialize};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl Sgd {
    /// `v = m v + (g + wd x)`, `x -= lr v`.
    pub fn step(&self, lr: f64, params: &mut [f64], grad: &[f64], velocity: &mut Vec<f64>) {
        assert_eq!(params.len(), grad.len());
        if velocity.len() != params.len() {
            *velocity = vec![0.0; params.len()];
        }
        for ((x, g), v) in params.iter_mut().zip(grad).zip(velocity.iter_mut()) {
            *v = self.momentum * *v + g + self.weight_decay * *x;
            *x -= lr * *v;
        }
    }
}

/// `lr_init * (1 - iter / max_iter)^0.9`.
pub fn poly_lr(lr_init: f64, iter: usize, max_iter: usize) -> f64 {
    assert!(iter <= max_iter, "iter {iter} beyond max_iter {max_iter}");
    if max_iter == 0 {
        return lr_init;
    }
    lr_init * (1.0 - iter as f64 / max_iter as f64).powf(0.9)
}

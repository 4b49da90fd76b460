use super::Param;
use serde::{Deserialize, Serialize};

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay:
/// `v = momentum * v + (g + wd * w)`, `w -= lr * v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl Sgd {
    /// Update every trainable parameter for which `frozen(name)` is false.
    pub fn step<'a>(&self, params: impl IntoIterator<Item = (String, &'a mut Param)>, frozen: impl Fn(&str) -> bool) {
        let (lr, mom, wd) = (self.lr as f32, self.momentum as f32, self.weight_decay as f32);
        for (name, p) in params {
            if !p.trainable || frozen(&name) {
                continue;
            }
            for ((w, g), v) in p.value.iter_mut().zip(&p.grad).zip(p.velocity.iter_mut()) {
                *v = mom * *v + (*g + wd * *w);
                *w -= lr * *v;
            }
        }
    }
}

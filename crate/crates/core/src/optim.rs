//! Adam over the parameter record.

use crate::model::Weights;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Weights,
    second: Weights,
}

impl Adam {
    pub fn new(weights: &Weights, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: weights.zeros_like(),
            second: weights.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, weights: &mut Weights, grads: &Weights) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let params = weights.named_mut();
        let firsts = self.first.named_mut();
        let seconds = self.second.named_mut();
        for ((((_, w), (_, m)), (_, v)), (_, g)) in params.into_iter().zip(firsts).zip(seconds).zip(grads.named()) {
            ndarray::Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MaskActivation, ModelConfig, ModelParams};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = ModelConfig {
            channels: 1,
            height: 8,
            width: 8,
            queries: 2,
            dim: 4,
            hidden: 2,
            ffn: 4,
            mask_activation: MaskActivation::Softmax,
            new_row_std: 0.01,
        };
        let mut p = ModelParams::init(cfg, &[1], 0);
        let before = p.weights.clone();
        let mut g = p.weights.zeros_like();
        g.query.fill(3.0);
        let mut opt = Adam::new(&p.weights, 0.01);
        opt.update(&mut p.weights, &g);
        let delta = &before.query - &p.weights.query;
        assert!(delta.iter().all(|d| (d - 0.01).abs() < 1e-9));
        assert_eq!(p.weights.cls_w, before.cls_w);
        assert_eq!(opt.steps(), 1);
    }
}

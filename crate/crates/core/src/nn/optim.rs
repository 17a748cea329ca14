use serde::{Deserialize, Serialize};

use super::param::Module;

/// Stochastic gradient descent with classical (heavy-ball) momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f32,
    momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    /// `v <- mu * v + g; p <- p - lr * v` for every parameter of `model`.
    pub fn step(&mut self, model: &mut dyn Module) {
        let mut i = 0;
        let (lr, mu) = (self.lr, self.momentum);
        let velocity = &mut self.velocity;
        model.visit_params(&mut |p| {
            if velocity.len() <= i {
                velocity.push(vec![0.0; p.len()]);
            }
            let v = &mut velocity[i];
            for ((w, g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vel = mu * *vel + g;
                *w -= lr * *vel;
            }
            i += 1;
        });
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(model: &mut dyn Module, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    model.visit_params(&mut |p| sq += p.grad.iter().map(|&g| g as f64 * g as f64).sum::<f64>());
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        model.visit_params(&mut |p| p.grad.iter_mut().for_each(|g| *g *= scale));
    }
    norm
}

/// Step decay: `lr = base * gamma^(epoch / step_size)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLr {
    pub step_size: usize,
    pub gamma: f32,
}

impl StepLr {
    pub fn lr_at(&self, base: f32, epoch: usize) -> f32 {
        if self.step_size == 0 {
            return base;
        }
        base * self.gamma.powi((epoch / self.step_size) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::Param;

    struct One(Param);
    impl Module for One {
        fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut m = One(Param::new("w", vec![1], vec![1.0]));
        let mut opt = Sgd::new(0.1, 0.9);
        m.0.grad = vec![1.0];
        opt.step(&mut m);
        assert!((m.0.value[0] - 0.9).abs() < 1e-7);
        opt.step(&mut m);
        // v = 0.9 + 1 = 1.9
        assert!((m.0.value[0] - (0.9 - 0.19)).abs() < 1e-6);
    }

    #[test]
    fn clipping_rescales_only_large_gradients() {
        let mut m = One(Param::new("w", vec![2], vec![0.0, 0.0]));
        m.0.grad = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut m, 10.0), 5.0);
        assert_eq!(m.0.grad, vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut m, 1.0), 5.0);
        assert!((m.0.grad[0] - 0.6).abs() < 1e-7 && (m.0.grad[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn step_schedule_halves() {
        let s = StepLr { step_size: 50, gamma: 0.5 };
        assert_eq!(s.lr_at(0.01, 0), 0.01);
        assert_eq!(s.lr_at(0.01, 49), 0.01);
        assert_eq!(s.lr_at(0.01, 50), 0.005);
        assert_eq!(s.lr_at(0.01, 149), 0.0025);
    }
}

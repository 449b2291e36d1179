//! Optimizers. SGD with momentum drives full-model training; Adam drives
//! head-only retraining. Both are plain sequential updates so a fixed seed
//! reproduces parameter trajectories bit for bit.

use ndarray::{Array1, Array2, Array4, Zip};

use super::{Gradients, LinearHead, SplitModel};

/// SGD with classical momentum and decoupled-from-bias weight decay:
/// `v = mu * v + (g + wd * w); w -= lr * v`. Decay applies to weight
/// tensors only, never biases.
pub struct SgdMomentum {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Option<Gradients>,
}

impl SgdMomentum {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        SgdMomentum {
            lr,
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, model: &mut SplitModel, grads: &Gradients) {
        let velocity = self.velocity.get_or_insert_with(|| Gradients {
            conv_w: std::array::from_fn(|i| Array4::zeros(grads.conv_w[i].raw_dim())),
            conv_b: std::array::from_fn(|i| Array1::zeros(grads.conv_b[i].raw_dim())),
            head_w: Array2::zeros(grads.head_w.raw_dim()),
            head_b: Array1::zeros(grads.head_b.raw_dim()),
        });
        let (mu, wd, lr) = (self.momentum, self.weight_decay, self.lr);

        for layer in 0..3 {
            Zip::from(&mut velocity.conv_w[layer])
                .and(&grads.conv_w[layer])
                .and(&model.features.convs[layer].weight)
                .for_each(|v, &g, &w| *v = mu * *v + g + wd * w);
            Zip::from(&mut model.features.convs[layer].weight)
                .and(&velocity.conv_w[layer])
                .for_each(|w, &v| *w -= lr * v);

            Zip::from(&mut velocity.conv_b[layer])
                .and(&grads.conv_b[layer])
                .for_each(|v, &g| *v = mu * *v + g);
            Zip::from(&mut model.features.convs[layer].bias)
                .and(&velocity.conv_b[layer])
                .for_each(|b, &v| *b -= lr * v);
        }

        Zip::from(&mut velocity.head_w)
            .and(&grads.head_w)
            .and(&model.head.weight)
            .for_each(|v, &g, &w| *v = mu * *v + g + wd * w);
        Zip::from(&mut model.head.weight)
            .and(&velocity.head_w)
            .for_each(|w, &v| *w -= lr * v);

        Zip::from(&mut velocity.head_b)
            .and(&grads.head_b)
            .for_each(|v, &g| *v = mu * *v + g);
        Zip::from(&mut model.head.bias)
            .and(&velocity.head_b)
            .for_each(|b, &v| *b -= lr * v);
    }
}

/// Adam for the linear head only. The caller owns the learning-rate
/// schedule and passes the current rate to each step.
pub struct AdamHead {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m_w: Array2<f32>,
    v_w: Array2<f32>,
    m_b: Array1<f32>,
    v_b: Array1<f32>,
}

impl AdamHead {
    pub fn new(classes: usize, dim: usize) -> Self {
        AdamHead {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m_w: Array2::zeros((classes, dim)),
            v_w: Array2::zeros((classes, dim)),
            m_b: Array1::zeros(classes),
            v_b: Array1::zeros(classes),
        }
    }

    pub fn step(&mut self, head: &mut LinearHead, dw: &Array2<f32>, db: &Array1<f32>, lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);

        Zip::from(&mut self.m_w).and(dw).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
        Zip::from(&mut self.v_w).and(dw).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        Zip::from(&mut head.weight)
            .and(&self.m_w)
            .and(&self.v_w)
            .for_each(|w, &m, &v| *w -= lr * (m / bc1) / ((v / bc2).sqrt() + eps));

        Zip::from(&mut self.m_b).and(db).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
        Zip::from(&mut self.v_b).and(db).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        Zip::from(&mut head.bias)
            .and(&self.m_b)
            .and(&self.v_b)
            .for_each(|b, &m, &v| *b -= lr * (m / bc1) / ((v / bc2).sqrt() + eps));
    }
}

/// Step-decay schedule: `lr0 * gamma^(floor((epoch - 1) / step))` with
/// 1-based epochs; `step == 0` disables decay.
pub fn stepped_lr(lr0: f64, gamma: f64, step: usize, epoch: usize) -> f32 {
    if step == 0 {
        return lr0 as f32;
    }
    (lr0 * gamma.powi(((epoch - 1) / step) as i32)) as f32
}

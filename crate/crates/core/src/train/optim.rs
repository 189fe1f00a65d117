use super::config::{OptimizerKind, TrainConfig};
use crate::model::ModelParams;

fn zeros_like(p: &ModelParams) -> ModelParams {
    let mut z = p.clone();
    for t in z.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    z
}

/// First-order optimizer state. The weight-decay term `weight_decay * p` is
/// added to the gradient before the update.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    steps: u64,
    first: ModelParams,
    second: ModelParams,
}

impl Optimizer {
    pub fn new(config: &TrainConfig, params: &ModelParams) -> Self {
        Optimizer {
            kind: config.optimizer,
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.adam_epsilon,
            weight_decay: config.weight_decay,
            steps: 0,
            first: zeros_like(params),
            second: zeros_like(params),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// sgd_momentum: `v = mu v + g; p -= lr v`.
    /// adam: bias-corrected moment estimates, `p -= lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams) {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let tensors = params
            .tensors_mut()
            .zip(grad.tensors())
            .zip(self.first.tensors_mut().zip(self.second.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            let p = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i] + self.weight_decay * p[i];
                match self.kind {
                    OptimizerKind::SgdMomentum => {
                        m[i] = self.momentum * m[i] + gi;
                        p[i] -= self.learning_rate * m[i];
                    }
                    OptimizerKind::Adam => {
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        p[i] -= self.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + self.epsilon);
                    }
                }
            }
        }
    }
}

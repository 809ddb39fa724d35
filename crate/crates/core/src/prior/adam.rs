//! Adam with a staircase exponential learning-rate decay.

pub const BASE_LEARNING_RATE: f64 = 0.05;
pub const DECAY_RATE: f64 = 0.9;
pub const DECAY_STEPS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: usize,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub base_lr: f64,
    pub decay_rate: f64,
    pub decay_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            step: 0,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            base_lr: BASE_LEARNING_RATE,
            decay_rate: DECAY_RATE,
            decay_steps: DECAY_STEPS,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Rate applied at step `t` (0-based).
    pub fn learning_rate(&self, t: usize) -> f64 {
        (0..t / self.decay_steps).fold(self.base_lr, |lr, _| lr * self.decay_rate)
    }

    /// One update in place; `params` and `grad` must match the state's shape.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.first.len());
        assert_eq!(grad.len(), self.first.len());
        let lr = self.learning_rate(self.step);
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.first[i] = self.beta1 * self.first[i] + (1.0 - self.beta1) * g;
            self.second[i] = self.beta2 * self.second[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first[i] / bc1;
            let v_hat = self.second[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

use super::params::Slot;

/// SGD with classical momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<f32>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, n: usize) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }
}

/// Adam with decoupled weight decay on slots flagged `decay`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    decay_mask: Vec<bool>,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize, slots: &[Slot], weight_decay: f32) -> Self {
        let mut decay_mask = vec![false; n];
        for s in slots.iter().filter(|s| s.decay) {
            decay_mask[s.range()].iter_mut().for_each(|d| *d = true);
        }
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            decay_mask,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            if self.decay_mask[i] {
                params[i] -= lr * self.weight_decay * params[i];
            }
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Linear warmup followed by cosine decay to zero, indexed by step.
pub fn warmup_cosine(base_lr: f32, step: usize, warmup_steps: usize, total_steps: usize) -> f32 {
    if step < warmup_steps {
        return base_lr * (step + 1) as f32 / warmup_steps as f32;
    }
    let span = (total_steps - warmup_steps).max(1) as f32;
    let progress = ((step - warmup_steps) as f32 / span).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
}

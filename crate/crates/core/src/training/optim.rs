use std::collections::BTreeMap;

use crate::encoder::EncoderModel;

/// Adam with decoupled weight decay. Biases, gains and norms are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

fn decays(name: &str) -> bool {
    name.ends_with(".weight") || name == "embeddings.token"
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update from the gradients stored on the parameters. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, model: &mut EncoderModel, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, param) in model.params.iter_mut() {
            let n = param.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let grad = param.grad.take();
            let decay = if decays(name) { self.weight_decay } else { 0.0 };
            let data = param.data_mut();
            for i in 0..n {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * data[i]);
            }
            param.grad = grad;
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then linear decay to zero at
/// `total`. `step` counts from zero.
pub fn learning_rate(peak: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let remaining = total.saturating_sub(step) as f64;
    let span = total.saturating_sub(warmup).max(1) as f64;
    peak * (remaining / span).clamp(0.0, 1.0)
}

/// Global L2 norm of all stored gradients, in parameter-name order.
pub fn grad_norm(model: &EncoderModel) -> f64 {
    model
        .params
        .values()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(model: &mut EncoderModel, max_norm: f64) -> f64 {
    let norm = grad_norm(model);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in model.params.values_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
    norm
}

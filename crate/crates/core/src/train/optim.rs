//! Adaptive-moment optimizer with decoupled weight decay.

use ndarray::Array2;

use super::model::ModelParams;

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: usize,
}

impl AdamW {
    pub fn new(params: &ModelParams, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            m: params.entries.iter().map(|e| Array2::zeros(e.value.raw_dim())).collect(),
            v: params.entries.iter().map(|e| Array2::zeros(e.value.raw_dim())).collect(),
            step: 0,
        }
    }

    /// One update. `grads` pairs parameter names with gradients; parameters
    /// without a gradient are skipped entirely (no decay either).
    pub fn update(&mut self, params: &mut ModelParams, grads: &[(String, Array2<f64>)], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(idx) = params.index_of(name) else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let decay = if params.entries[idx].decay { self.weight_decay } else { 0.0 };
            let theta = &mut params.entries[idx].value;
            ndarray::Zip::from(theta)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|t, m, v, g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *t -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *t);
                });
        }
    }
}

/// Cosine decay from `lr` to zero over `total` steps.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    let t = (step as f64 / total as f64).min(1.0);
    0.5 * lr * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::model::ParamEntry;

    #[test]
    fn adamw_moves_against_the_gradient() {
        let mut params = ModelParams {
            entries: vec![ParamEntry {
                name: "w".into(),
                value: Array2::from_elem((1, 1), 1.0),
                decay: false,
            }],
        };
        let mut opt = AdamW::new(&params, 0.9, 0.98, 0.0);
        let grads = vec![("w".to_string(), Array2::from_elem((1, 1), 2.0))];
        let before = params.entries[0].value[[0, 0]];
        opt.update(&mut params, &grads, 0.1);
        assert!(params.entries[0].value[[0, 0]] < before);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(1.0, 0, 100) - 1.0).abs() < 1e-12);
        assert!(cosine_lr(1.0, 100, 100).abs() < 1e-12);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-12);
    }
}

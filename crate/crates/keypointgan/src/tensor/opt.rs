//! Adam with global-norm gradient clipping.

use std::collections::HashMap;

use ndarray::ArrayD;

use super::{ArrD, Gradients, Param};

/// Adam optimizer for one parameter group. Moment state is keyed by
/// parameter name so it survives checkpoint round trips.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: HashMap<String, (ArrD, ArrD)>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. Gradients are first rescaled so their global L2 norm
    /// across the whole group does not exceed `clip_norm` (if finite).
    /// Returns the post-clip global norm.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &Gradients, clip_norm: f64) -> f64 {
        let mut collected: Vec<Option<ArrD>> = params
            .iter()
            .map(|p| grads.for_param(p).cloned())
            .collect();

        let mut sq_sum = 0.0f64;
        for g in collected.iter().flatten() {
            sq_sum += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
        let norm = sq_sum.sqrt();
        let scale = if clip_norm.is_finite() && norm > clip_norm {
            clip_norm / norm
        } else {
            1.0
        };
        if scale != 1.0 {
            for g in collected.iter_mut().flatten() {
                g.mapv_inplace(|v| v * scale as f32);
            }
        }

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (p, g) in params.iter_mut().zip(collected) {
            let Some(g) = g else { continue };
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (ArrayD::zeros(g.shape()), ArrayD::zeros(g.shape())));
            let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
            m.zip_mut_with(&g, |mv, &gv| *mv = b1 * *mv + (1.0 - b1) * gv);
            v.zip_mut_with(&g, |vv, &gv| *vv = b2 * *vv + (1.0 - b2) * gv * gv);
            let lr = self.learning_rate;
            let (bc1f, bc2f, eps) = (bc1, bc2, self.epsilon);
            let value = p.value_mut();
            ndarray::Zip::from(&mut *value)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mv, &vv| {
                    let mhat = mv as f64 / bc1f;
                    let vhat = vv as f64 / bc2f;
                    *pv -= (lr * mhat / (vhat.sqrt() + eps)) as f32;
                });
        }
        norm * scale
    }

    /// Serializable view of the optimizer state.
    pub fn export_state(&self) -> (u64, Vec<(String, ArrD, ArrD)>) {
        let mut entries: Vec<_> = self
            .moments
            .iter()
            .map(|(k, (m, v))| (k.clone(), m.clone(), v.clone()))
            .collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        (self.step, entries)
    }

    pub fn import_state(&mut self, step: u64, entries: Vec<(String, ArrD, ArrD)>) {
        self.step = step;
        self.moments = entries.into_iter().map(|(k, m, v)| (k, (m, v))).collect();
    }
}

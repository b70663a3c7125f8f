use super::{NnError, ParamId, ParamStore, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over the optimized parameters of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub params: Vec<ParamId>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Registers every parameter that is trainable and not frozen.
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let params: Vec<ParamId> = store.ids().filter(|&id| store.is_optimized(id)).collect();
        let m = params.iter().map(|&id| vec![0.0; store.value(id).len()]).collect();
        let v = params.iter().map(|&id| vec![0.0; store.value(id).len()]).collect();
        Self {
            config,
            step: 0,
            params,
            m,
            v,
        }
    }

    /// Applies one update and clears all gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(&id) = self.params.iter().find(|&&id| !store.has_grad(id)) {
            return Err(NnError::MissingGrad(store.name(id).to_string()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, &id) in self.params.iter().enumerate() {
            let g = store.grad(id).to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.value_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_optimized(id)).collect();
    let norm = ids
        .iter()
        .map(|&id| store.grad(id).iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for id in ids {
            store.grad_mut(id).iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

/// Moment buffers and step counter, one slot per parameter of the store
/// the optimizer drives.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub first_moment: Vec<Option<Tensor>>,
    pub second_moment: Vec<Option<Tensor>>,
    pub step: u64,
}

/// What one update did.
#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Multiplier applied to every gradient (1 when not clipped).
    pub clip_scale: f64,
}

/// AdamW with decoupled weight decay and global-norm clipping applied
/// before the moment updates.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimizerState,
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping and the factor used.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> (f64, f64) {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
        (norm, s)
    } else {
        (norm, 1.0)
    }
}

pub fn global_norm(grads: &[Option<Tensor>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Cosine decay to zero after a linear warmup.
pub fn cosine_lr(base: f64, step: u64, total: u64, warmup: u64) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: OptimizerState::default(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update of every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<StepReport> {
        if grads.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != store.get(id).shape() {
                    return Err(Error::shape("optimizer_step", store.get(id).shape(), g.shape()));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter {}", store.name(id))));
                }
            }
        }
        let mut grads = grads.to_vec();
        let (grad_norm, clip_scale) = match self.config.clip_norm {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => (global_norm(&grads), 1.0),
        };

        let st = &mut self.state;
        st.first_moment.resize(store.len(), None);
        st.second_moment.resize(store.len(), None);
        st.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(st.step as i32);
        let bc2 = 1.0 - c.beta2.powi(st.step as i32);

        for (id, g) in store.ids().zip(&grads) {
            let Some(g) = g else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let shape = g.shape().to_vec();
            let m = st.first_moment[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = st.second_moment[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
            let p = store.get_mut(id);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi *= 1.0 - c.lr * c.weight_decay;
                *pi -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(StepReport { grad_norm, clip_scale })
    }

    /// Serializable view of the state, keyed by parameter names.
    pub fn state_table(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![("opt/step".to_string(), Tensor::scalar(self.state.step as f64))];
        for id in store.ids() {
            if let Some(Some(m)) = self.state.first_moment.get(id.0) {
                out.push((format!("opt/m/{}", store.name(id)), m.clone()));
            }
            if let Some(Some(v)) = self.state.second_moment.get(id.0) {
                out.push((format!("opt/v/{}", store.name(id)), v.clone()));
            }
        }
        out
    }

    /// Restores state written by [`AdamW::state_table`]; a table without
    /// optimizer entries leaves a fresh state.
    pub fn load_state(&mut self, store: &ParamStore, table: &[(String, Tensor)]) {
        let find = |name: &str| table.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());
        self.state = OptimizerState::default();
        self.state.first_moment.resize(store.len(), None);
        self.state.second_moment.resize(store.len(), None);
        if let Some(s) = find("opt/step") {
            self.state.step = s.item() as u64;
        }
        for id in store.ids() {
            self.state.first_moment[id.0] = find(&format!("opt/m/{}", store.name(id)));
            self.state.second_moment[id.0] = find(&format!("opt/v/{}", store.name(id)));
        }
    }
}

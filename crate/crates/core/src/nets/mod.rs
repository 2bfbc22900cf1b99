//! The network zoo: a per-frame autoencoder, a layered feedforward 3D
//! network with activation taps, a conditional rectified-flow generator
//! and a frozen class critic. All of them are built from [`Linear`]
//! layers whose weights live in a [`ParamStore`].

pub mod autoencoder;
pub mod critic;
pub mod feedforward;
pub mod flow;

use std::rc::Rc;

use rand::Rng;

pub use autoencoder::{train_autoencoder, AeConfig, LatentStats, VideoAE};
pub use critic::{train_critic, Critic, CriticConfig};
pub use feedforward::{train_feedforward3d, F3dConfig, F3dOutput, Feedforward3D, LossWeights, PoseParams, Prediction};
pub use flow::{flow_loss, sample, train_generator, FlowConfig, FlowGenerator};

use crate::error::{Error, Result};
use crate::tensor::{lora::adapted_matmul, Bound, ParamId, ParamStore, Tensor, Var};

/// Low-rank factors attached to a [`Linear`]; the base weight is frozen
/// while they exist.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterIds {
    pub down: ParamId,
    pub up: ParamId,
    pub scale: f64,
}

/// `y = x·(W + s·up·down)ᵀ + b` with `W: [out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub w: ParamId,
    pub b: ParamId,
    pub adapter: Option<AdapterIds>,
}

impl Linear {
    /// Gaussian weights with standard deviation `gain/sqrt(in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Linear {
        let std = gain / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}/w"), Tensor::randn(&[fan_out, fan_in], std, rng), true);
        let b = store.add(format!("{name}/b"), Tensor::zeros(&[fan_out]), true);
        Linear {
            name: name.to_string(),
            w,
            b,
            adapter: None,
        }
    }

    pub fn fan_in(&self, store: &ParamStore) -> usize {
        store.get(self.w).shape()[1]
    }

    pub fn fan_out(&self, store: &ParamStore) -> usize {
        store.get(self.w).shape()[0]
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        match &self.adapter {
            None => x.affine(&p[self.w], &p[self.b]),
            Some(a) => adapted_matmul(x, &p[self.w], &p[a.down], &p[a.up], a.scale)?.add_row(&p[self.b]),
        }
    }

    /// Freezes `W` and `b` and adds zero-initialized low-rank factors.
    pub fn attach_adapter<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<()> {
        if rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be positive".into()));
        }
        if self.adapter.is_some() {
            return Err(Error::InvalidArgument(format!(
                "layer {} already has an adapter",
                self.name
            )));
        }
        let (m, n) = (self.fan_out(store), self.fan_in(store));
        store.set_trainable(self.w, false);
        store.set_trainable(self.b, false);
        let down = store.add(
            format!("{}/lora_down", self.name),
            Tensor::randn(&[rank, n], 1.0 / (n as f64).sqrt(), rng),
            true,
        );
        let up = store.add(format!("{}/lora_up", self.name), Tensor::zeros(&[m, rank]), true);
        self.adapter = Some(AdapterIds {
            down,
            up,
            scale: alpha / rank as f64,
        });
        Ok(())
    }

    /// Weight with the adapter folded in.
    pub fn effective_weight(&self, store: &ParamStore) -> Tensor {
        let mut w = store.get(self.w).clone();
        if let Some(a) = &self.adapter {
            let delta = store.get(a.up).matmul(store.get(a.down)).expect("factor shapes agree");
            w.data_mut()
                .iter_mut()
                .zip(delta.data())
                .for_each(|(x, d)| *x += a.scale * d);
        }
        w
    }
}

/// Gather index turning `[n, h, w, k]` images into `[n·(h/p)·(w/p), p·p·k]`
/// patch rows. Rows are ordered `(image, patch row, patch col)`; within a
/// row, values are ordered `(dy, dx, channel)`.
pub fn patch_index(n: usize, h: usize, w: usize, p: usize, k: usize) -> Rc<[usize]> {
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(n * h * w * k);
    for i in 0..n {
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        let (y, x) = (py * p + dy, px * p + dx);
                        for c in 0..k {
                            idx.push(((i * h + y) * w + x) * k + c);
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// Inverse of [`patch_index`]: gathers patch rows back into images.
pub fn unpatch_index(n: usize, h: usize, w: usize, p: usize, k: usize) -> Rc<[usize]> {
    let fwd = patch_index(n, h, w, p, k);
    let mut inv = vec![0usize; fwd.len()];
    for (row_pos, &img_pos) in fwd.iter().enumerate() {
        inv[img_pos] = row_pos;
    }
    inv.into()
}

/// Gather index repeating each of `m` rows of width `d` `group` times.
pub fn broadcast_rows_index(m: usize, group: usize, d: usize) -> Rc<[usize]> {
    let mut idx = Vec::with_capacity(m * group * d);
    for r in 0..m * group {
        let src = r / group;
        idx.extend(src * d..(src + 1) * d);
    }
    idx.into()
}

/// Fails with the step index when a training loss is not finite.
pub(crate) fn check_loss(what: &str, step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} loss diverged at step {step}")))
    }
}

/// Deterministic shuffled minibatches over `0..n`.
pub(crate) fn epoch_batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

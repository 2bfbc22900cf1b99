use serde::{Deserialize, Serialize};

use super::{check_loss, epoch_batches, Linear};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{cosine_lr, AdamW, AdamWConfig, Bound, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub width: usize,
    pub epochs: usize,
    pub batch_frames: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            width: 64,
            epochs: 30,
            batch_frames: 32,
            lr: 2e-3,
            seed: 3,
        }
    }
}

/// Image classifier over prompt classes: flattened frame, one hidden GELU
/// layer, `C` logits. Frozen once trained.
#[derive(Clone, Debug)]
pub struct Critic {
    pub config: CriticConfig,
    pub store: ParamStore,
    pub num_classes: usize,
    pub image_len: usize,
    fc1: Linear,
    fc2: Linear,
    /// Held-out accuracy measured when training finished.
    pub heldout_accuracy: Option<f64>,
}

impl Critic {
    pub fn new(config: CriticConfig, image_len: usize, num_classes: usize) -> Critic {
        let mut r = rng::child(config.seed, 0xc71);
        let mut store = ParamStore::new();
        let fc1 = Linear::new(&mut store, "critic/fc1", image_len, config.width, 1.0, &mut r);
        let fc2 = Linear::new(&mut store, "critic/fc2", config.width, num_classes, 1.0, &mut r);
        Critic {
            config,
            store,
            num_classes,
            image_len,
            fc1,
            fc2,
            heldout_accuracy: None,
        }
    }

    pub fn from_table(
        config: CriticConfig,
        image_len: usize,
        num_classes: usize,
        table: &[(String, Tensor)],
    ) -> Result<Critic> {
        let mut c = Critic::new(config, image_len, num_classes);
        c.store.load_from(table)?;
        c.freeze();
        Ok(c)
    }

    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.trainable_count() == 0
    }

    /// `[n, H, W, 3]` (or any `[n, ..]` with `image_len` values per row)
    /// to `[n, C]` logits.
    pub fn logits<'t>(&self, p: &Bound<'t>, images: &Var<'t>) -> Result<Var<'t>> {
        let n = images.shape()[0];
        if images.numel() != n * self.image_len {
            return Err(Error::shape("critic", images.shape(), &[n, self.image_len]));
        }
        let x = images.reshape(&[n, self.image_len])?.scale(2.0).add_scalar(-1.0);
        self.fc2.forward(p, &self.fc1.forward(p, &x)?.gelu())
    }

    /// Mean log-probability of `class` over the images.
    pub fn log_prob<'t>(&self, p: &Bound<'t>, images: &Var<'t>, class: usize) -> Result<Var<'t>> {
        if class >= self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "class {class} out of range for {} classes",
                self.num_classes
            )));
        }
        let ls = self.logits(p, images)?.log_softmax()?;
        let n = ls.shape()[0];
        let idx: Vec<usize> = (0..n).map(|r| r * self.num_classes + class).collect();
        Ok(ls.gather(idx.into(), &[n])?.mean())
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let logits = self.logits(&p, &tape.constant(images.clone()))?;
        let c = self.num_classes;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(images)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

fn rows(images: &Tensor, idx: &[usize]) -> Tensor {
    let per = images.numel() / images.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data).expect("row selection")
}

/// Trains with cross-entropy, measures held-out accuracy and freezes the
/// critic. Fails when the held-out accuracy does not beat chance by 0.1.
pub fn train_critic(
    train: (&Tensor, &[usize]),
    heldout: (&Tensor, &[usize]),
    num_classes: usize,
    config: CriticConfig,
) -> Result<(Critic, Vec<f64>)> {
    let (images, labels) = train;
    let n = images.shape()[0];
    if n == 0 || labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "critic needs labeled renders, got {n} images and {} labels",
            labels.len()
        )));
    }
    let image_len = images.numel() / n;
    let mut critic = Critic::new(config.clone(), image_len, num_classes);
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        ..AdamWConfig::default()
    });
    let per_epoch = n.div_ceil(config.batch_frames.max(1)) as u64;
    let total = per_epoch * config.epochs as u64;
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut r = rng::child(config.seed, 0x3000 + epoch as u64);
        let batches = epoch_batches(n, config.batch_frames, &mut r);
        let mut acc = 0.0;
        for b in &batches {
            let tape = Tape::new();
            let p = critic.store.bind(&tape);
            let x = tape.constant(rows(images, b));
            let y: Vec<usize> = b.iter().map(|&i| labels[i]).collect();
            let loss = critic.logits(&p, &x)?.softmax_ce(&y)?;
            check_loss("critic", opt.state.step as usize, loss.item())?;
            acc += loss.item();
            let grads = p.grads(&tape.backward(&loss)?);
            opt.set_lr(cosine_lr(config.lr, opt.state.step, total, per_epoch));
            opt.step(&mut critic.store, &grads)?;
        }
        curve.push(acc / batches.len() as f64);
    }
    critic.freeze();
    let accuracy = critic.accuracy(heldout.0, heldout.1)?;
    critic.heldout_accuracy = Some(accuracy);
    let floor = 1.0 / num_classes as f64 + 0.1;
    if accuracy < floor {
        return Err(Error::TrainingFailed(format!(
            "critic held-out accuracy {accuracy:.3} below the usable floor {floor:.3}"
        )));
    }
    Ok((critic, curve))
}

use serde::{Deserialize, Serialize};

use super::StitchedModel;
use crate::error::{Error, Result};
use crate::nets::feedforward::{batch_frames, masked_l1, F3dOutput, Prediction};
use crate::nets::{check_loss, epoch_batches, Feedforward3D, LossWeights};
use crate::rng;
use crate::tensor::{cosine_lr, AdamW, AdamWConfig, Tape, Tensor, Var};
use crate::world::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_scenes: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub weights: LossWeights,
    /// Teacher pixels with lower confidence are excluded from the
    /// pointmap term.
    pub confidence_threshold: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 48,
            batch_scenes: 4,
            lr: 2e-4,
            warmup_steps: 20,
            clip_norm: 1.0,
            weights: LossWeights {
                pointmap: 1.0,
                confidence: 1e-2,
                pose: 5.0,
            },
            confidence_threshold: 0.5,
            seed: 11,
        }
    }
}

/// Outputs of the original 3D network on one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoTarget {
    pub prediction: Prediction,
    pub mask: Vec<bool>,
}

/// Teacher outputs of `f` on every sample.
pub fn pseudo_targets(f: &Feedforward3D, samples: &[Sample], threshold: f64) -> Result<Vec<PseudoTarget>> {
    samples
        .iter()
        .map(|s| {
            let prediction = f.predict(&s.views.frames, s.views.views())?;
            let mask = prediction.confidence.data().iter().map(|&c| c > threshold).collect();
            Ok(PseudoTarget { prediction, mask })
        })
        .collect()
}

fn distill_loss<'t>(out: &F3dOutput<'t>, targets: &[&PseudoTarget], w: LossWeights) -> Result<Var<'t>> {
    let tape = out.coords.tape();
    let mut coords = Vec::new();
    let mut mask = Vec::new();
    let mut conf = Vec::new();
    let mut pose = Vec::new();
    for t in targets {
        coords.extend_from_slice(t.prediction.coords.data());
        mask.extend_from_slice(&t.mask);
        conf.extend_from_slice(t.prediction.confidence.data());
        pose.extend(t.prediction.pose.iter().flat_map(|p| p.raw));
    }
    let pm = masked_l1(&out.coords, &Tensor::new(out.coords.shape(), coords)?, &mask, 3)?;
    let cf = out
        .confidence
        .l1(&tape.constant(Tensor::new(out.confidence.shape(), conf)?))?;
    let ps = out.pose.l1(&tape.constant(Tensor::new(out.pose.shape(), pose)?))?;
    pm.scale(w.pointmap)
        .add(&cf.scale(w.confidence))?
        .add(&ps.scale(w.pose))
}

/// Trains the stitch and the tail adapters to reproduce the original
/// network's outputs. Returns per-epoch mean losses.
pub fn finetune_stitched(
    model: &mut StitchedModel,
    samples: &[Sample],
    targets: &[PseudoTarget],
    config: &FinetuneConfig,
) -> Result<Vec<f64>> {
    if samples.is_empty() || samples.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "fine-tuning needs one teacher target per sample ({} samples, {} targets)",
            samples.len(),
            targets.len()
        )));
    }
    let views = samples[0].views.views();
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: 0.0,
        clip_norm: Some(config.clip_norm),
        ..AdamWConfig::default()
    });
    let per_epoch = samples.len().div_ceil(config.batch_scenes.max(1)) as u64;
    let total = per_epoch * config.epochs as u64;
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut r = rng::child(config.seed, 0x4000 + epoch as u64);
        let batches = epoch_batches(samples.len(), config.batch_scenes, &mut r);
        let mut acc = 0.0;
        for b in &batches {
            let batch: Vec<&Sample> = b.iter().map(|&i| &samples[i]).collect();
            let tb: Vec<&PseudoTarget> = b.iter().map(|&i| &targets[i]).collect();
            let tape = Tape::new();
            let p = model.net.store.bind(&tape);
            let out = model.forward_frames(&p, &tape.constant(batch_frames(&batch)?), views)?;
            let loss = distill_loss(&out, &tb, config.weights)?;
            check_loss("stitch fine-tuning", opt.state.step as usize, loss.item())?;
            acc += loss.item();
            let grads = p.grads(&tape.backward(&loss)?);
            opt.set_lr(cosine_lr(config.lr, opt.state.step, total, config.warmup_steps));
            opt.step(&mut model.net.store, &grads)?;
        }
        curve.push(acc / batches.len() as f64);
    }
    Ok(curve)
}

//! Layered feedforward 3D network.
//!
//! Frames `[B·V, H, W, 3]` are cut into `p×p` patches, one token per patch.
//! `f_1` embeds the patches and applies a residual block; `f_2..f_l` are
//! residual blocks. Every block sees the token plus a learned per-cell
//! positional embedding, the mean token of its view and the mean token of
//! its scene, so activations carry no positional state that a stitched
//! input would have to reproduce. Heads read the last activation.
//!
//! Token rows are ordered `(scene, view, cell row, cell col)`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{broadcast_rows_index, check_loss, epoch_batches, patch_index, unpatch_index, Linear};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{cosine_lr, AdamW, AdamWConfig, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::world::{Pose, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub pointmap: f64,
    pub confidence: f64,
    pub pose: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct F3dConfig {
    /// Number of layers `l`.
    pub layers: usize,
    pub width: usize,
    pub hidden: usize,
    /// Patch size of the token grid.
    pub patch: usize,
    pub pose_hidden: usize,
    pub epochs: usize,
    pub batch_scenes: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for F3dConfig {
    fn default() -> Self {
        F3dConfig {
            layers: 6,
            width: 48,
            hidden: 96,
            patch: 4,
            pose_hidden: 48,
            epochs: 40,
            batch_scenes: 4,
            lr: 2e-3,
            weights: LossWeights {
                pointmap: 1.0,
                confidence: 0.1,
                pose: 1.0,
            },
            seed: 2,
        }
    }
}

/// Decoded pose-head output: `(cos az, sin az)` direction, elevation and
/// radius as regressed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseParams {
    pub raw: [f64; 4],
}

/// Smallest radius a decoded pose may have.
pub const MIN_RADIUS: f64 = 0.05;
/// Largest magnitude a decoded elevation may have.
pub const MAX_ELEVATION: f64 = 1.45;

impl PoseParams {
    /// Regression target for a ground-truth pose.
    pub fn target(p: &Pose) -> [f64; 4] {
        [p.azimuth.cos(), p.azimuth.sin(), p.elevation, p.radius]
    }

    /// Look-at pose. The azimuth comes from the angle of the `(cos, sin)`
    /// pair, so no normalization is needed; the rotation is orthonormal by
    /// construction and the radius is at least [`MIN_RADIUS`].
    pub fn to_pose(&self, focal: f64) -> Pose {
        let [c, s, e, r] = self.raw;
        Pose {
            azimuth: s.atan2(c),
            elevation: e.clamp(-MAX_ELEVATION, MAX_ELEVATION),
            radius: if r.is_finite() { r.max(MIN_RADIUS) } else { MIN_RADIUS },
            focal,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    fc1: Linear,
    fc2: Linear,
}

/// Outputs of one forward pass.
pub struct F3dOutput<'t> {
    /// `[B·V, H, W, 3]` world coordinates.
    pub coords: Var<'t>,
    /// `[B·V, H, W]` in `(0, 1)`.
    pub confidence: Var<'t>,
    /// `[B·V, 4]` raw pose parameters.
    pub pose: Var<'t>,
    /// Activation after each of `f_1..f_l`, `[tokens, width]`.
    pub taps: Vec<Var<'t>>,
}

impl F3dOutput<'_> {
    pub fn pose_params(&self) -> Vec<PoseParams> {
        self.pose
            .data()
            .chunks(4)
            .map(|c| PoseParams {
                raw: [c[0], c[1], c[2], c[3]],
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Feedforward3D {
    pub config: F3dConfig,
    pub store: ParamStore,
    pub height: usize,
    pub width: usize,
    pos: ParamId,
    stem: Linear,
    blocks: Vec<Block>,
    pm_head: Linear,
    conf_head: Linear,
    pose1: Linear,
    pose2: Linear,
}

impl Feedforward3D {
    pub fn new(config: F3dConfig, height: usize, width: usize) -> Result<Feedforward3D> {
        let p = config.patch;
        if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "patch {p} must divide the {height}x{width} frame"
            )));
        }
        if config.layers < 2 {
            return Err(Error::Config("the 3D network needs at least 2 layers".into()));
        }
        let mut r = rng::child(config.seed, 0xf3d);
        let mut store = ParamStore::new();
        let (d, hd) = (config.width, config.hidden);
        let cells = (height / p) * (width / p);
        let pos = store.add("f3d/pos", Tensor::randn(&[cells, d], 0.5, &mut r), true);
        let stem = Linear::new(&mut store, "f3d/stem", p * p * 3, d, 1.0, &mut r);
        let blocks = (1..=config.layers)
            .map(|i| Block {
                fc1: Linear::new(&mut store, &format!("f3d/f{i}/fc1"), 3 * d, hd, 1.0, &mut r),
                fc2: Linear::new(&mut store, &format!("f3d/f{i}/fc2"), hd, d, 0.5, &mut r),
            })
            .collect();
        let pm_head = Linear::new(&mut store, "f3d/head_pm", d, p * p * 3, 0.5, &mut r);
        let conf_head = Linear::new(&mut store, "f3d/head_conf", d, p * p, 0.5, &mut r);
        let pose1 = Linear::new(&mut store, "f3d/head_pose1", d, config.pose_hidden, 1.0, &mut r);
        let pose2 = Linear::new(&mut store, "f3d/head_pose2", config.pose_hidden, 4, 0.5, &mut r);
        Ok(Feedforward3D {
            config,
            store,
            height,
            width,
            pos,
            stem,
            blocks,
            pm_head,
            conf_head,
            pose1,
            pose2,
        })
    }

    pub fn from_table(config: F3dConfig, h: usize, w: usize, table: &[(String, Tensor)]) -> Result<Self> {
        let mut f = Feedforward3D::new(config, h, w)?;
        f.store.load_from(table)?;
        Ok(f)
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    /// Token grid `(rows, cols)` per view.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.config.patch, self.width / self.config.patch)
    }

    fn cells(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }

    /// Attaches adapters to every matrix of `f_{k+1..l}` and the heads.
    pub fn attach_tail_adapters<R: rand::Rng + ?Sized>(
        &mut self,
        k: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<()> {
        let store = &mut self.store;
        for b in self.blocks.iter_mut().skip(k) {
            b.fc1.attach_adapter(store, rank, alpha, rng)?;
            b.fc2.attach_adapter(store, rank, alpha, rng)?;
        }
        for h in [&mut self.pm_head, &mut self.conf_head, &mut self.pose1, &mut self.pose2] {
            h.attach_adapter(store, rank, alpha, rng)?;
        }
        Ok(())
    }

    fn check_frames(&self, shape: &[usize], views: usize) -> Result<usize> {
        if shape.len() != 4 || shape[1] != self.height || shape[2] != self.width || shape[3] != 3 {
            return Err(Error::shape("feedforward3d", shape, &[0, self.height, self.width, 3]));
        }
        if views == 0 || !shape[0].is_multiple_of(views) {
            return Err(Error::InvalidArgument(format!(
                "{} frames do not split into sequences of {views} views",
                shape[0]
            )));
        }
        Ok(shape[0])
    }

    /// Patch tokens before `f_1`'s residual block, `[B·V·cells, width]`.
    fn embed<'t>(&self, p: &Bound<'t>, frames: &Var<'t>) -> Result<Var<'t>> {
        let n = frames.shape()[0];
        let ps = self.config.patch;
        let rows = frames
            .gather(
                patch_index(n, self.height, self.width, ps, 3),
                &[n * self.cells(), ps * ps * 3],
            )?
            .scale(2.0)
            .add_scalar(-1.0);
        self.stem.forward(p, &rows)
    }

    fn positional<'t>(&self, p: &Bound<'t>, rows: usize) -> Result<Var<'t>> {
        let cells = self.cells();
        let d = self.config.width;
        let idx: Rc<[usize]> = (0..rows)
            .flat_map(|r| {
                let c = r % cells;
                c * d..(c + 1) * d
            })
            .collect();
        p[self.pos].gather(idx, &[rows, d])
    }

    fn context<'t>(x: &Var<'t>, group: usize) -> Result<Var<'t>> {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        x.segment_mean(group)?
            .gather(broadcast_rows_index(n / group, group, d), &[n, d])
    }

    /// Layer `f_i` (1-based) applied to the previous activation.
    fn block<'t>(&self, p: &Bound<'t>, i: usize, x: &Var<'t>, views: usize) -> Result<Var<'t>> {
        let b = &self.blocks[i - 1];
        let n = x.shape()[0];
        let cells = self.cells();
        let local = x.add(&self.positional(p, n)?)?;
        let view_ctx = Self::context(x, cells)?;
        let scene_ctx = Self::context(x, cells * views)?;
        let u = Var::concat(&[&local, &view_ctx, &scene_ctx], 1)?;
        let h = b.fc1.forward(p, &u)?.gelu();
        x.add(&b.fc2.forward(p, &h)?)
    }

    fn heads<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let n = x.shape()[0];
        let cells = self.cells();
        let frames = n / cells;
        let ps = self.config.patch;
        let (h, w) = (self.height, self.width);
        let hx = x.add(&self.positional(p, n)?)?;
        let coords = self
            .pm_head
            .forward(p, &hx)?
            .gather(unpatch_index(frames, h, w, ps, 3), &[frames, h, w, 3])?;
        let confidence = self
            .conf_head
            .forward(p, &hx)?
            .sigmoid()
            .gather(unpatch_index(frames, h, w, ps, 1), &[frames, h, w])?;
        let pooled = x.segment_mean(cells)?;
        let pose = self.pose2.forward(p, &self.pose1.forward(p, &pooled)?.gelu())?;
        Ok((coords, confidence, pose))
    }

    /// Full forward on `[B·V, H, W, 3]` frames.
    pub fn forward<'t>(&self, p: &Bound<'t>, frames: &Var<'t>, views: usize) -> Result<F3dOutput<'t>> {
        self.check_frames(frames.shape(), views)?;
        let mut x = self.embed(p, frames)?;
        let mut taps = Vec::with_capacity(self.layers());
        for i in 1..=self.layers() {
            x = self.block(p, i, &x, views)?;
            taps.push(x.clone());
        }
        let (coords, confidence, pose) = self.heads(p, &x)?;
        Ok(F3dOutput {
            coords,
            confidence,
            pose,
            taps,
        })
    }

    /// Runs `f_{k+1..l}` and the heads on the activation after `f_k`.
    /// The returned taps hold layers `k+1..l`.
    pub fn forward_from<'t>(
        &self,
        p: &Bound<'t>,
        k: usize,
        activation: &Var<'t>,
        views: usize,
    ) -> Result<F3dOutput<'t>> {
        let d = self.config.width;
        let s = activation.shape();
        if k >= self.layers() {
            return Err(Error::InvalidArgument(format!(
                "tap index {k} leaves no layer to run (l = {})",
                self.layers()
            )));
        }
        if s.len() != 2 || s[1] != d || !s[0].is_multiple_of(self.cells() * views.max(1)) {
            return Err(Error::shape("forward_from", s, &[self.cells() * views, d]));
        }
        let mut x = activation.clone();
        let mut taps = Vec::new();
        for i in k + 1..=self.layers() {
            x = self.block(p, i, &x, views)?;
            taps.push(x.clone());
        }
        let (coords, confidence, pose) = self.heads(p, &x)?;
        Ok(F3dOutput {
            coords,
            confidence,
            pose,
            taps,
        })
    }

    /// Untracked forward on plain frames.
    pub fn predict(&self, frames: &Tensor, views: usize) -> Result<Prediction> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let out = self.forward(&p, &tape.constant(frames.clone()), views)?;
        Ok(Prediction::from_output(&out))
    }
}

/// Plain-tensor copy of a forward pass's outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub coords: Tensor,
    pub confidence: Tensor,
    pub pose: Vec<PoseParams>,
}

impl Prediction {
    pub fn from_output(out: &F3dOutput<'_>) -> Prediction {
        Prediction {
            coords: out.coords.value().clone(),
            confidence: out.confidence.value().clone(),
            pose: out.pose_params(),
        }
    }

    /// Frames `[start, start + count)` of this prediction.
    pub fn slice(&self, start: usize, count: usize) -> Prediction {
        let cut = |t: &Tensor| {
            let per = t.numel() / t.shape()[0];
            let mut shape = t.shape().to_vec();
            shape[0] = count;
            Tensor::new(&shape, t.data()[start * per..(start + count) * per].to_vec()).expect("slice within bounds")
        };
        Prediction {
            coords: cut(&self.coords),
            confidence: cut(&self.confidence),
            pose: self.pose[start..start + count].to_vec(),
        }
    }
}

/// Frames of several samples stacked into `[B·V, H, W, 3]`.
pub fn batch_frames(samples: &[&Sample]) -> Result<Tensor> {
    let seqs: Vec<&Tensor> = samples.iter().map(|s| &s.views.frames).collect();
    super::autoencoder::stack_frames(&seqs)
}

/// Mean absolute error over the entries where `mask` is 1, each entry of
/// `mask` covering `per` consecutive values.
pub fn masked_l1<'t>(pred: &Var<'t>, target: &Tensor, mask: &[bool], per: usize) -> Result<Var<'t>> {
    if pred.shape() != target.shape() || mask.len() * per != pred.numel() {
        return Err(Error::shape("masked_l1", pred.shape(), target.shape()));
    }
    let tape = pred.tape();
    let count = mask.iter().filter(|&&m| m).count();
    let m = Tensor::new(
        pred.shape(),
        mask.iter()
            .flat_map(|&v| std::iter::repeat_n(v as u8 as f64, per))
            .collect(),
    )?;
    let mv = tape.constant(m);
    let diff = pred.sub(&tape.constant(target.clone()))?.mul(&mv)?;
    Ok(diff.abs().sum().scale(1.0 / (count.max(1) * per) as f64))
}

/// Supervised loss of `out` against ground-truth samples.
pub fn supervised_loss<'t>(out: &F3dOutput<'t>, samples: &[&Sample], w: LossWeights) -> Result<Var<'t>> {
    let tape = out.coords.tape();
    let mut coords = Vec::new();
    let mut valid = Vec::new();
    let mut conf = Vec::new();
    let mut pose = Vec::new();
    for s in samples {
        coords.extend_from_slice(s.pointmap.coords.data());
        valid.extend_from_slice(&s.pointmap.valid);
        conf.extend_from_slice(s.pointmap.confidence.data());
        for p in &s.views.poses {
            pose.extend(PoseParams::target(p));
        }
    }
    let pm = masked_l1(&out.coords, &Tensor::new(out.coords.shape(), coords)?, &valid, 3)?;
    let cf = out
        .confidence
        .l1(&tape.constant(Tensor::new(out.confidence.shape(), conf)?))?;
    let ps = out.pose.l1(&tape.constant(Tensor::new(out.pose.shape(), pose)?))?;
    pm.scale(w.pointmap)
        .add(&cf.scale(w.confidence))?
        .add(&ps.scale(w.pose))
}

/// Trains on `samples`, continuing from the optimizer's step counter.
/// Returns per-epoch mean losses.
pub fn fit_feedforward3d(
    f: &mut Feedforward3D,
    opt: &mut AdamW,
    samples: &[Sample],
    epochs: usize,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("3D network needs training scenes".into()));
    }
    let cfg = f.config.clone();
    let views = samples[0].views.views();
    let per_epoch = samples.len().div_ceil(cfg.batch_scenes.max(1)) as u64;
    let start_epoch = (opt.state.step / per_epoch) as usize;
    let total = per_epoch * (start_epoch + epochs) as u64;
    let mut curve = Vec::with_capacity(epochs);
    for epoch in start_epoch..start_epoch + epochs {
        let mut r = rng::child(cfg.seed, 0x2000 + epoch as u64);
        let batches = epoch_batches(samples.len(), cfg.batch_scenes, &mut r);
        let mut acc = 0.0;
        for b in &batches {
            let batch: Vec<&Sample> = b.iter().map(|&i| &samples[i]).collect();
            let tape = Tape::new();
            let p = f.store.bind(&tape);
            let out = f.forward(&p, &tape.constant(batch_frames(&batch)?), views)?;
            let loss = supervised_loss(&out, &batch, cfg.weights)?;
            check_loss("3D network", opt.state.step as usize, loss.item())?;
            acc += loss.item();
            let grads = p.grads(&tape.backward(&loss)?);
            opt.set_lr(cosine_lr(cfg.lr, opt.state.step, total, per_epoch * 2));
            opt.step(&mut f.store, &grads)?;
        }
        curve.push(acc / batches.len() as f64);
    }
    Ok(curve)
}

pub fn train_feedforward3d(samples: &[Sample], config: F3dConfig) -> Result<(Feedforward3D, Vec<f64>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("3D network needs training scenes".into()))?;
    let mut f = Feedforward3D::new(config.clone(), first.views.height(), first.views.width())?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        ..AdamWConfig::default()
    });
    let curve = fit_feedforward3d(&mut f, &mut opt, samples, config.epochs)?;
    Ok((f, curve))
}

/// Mean Euclidean distance between predicted and true coordinates over
/// valid pixels.
pub fn pointmap_error(pred: &Tensor, sample_coords: &Tensor, valid: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (px, &v) in valid.iter().enumerate() {
        if v {
            let a = &pred.data()[px * 3..px * 3 + 3];
            let b = &sample_coords.data()[px * 3..px * 3 + 3];
            sum += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

use serde::{Deserialize, Serialize};

use super::{check_loss, epoch_batches, patch_index, unpatch_index, Linear};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{cosine_lr, AdamW, AdamWConfig, Bound, ParamStore, Tape, Tensor, Var};

/// Spatial downsampling factor between frames and latents.
pub const AE_PATCH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeConfig {
    /// Latent channels `c_l`.
    pub latent_channels: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_frames: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            latent_channels: 8,
            hidden: 96,
            epochs: 60,
            batch_frames: 32,
            lr: 3e-3,
            seed: 1,
        }
    }
}

/// Per-channel mean and standard deviation of encoder latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    /// Statistics over latents shaped `[.., c, h, w]`.
    pub fn fit(latents: &[Tensor]) -> Result<LatentStats> {
        let first = latents
            .first()
            .ok_or_else(|| Error::InvalidArgument("no latents to standardize".into()))?;
        let r = first.rank();
        let (c, hw) = (first.shape()[r - 3], first.shape()[r - 2] * first.shape()[r - 1]);
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0usize;
        for z in latents {
            for (i, chunk) in z.data().chunks(hw).enumerate() {
                let ch = i % c;
                sum[ch] += chunk.iter().sum::<f64>();
                sq[ch] += chunk.iter().map(|x| x * x).sum::<f64>();
            }
            count += z.numel() / c;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / count as f64 - m * m).max(1e-12).sqrt())
            .collect();
        Ok(LatentStats { mean, std })
    }

    fn channel_map(&self, z: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let r = z.rank();
        let hw = z.shape()[r - 2] * z.shape()[r - 1];
        let c = self.mean.len();
        let mut out = z.clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let ch = i % c;
            chunk.iter_mut().for_each(|x| *x = f(*x, self.mean[ch], self.std[ch]));
        }
        out
    }

    pub fn standardize(&self, z: &Tensor) -> Tensor {
        self.channel_map(z, |x, m, s| (x - m) / s)
    }

    pub fn destandardize(&self, z: &Tensor) -> Tensor {
        self.channel_map(z, |x, m, s| x * s + m)
    }

    /// Differentiable inverse of [`LatentStats::standardize`].
    pub fn destandardize_var<'t>(&self, z: &Var<'t>) -> Result<Var<'t>> {
        let tape = z.tape();
        let ones = Tensor::ones(z.shape());
        let scale = tape.constant(self.channel_map(&ones, |_, _, s| s));
        let shift = tape.constant(self.channel_map(&Tensor::zeros(z.shape()), |_, m, _| m));
        z.mul(&scale)?.add(&shift)
    }
}

/// Per-frame autoencoder. The encoder maps each 4×4 patch through a small
/// MLP to `c_l` channels, so a `H×W` frame becomes a `c_l×H/4×W/4` latent;
/// the decoder mirrors it with a sigmoid output.
#[derive(Clone, Debug)]
pub struct VideoAE {
    pub config: AeConfig,
    pub store: ParamStore,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
}

impl VideoAE {
    pub fn new(config: AeConfig) -> VideoAE {
        let mut r = rng::child(config.seed, 0xae);
        let mut store = ParamStore::new();
        let pd = AE_PATCH * AE_PATCH * 3;
        let (h, c) = (config.hidden, config.latent_channels);
        let enc1 = Linear::new(&mut store, "ae/enc1", pd, h, 1.0, &mut r);
        let enc2 = Linear::new(&mut store, "ae/enc2", h, c, 1.0, &mut r);
        let dec1 = Linear::new(&mut store, "ae/dec1", c, h, 1.0, &mut r);
        let dec2 = Linear::new(&mut store, "ae/dec2", h, pd, 1.0, &mut r);
        VideoAE {
            config,
            store,
            enc1,
            enc2,
            dec1,
            dec2,
        }
    }

    pub fn from_table(config: AeConfig, table: &[(String, Tensor)]) -> Result<VideoAE> {
        let mut ae = VideoAE::new(config);
        ae.store.load_from(table)?;
        Ok(ae)
    }

    fn check_frames(shape: &[usize]) -> Result<(usize, usize, usize)> {
        if shape.len() != 4 || shape[3] != 3 || !shape[1].is_multiple_of(AE_PATCH) || !shape[2].is_multiple_of(AE_PATCH)
        {
            return Err(Error::InvalidArgument(format!(
                "frames must be [n, H, W, 3] with H, W divisible by {AE_PATCH}, got {shape:?}"
            )));
        }
        Ok((shape[0], shape[1], shape[2]))
    }

    /// `[n, H, W, 3]` frames to `[n, c_l, H/4, W/4]` latents.
    pub fn encode<'t>(&self, p: &Bound<'t>, frames: &Var<'t>) -> Result<Var<'t>> {
        let (n, h, w) = Self::check_frames(frames.shape())?;
        let (gh, gw) = (h / AE_PATCH, w / AE_PATCH);
        let rows = frames
            .gather(
                patch_index(n, h, w, AE_PATCH, 3),
                &[n * gh * gw, AE_PATCH * AE_PATCH * 3],
            )?
            .scale(2.0)
            .add_scalar(-1.0);
        let z = self.enc2.forward(p, &self.enc1.forward(p, &rows)?.gelu())?;
        z.reshape(&[n, gh, gw, self.config.latent_channels])?
            .permute(&[0, 3, 1, 2])
    }

    /// `[n, c_l, h, w]` latents to `[n, 4h, 4w, 3]` frames in `(0, 1)`.
    pub fn decode<'t>(&self, p: &Bound<'t>, z: &Var<'t>) -> Result<Var<'t>> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.config.latent_channels {
            return Err(Error::shape("decode", s, &[0, self.config.latent_channels, 0, 0]));
        }
        let (n, gh, gw) = (s[0], s[2], s[3]);
        let rows = z.permute(&[0, 2, 3, 1])?.reshape(&[n * gh * gw, s[1]])?;
        let out = self.dec2.forward(p, &self.dec1.forward(p, &rows)?.gelu())?.sigmoid();
        let (h, w) = (gh * AE_PATCH, gw * AE_PATCH);
        out.gather(unpatch_index(n, h, w, AE_PATCH, 3), &[n, h, w, 3])
    }

    /// Untracked encode of plain frames.
    pub fn encode_tensor(&self, frames: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        Ok(self.encode(&p, &tape.constant(frames.clone()))?.value().clone())
    }

    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        Ok(self.decode(&p, &tape.constant(z.clone()))?.value().clone())
    }

    /// Mean squared reconstruction error over a stack of frames.
    pub fn reconstruction_mse(&self, frames: &Tensor) -> Result<f64> {
        let rec = self.decode_tensor(&self.encode_tensor(frames)?)?;
        let n = rec.numel() as f64;
        Ok(rec
            .data()
            .iter()
            .zip(frames.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }
}

/// Stacks the listed frames of `[V, H, W, 3]` sequences into `[n, H, W, 3]`.
pub fn stack_frames(seqs: &[&Tensor]) -> Result<Tensor> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no frames to stack".into()))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let mut data = Vec::new();
    let mut n = 0;
    for s in seqs {
        if s.shape()[1..] != [h, w, 3] {
            return Err(Error::shape("stack_frames", first.shape(), s.shape()));
        }
        n += s.shape()[0];
        data.extend_from_slice(s.data());
    }
    Tensor::new(&[n, h, w, 3], data)
}

fn select_frames(frames: &Tensor, idx: &[usize]) -> Tensor {
    let per = frames.numel() / frames.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&frames.data()[i * per..(i + 1) * per]);
    }
    let mut shape = frames.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data).expect("selected frame count")
}

/// Minimizes mean squared reconstruction error on `frames: [n, H, W, 3]`,
/// continuing from the optimizer's step counter. Returns per-epoch mean
/// losses.
pub fn fit_autoencoder(ae: &mut VideoAE, opt: &mut AdamW, frames: &Tensor, epochs: usize) -> Result<Vec<f64>> {
    let n = frames.shape()[0];
    if n == 0 {
        return Err(Error::InvalidArgument("autoencoder needs at least one frame".into()));
    }
    let cfg = ae.config.clone();
    let per_epoch = n.div_ceil(cfg.batch_frames.max(1)) as u64;
    let start_epoch = (opt.state.step / per_epoch.max(1)) as usize;
    let total = per_epoch * (start_epoch + epochs) as u64;
    let mut curve = Vec::with_capacity(epochs);
    for epoch in start_epoch..start_epoch + epochs {
        let mut r = rng::child(cfg.seed, 0x1000 + epoch as u64);
        let mut acc = 0.0;
        let batches = epoch_batches(n, cfg.batch_frames, &mut r);
        for b in &batches {
            let x = select_frames(frames, b);
            let tape = Tape::new();
            let p = ae.store.bind(&tape);
            let xv = tape.constant(x);
            let rec = ae.decode(&p, &ae.encode(&p, &xv)?)?;
            let loss = rec.l2(&xv)?;
            check_loss("autoencoder", opt.state.step as usize, loss.item())
                .map_err(|e| Error::NonFinite(format!("{e} (epoch {epoch})")))?;
            acc += loss.item();
            let gs = p.grads(&tape.backward(&loss)?);
            opt.set_lr(cosine_lr(cfg.lr, opt.state.step, total, per_epoch));
            opt.step(&mut ae.store, &gs)?;
        }
        curve.push(acc / batches.len() as f64);
    }
    Ok(curve)
}

pub fn train_autoencoder(frames: &Tensor, config: AeConfig) -> Result<(VideoAE, Vec<f64>)> {
    let mut ae = VideoAE::new(config.clone());
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        ..AdamWConfig::default()
    });
    let curve = fit_autoencoder(&mut ae, &mut opt, frames, config.epochs)?;
    Ok((ae, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::generate_dataset;

    fn small() -> AeConfig {
        AeConfig {
            hidden: 32,
            epochs: 3,
            batch_frames: 8,
            ..AeConfig::default()
        }
    }

    fn frames() -> Tensor {
        let ds = generate_dataset(4, 4, 2, 16, 16, 3).unwrap();
        let seqs: Vec<&Tensor> = ds.samples.iter().map(|s| &s.views.frames).collect();
        stack_frames(&seqs).unwrap()
    }

    #[test]
    fn latent_shape_is_quarter_resolution() {
        let ae = VideoAE::new(small());
        let z = ae.encode_tensor(&frames()).unwrap();
        assert_eq!(z.shape(), &[8, 8, 4, 4]);
        assert_eq!(ae.decode_tensor(&z).unwrap().shape(), &[8, 16, 16, 3]);
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let cfg = AeConfig { epochs: 0, ..small() };
        let (ae, curve) = train_autoencoder(&frames(), cfg.clone()).unwrap();
        assert!(curve.is_empty());
        assert_eq!(ae.store.to_table(), VideoAE::new(cfg).store.to_table());
    }

    #[test]
    fn curve_is_finite_with_one_entry_per_epoch() {
        let (_, curve) = train_autoencoder(&frames(), small()).unwrap();
        assert_eq!(curve.len(), 3);
        assert!(curve.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn standardization_round_trips() {
        let ae = VideoAE::new(small());
        let z = ae.encode_tensor(&frames()).unwrap();
        let stats = LatentStats::fit(std::slice::from_ref(&z)).unwrap();
        let s = stats.standardize(&z);
        assert!(stats.destandardize(&s).max_abs_diff(&z) < 1e-12);
        let m: f64 = s.data().iter().sum::<f64>() / s.numel() as f64;
        assert!(m.abs() < 1e-9);
    }
}

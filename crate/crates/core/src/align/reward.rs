use std::rc::Rc;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Critic, LatentStats, VideoAE};
use crate::rng;
use crate::stitch::StitchedModel;
use crate::tensor::{ResampleMode, Tape, Tensor, Var};
use crate::world::{default_focal, environment, Pose, BACKGROUND};

/// Weight of the perceptual proxy inside the consistency reward.
pub const PERCEPTUAL_WEIGHT: f64 = 0.25;

/// Splats below this predicted confidence are not rendered.
pub const SPLAT_CONFIDENCE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub quality_mv: f64,
    pub quality_3d: f64,
    pub consistency: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            quality_mv: 1.0 / 16.0,
            quality_3d: 1.0 / 16.0,
            consistency: 0.05,
        }
    }
}

impl RewardWeights {
    pub fn is_zero(&self) -> bool {
        self.quality_mv == 0.0 && self.quality_3d == 0.0 && self.consistency == 0.0
    }

    pub fn combine(&self, q_mv: f64, q_3d: f64, cons: f64) -> f64 {
        self.quality_mv * q_mv + self.quality_3d * q_3d + self.consistency * cons
    }
}

/// Reward components of one generated sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub q_mv: f64,
    pub q_3d: f64,
    /// Never positive.
    pub cons: f64,
    pub total: f64,
    pub weights: RewardWeights,
    pub sampled_views: (usize, usize),
}

impl RewardBreakdown {
    pub fn new(q_mv: f64, q_3d: f64, cons: f64, weights: RewardWeights, sampled_views: (usize, usize)) -> Self {
        RewardBreakdown {
            q_mv,
            q_3d,
            cons,
            total: weights.combine(q_mv, q_3d, cons),
            weights,
            sampled_views,
        }
    }

    /// Re-derives `total` from the components.
    pub fn is_consistent(&self) -> bool {
        (self.total - self.weights.combine(self.q_mv, self.q_3d, self.cons)).abs() <= 1e-12
    }
}

/// Mean log-probability of `class` under the frozen critic.
pub fn reward_quality<'t>(critic: &Critic, images: &Var<'t>, class: usize) -> Result<Var<'t>> {
    let p = critic.store.bind_frozen(images.tape());
    critic.log_prob(&p, images, class)
}

/// Gather indices of `x[.., y, x + s, ..] ` and `x[.., y, x, ..]` along the
/// column (`axis = 2`) or row (`axis = 1`) axis of `[n, h, w, c]`.
fn shift_pairs(shape: &[usize], axis: usize, s: usize) -> (Rc<[usize]>, Rc<[usize]>, Vec<usize>) {
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = if axis == 1 { (h - s, w) } else { (h, w - s) };
    let mut hi = Vec::with_capacity(n * oh * ow * c);
    let mut lo = Vec::with_capacity(n * oh * ow * c);
    for i in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..c {
                    let base = ((i * h + y) * w + x) * c + ch;
                    let off = if axis == 1 { s * w * c } else { s * c };
                    lo.push(base);
                    hi.push(base + off);
                }
            }
        }
    }
    (hi.into(), lo.into(), vec![n, oh, ow, c])
}

fn finite_difference<'t>(x: &Var<'t>, axis: usize) -> Result<Var<'t>> {
    let (hi, lo, shape) = shift_pairs(x.shape(), axis, 1);
    x.gather(hi, &shape)?.sub(&x.gather(lo, &shape)?)
}

fn gradient_l1<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    let dx = finite_difference(a, 2)?.sub(&finite_difference(b, 2)?)?.abs().mean();
    let dy = finite_difference(a, 1)?.sub(&finite_difference(b, 1)?)?.abs().mean();
    Ok(dx.add(&dy)?.scale(0.5))
}

/// 2×2 average pooling of `[n, h, w, c]` images.
fn halve<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    x.permute(&[0, 3, 1, 2])?
        .resample(s[1] / 2, s[2] / 2, ResampleMode::Bilinear)?
        .permute(&[0, 2, 3, 1])
}

/// Structural image distance: mean L1 between finite-difference image
/// gradients of the full-resolution and 2×2-pooled images.
pub fn perceptual_proxy<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    let fine = gradient_l1(a, b)?;
    let s = a.shape();
    if s[1] < 4 || s[2] < 4 {
        return Ok(fine);
    }
    let coarse = gradient_l1(&halve(a)?, &halve(b)?)?;
    Ok(fine.add(&coarse)?.scale(0.5))
}

/// `−mean|a − b| − 0.25·proxy(a, b)` over `[n, h, w, 3]` images.
pub fn reward_consistency<'t>(decoded: &Var<'t>, rendered: &Var<'t>) -> Result<Var<'t>> {
    let s = decoded.shape();
    if s != rendered.shape() || s.len() != 4 || s[1] < 2 || s[2] < 2 {
        return Err(Error::shape("reward_consistency", s, rendered.shape()));
    }
    let pixel = decoded.sub(rendered)?.abs().mean();
    let structure = perceptual_proxy(decoded, rendered)?;
    Ok(pixel.add(&structure.scale(PERCEPTUAL_WEIGHT))?.neg())
}

/// Which source point each pixel of a `h×w` view of `pose` shows.
/// `None` where no point lands; nearest depth wins, earlier points win ties.
pub fn splat_owners(coords: &Tensor, mask: &[bool], pose: &Pose, h: usize, w: usize) -> Vec<Option<usize>> {
    let mut depth = vec![f64::INFINITY; h * w];
    let mut owner = vec![None; h * w];
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let p = [coords.data()[3 * i], coords.data()[3 * i + 1], coords.data()[3 * i + 2]];
        let Some((col, row, d)) = pose.project(p, h, w) else {
            continue;
        };
        if !(col >= 0.0 && row >= 0.0 && col < w as f64 && row < h as f64) {
            continue;
        }
        let px = row as usize * w + col as usize;
        if d < depth[px] {
            depth[px] = d;
            owner[px] = Some(i);
        }
    }
    owner
}

/// Renders points with per-point colors into `[h, w, 3]`: one pixel per
/// point, z-buffered, uncovered pixels showing the environment. Gradients
/// reach the colors only.
pub fn splat_render<'t>(colors: &Var<'t>, coords: &Tensor, mask: &[bool], pose: &Pose) -> Result<Var<'t>> {
    let s = colors.shape();
    if s.len() != 4 || s[3] != 3 || coords.shape() != s || mask.len() * 3 != colors.numel() {
        return Err(Error::shape("splat_render", s, coords.shape()));
    }
    let (h, w) = (s[1], s[2]);
    let points = mask.len();
    let owners = splat_owners(coords, mask, pose, h, w);
    let mut env = Vec::with_capacity(h * w * 3);
    for row in 0..h {
        for col in 0..w {
            let (_, d) = pose.ray(row, col, h, w);
            env.extend(environment(BACKGROUND, d));
        }
    }
    let tape = colors.tape();
    let src = Var::concat(
        &[
            &colors.reshape(&[points, 3])?,
            &tape.constant(Tensor::new(&[h * w, 3], env)?),
        ],
        0,
    )?;
    let idx: Rc<[usize]> = owners
        .iter()
        .enumerate()
        .flat_map(|(px, o)| {
            let row = o.unwrap_or(points + px);
            (0..3).map(move |c| row * 3 + c)
        })
        .collect();
    src.gather(idx, &[h, w, 3])
}

/// Everything the reward reads; all frozen.
#[derive(Clone, Copy)]
pub struct RewardModels<'a> {
    pub stitched: &'a StitchedModel,
    pub autoencoder: &'a VideoAE,
    pub stats: &'a LatentStats,
    pub critic: &'a Critic,
    /// `[V, c_l, h, w]` shape of one sample's latent.
    pub latent_shape: [usize; 4],
}

/// Two distinct views drawn from `seed`.
pub fn sample_views(views: usize, seed: u64) -> Result<(usize, usize)> {
    if views < 2 {
        return Err(Error::InvalidArgument(format!(
            "reward needs two views, sequence has {views}"
        )));
    }
    let mut r = rng::child(seed, 0x71e5);
    let picked = sample_indices(&mut r, views, 2);
    Ok((picked.index(0), picked.index(1)))
}

fn finite_or<'t>(v: Var<'t>, what: &str) -> Result<Var<'t>> {
    if v.item().is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("reward component {what} is {}", v.item())))
    }
}

/// Reward of one standardized latent `z0: [1, dim]`, differentiable w.r.t.
/// `z0` through the decoder. Returns the weighted total and its parts.
pub fn total_reward<'t>(
    z0: &Var<'t>,
    class: usize,
    models: RewardModels<'_>,
    weights: RewardWeights,
    seed: u64,
) -> Result<(Var<'t>, RewardBreakdown)> {
    let tape = z0.tape();
    let [v, c, gh, gw] = models.latent_shape;
    if z0.numel() != v * c * gh * gw {
        return Err(Error::shape("total_reward", z0.shape(), &[1, v * c * gh * gw]));
    }
    let (a, b) = sample_views(v, seed)?;
    let latent = models.stats.destandardize_var(&z0.reshape(&[v, c, gh, gw])?)?;
    let pd = models.autoencoder.store.bind_frozen(tape);
    let frames = models.autoencoder.decode(&pd, &latent)?;
    let (h, w) = (frames.shape()[1], frames.shape()[2]);
    let pred = models.stitched.predict_latent(latent.value(), v)?;
    let mask: Vec<bool> = pred.confidence.data().iter().map(|&x| x > SPLAT_CONFIDENCE).collect();
    let focal = default_focal(w);
    let pick = |i: usize| -> Result<Var<'t>> {
        let per = h * w * 3;
        let idx: Rc<[usize]> = (i * per..(i + 1) * per).collect();
        frames.gather(idx, &[1, h, w, 3])
    };
    let decoded = Var::concat(&[&pick(a)?, &pick(b)?], 0)?;
    let render = |i: usize| -> Result<Var<'t>> {
        let pose = pred.pose[i].to_pose(focal);
        splat_render(&frames, &pred.coords, &mask, &pose)?.reshape(&[1, h, w, 3])
    };
    let rendered = Var::concat(&[&render(a)?, &render(b)?], 0)?;
    let q_mv = finite_or(reward_quality(models.critic, &decoded, class)?, "q_mv")?;
    let q_3d = finite_or(reward_quality(models.critic, &rendered, class)?, "q_3d")?;
    let cons = finite_or(reward_consistency(&decoded, &rendered)?, "cons")?;
    let breakdown = RewardBreakdown::new(q_mv.item(), q_3d.item(), cons.item(), weights, (a, b));
    let total = q_mv
        .scale(weights.quality_mv)
        .add(&q_3d.scale(weights.quality_3d))?
        .add(&cons.scale(weights.consistency))?;
    Ok((total, breakdown))
}

/// Untracked variant of [`total_reward`] on a plain latent.
pub fn evaluate_reward(
    z0: &Tensor,
    class: usize,
    models: RewardModels<'_>,
    weights: RewardWeights,
    seed: u64,
) -> Result<RewardBreakdown> {
    let tape = Tape::new();
    let _guard = tape.no_grad();
    Ok(total_reward(&tape.constant(z0.clone()), class, models, weights, seed)?.1)
}

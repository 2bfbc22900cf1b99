//! Direct reward finetuning of the flow generator.
//!
//! A rollout integrates the generator from noise with a random number of
//! uniform Euler steps. Every model evaluation sees a detached copy of the
//! state, and only `K` randomly chosen evaluations are recorded on the
//! tape, so the final latent depends on the parameters through exactly
//! those steps and on the initial noise through the identity.

mod reward;

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use reward::{
    evaluate_reward, perceptual_proxy, reward_consistency, reward_quality, sample_views, splat_owners, splat_render,
    total_reward, RewardBreakdown, RewardModels, RewardWeights, PERCEPTUAL_WEIGHT, SPLAT_CONFIDENCE,
};

use crate::error::{Error, Result};
use crate::nets::flow::{flow_loss, standard_normal};
use crate::nets::FlowGenerator;
use crate::rng;
use crate::tensor::{AdamW, AdamWConfig, Bound, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    /// Fewest denoising steps.
    pub t1: usize,
    /// Most denoising steps.
    pub t2: usize,
    /// Gradient-enabled steps per rollout.
    pub k: usize,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            t1: 10,
            t2: 50,
            k: 2,
            seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t1 == 0 || self.t1 > self.t2 {
            return Err(Error::Config(format!(
                "rollout step range needs 1 <= T1 <= T2, got T1={} T2={}",
                self.t1, self.t2
            )));
        }
        if self.k > self.t1 {
            return Err(Error::Config(format!(
                "K={} gradient steps exceed the shortest rollout T1={}",
                self.k, self.t1
            )));
        }
        Ok(())
    }
}

/// One simulated trajectory.
#[derive(Clone, Debug)]
pub struct RolloutTrace<'t> {
    pub t: usize,
    /// `τ_0 = 1 > ··· > τ_t = 0`.
    pub schedule: Vec<f64>,
    /// Sorted 1-based indices of the recorded steps.
    pub t_train: Vec<usize>,
    pub z0: Var<'t>,
}

pub fn uniform_schedule(t: usize) -> Vec<f64> {
    (0..=t)
        .map(|j| if j == t { 0.0 } else { 1.0 - j as f64 / t as f64 })
        .collect()
}

/// Integrates from `z1: [B, dim]` over `t` steps, recording the model
/// evaluation of step `j` (moving `τ_{j−1}` to `τ_j`) only for `j ∈ t_train`.
pub fn rollout_steps<'t>(
    gen: &FlowGenerator,
    p: &Bound<'t>,
    z1: &Var<'t>,
    classes: &[usize],
    t: usize,
    t_train: &[usize],
) -> Result<RolloutTrace<'t>> {
    if t == 0 {
        return Err(Error::InvalidArgument("a rollout needs at least one step".into()));
    }
    if t_train.len() > t {
        return Err(Error::InvalidArgument(format!(
            "{} gradient steps requested in a {t}-step rollout",
            t_train.len()
        )));
    }
    if let Some(&j) = t_train.iter().find(|&&j| j == 0 || j > t) {
        return Err(Error::InvalidArgument(format!("gradient step {j} outside 1..={t}")));
    }
    let tape = z1.tape();
    let schedule = uniform_schedule(t);
    let b = z1.shape()[0];
    let mut z = z1.clone();
    for j in 1..=t {
        let tau = schedule[j - 1];
        let dt = tau - schedule[j];
        let input = z.stop_grad();
        let v = if t_train.contains(&j) {
            gen.velocity(p, &input, &vec![tau; b], classes)?
        } else {
            let _guard = tape.no_grad();
            gen.velocity(p, &input, &vec![tau; b], classes)?.stop_grad()
        };
        z = z.sub(&v.scale(dt))?;
    }
    let mut t_train = t_train.to_vec();
    t_train.sort_unstable();
    Ok(RolloutTrace {
        t,
        schedule,
        t_train,
        z0: z,
    })
}

/// Draws `t ~ U{T1..T2}` and `K` distinct recorded steps from `cfg.seed`,
/// then runs [`rollout_steps`].
pub fn rollout<'t>(
    gen: &FlowGenerator,
    p: &Bound<'t>,
    z1: &Var<'t>,
    classes: &[usize],
    cfg: &RolloutConfig,
) -> Result<RolloutTrace<'t>> {
    cfg.validate()?;
    let mut r = rng::child(cfg.seed, 0x7011);
    let t = r.random_range(cfg.t1..=cfg.t2);
    let t_train: Vec<usize> = sample_indices(&mut r, t, cfg.k).iter().map(|i| i + 1).collect();
    rollout_steps(gen, p, z1, classes, t, &t_train)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub t1: usize,
    pub t2: usize,
    pub k: usize,
    pub steps: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
    /// Data latents per flow-matching term.
    pub gen_batch: usize,
    pub weights: RewardWeights,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            t1: 10,
            t2: 50,
            k: 2,
            steps: 1000,
            lr: 1e-4,
            clip_norm: 0.1,
            adapter_rank: 8,
            adapter_alpha: 16.0,
            gen_batch: 16,
            weights: RewardWeights::default(),
            seed: 21,
        }
    }
}

impl AlignConfig {
    pub fn rollout(&self, seed: u64) -> RolloutConfig {
        RolloutConfig {
            t1: self.t1,
            t2: self.t2,
            k: self.k,
            seed,
        }
    }
}

/// One logged update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub t: usize,
    pub t_train: Vec<usize>,
    pub class: usize,
    pub l_gen: f64,
    pub reward: RewardBreakdown,
    pub l_total: f64,
    pub grad_norm: f64,
}

/// Training latents for the flow-matching term: `[n, dim]` standardized
/// latents with their classes.
#[derive(Clone, Copy, Debug)]
pub struct LatentData<'a> {
    pub latents: &'a Tensor,
    pub classes: &'a [usize],
}

fn gen_batch(data: LatentData<'_>, batch: usize, seed: u64) -> Result<(Tensor, Vec<usize>, Tensor, Vec<f64>)> {
    let (n, dim) = (data.latents.shape()[0], data.latents.shape()[1]);
    let mut r = rng::child(seed, 0x9e4);
    let idx: Vec<usize> = (0..batch).map(|_| r.random_range(0..n)).collect();
    let mut rows = Vec::with_capacity(batch * dim);
    for &i in &idx {
        rows.extend_from_slice(data.latents.row(i));
    }
    let classes = idx.iter().map(|&i| data.classes[i]).collect();
    let noise = standard_normal(batch * dim, rng::mix(seed, 0x9e5));
    let t = (0..batch).map(|_| r.random::<f64>()).collect();
    Ok((
        Tensor::new(&[batch, dim], rows)?,
        classes,
        Tensor::new(&[batch, dim], noise)?,
        t,
    ))
}

/// Reward prompt of update `step`: a class and the rollout's noise seed.
pub fn training_prompt(seed: u64, step: usize, num_classes: usize) -> (usize, u64) {
    (step % num_classes, rng::mix(seed, 0x5_0000 + step as u64))
}

/// One update of `L_total = L_gen − reward` on the generator's trainable
/// parameters.
pub fn align_step(
    gen: &mut FlowGenerator,
    opt: &mut AdamW,
    data: LatentData<'_>,
    models: RewardModels<'_>,
    cfg: &AlignConfig,
    step: usize,
) -> Result<StepLog> {
    let (class, prompt_seed) = training_prompt(cfg.seed, step, gen.num_classes);
    let tape = Tape::new();
    let p = gen.store.bind(&tape);
    let (z_data, classes, noise, t) = gen_batch(data, cfg.gen_batch, rng::mix(cfg.seed, step as u64))?;
    let l_gen = flow_loss(gen, &p, &z_data, &classes, &noise, &t)?;
    let z1 = tape.constant(Tensor::new(&[1, gen.dim], standard_normal(gen.dim, prompt_seed))?);
    let trace = rollout(gen, &p, &z1, &[class], &cfg.rollout(rng::mix(prompt_seed, 1)))?;
    let (reward, breakdown) = if cfg.weights.is_zero() {
        let zero = RewardBreakdown::new(0.0, 0.0, 0.0, cfg.weights, (0, 0));
        (tape.constant(Tensor::scalar(0.0)), zero)
    } else {
        total_reward(&trace.z0, class, models, cfg.weights, rng::mix(prompt_seed, 2))?
    };
    let l_total = l_gen.sub(&reward)?;
    if !l_total.item().is_finite() {
        return Err(Error::NonFinite(format!(
            "alignment loss at step {step}: L_gen={} q_mv={} q_3d={} cons={}",
            l_gen.item(),
            breakdown.q_mv,
            breakdown.q_3d,
            breakdown.cons
        )));
    }
    let grads = p.grads(&tape.backward(&l_total)?);
    let report = opt.step(&mut gen.store, &grads)?;
    Ok(StepLog {
        step,
        t: trace.t,
        t_train: trace.t_train,
        class,
        l_gen: l_gen.item(),
        reward: breakdown,
        l_total: l_total.item(),
        grad_norm: report.grad_norm,
    })
}

pub fn align_optimizer(cfg: &AlignConfig) -> AdamW {
    AdamW::new(AdamWConfig {
        lr: cfg.lr,
        clip_norm: Some(cfg.clip_norm),
        ..AdamWConfig::default()
    })
}

/// Attaches the generator adapters (unless present) and runs `cfg.steps`
/// updates, continuing from the optimizer's step counter.
pub fn align(
    gen: &mut FlowGenerator,
    opt: &mut AdamW,
    data: LatentData<'_>,
    models: RewardModels<'_>,
    cfg: &AlignConfig,
) -> Result<Vec<StepLog>> {
    cfg.rollout(cfg.seed).validate()?;
    if data.latents.shape()[0] == 0 || data.classes.len() != data.latents.shape()[0] {
        return Err(Error::InvalidArgument("alignment needs labeled data latents".into()));
    }
    if !gen.has_adapters() {
        gen.attach_adapters(cfg.adapter_rank, cfg.adapter_alpha, cfg.seed)?;
    }
    let start = opt.state.step as usize;
    (start..start + cfg.steps)
        .map(|s| align_step(gen, opt, data, models, cfg, s))
        .collect()
}

/// Held-out prompt `i`: class `i mod C` and a noise seed outside the
/// training stream.
pub fn heldout_prompt(seed: u64, i: usize, num_classes: usize) -> (usize, u64) {
    (i % num_classes, rng::mix(seed, 0xe_0000 + i as u64))
}

/// Rewards of fully untracked rollouts for `n` held-out prompts.
pub fn evaluate_prompts(
    gen: &FlowGenerator,
    models: RewardModels<'_>,
    cfg: &AlignConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<RewardBreakdown>> {
    (0..n)
        .map(|i| {
            let (class, s) = heldout_prompt(seed, i, gen.num_classes);
            let tape = Tape::new();
            let _guard = tape.no_grad();
            let p = gen.store.bind_frozen(&tape);
            let z1 = tape.constant(Tensor::new(&[1, gen.dim], standard_normal(gen.dim, s))?);
            let rc = RolloutConfig {
                k: 0,
                ..cfg.rollout(rng::mix(s, 1))
            };
            let trace = rollout(gen, &p, &z1, &[class], &rc)?;
            let weights = if cfg.weights.is_zero() {
                RewardWeights::default()
            } else {
                cfg.weights
            };
            evaluate_reward(trace.z0.value(), class, models, weights, rng::mix(s, 2))
        })
        .collect()
}

/// Per-step log with columns
/// `step,t,t_train,L_gen,q_mv,q_3d,cons,total,L_total,grad_norm`.
pub fn write_align_csv(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut out = String::from("step,t,t_train,L_gen,q_mv,q_3d,cons,total,L_total,grad_norm\n");
    for l in logs {
        let tt: Vec<String> = l.t_train.iter().map(usize::to_string).collect();
        out.push_str(&format!(
            "{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            l.step,
            l.t,
            tt.join(";"),
            l.l_gen,
            l.reward.q_mv,
            l.reward.q_3d,
            l.reward.cons,
            l.reward.total,
            l.l_total,
            l.grad_norm
        ));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parses a log written by [`write_align_csv`] back into
/// `(q_mv, q_3d, cons, total)` rows.
pub fn read_align_csv(path: &Path) -> Result<Vec<[f64; 4]>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |k: usize| -> Result<f64> {
            f.get(k).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format {
                offset: i,
                msg: format!("alignment log line {i} column {k}"),
            })
        };
        rows.push([parse(4)?, parse(5)?, parse(6)?, parse(7)?]);
    }
    Ok(rows)
}

//! Stage runners behind the command-line subcommands. Each stage reads its
//! prerequisites from the work directory, writes checkpoints under
//! `ckpt/`, reports under `reports/`, and returns human-readable summary
//! lines. Every artifact is a pure function of the configuration.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::align::{self, AlignConfig, LatentData, RewardBreakdown, RewardModels, StepLog};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{self, PointmapMetrics};
use crate::nets::autoencoder::{fit_autoencoder, stack_frames};
use crate::nets::feedforward::fit_feedforward3d;
use crate::nets::flow::fit_generator;
use crate::nets::{
    train_critic, AeConfig, Critic, CriticConfig, F3dConfig, Feedforward3D, FlowConfig, FlowGenerator, LatentStats,
    VideoAE,
};
use crate::rng;
use crate::stitch::{self, AdapterConfig, StitchedModel};
use crate::tensor::{checkpoint, AdamW, AdamWConfig, Tensor};
use crate::world::{emit_dataset, generate_dataset, load_dataset, Dataset};

/// Version of every model sidecar written here.
pub const SIDECAR_VERSION: u32 = 1;

/// Stream separating the held-out scenes from the training scenes.
const HELDOUT_STREAM: u64 = 0x4e1d;

/// Lines a stage reports on completion.
pub type Summary = Vec<String>;

/// Artifact layout of a work directory.
#[derive(Clone, Debug)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Workdir {
        Workdir { root: root.into() }
    }

    pub fn dataset(&self, split: &str) -> PathBuf {
        self.root.join("dataset").join(format!("{split}.stch"))
    }

    pub fn ckpt(&self, name: &str) -> PathBuf {
        self.root.join("ckpt").join(format!("{name}.stch"))
    }

    pub fn report(&self, file: &str) -> PathBuf {
        self.root.join("reports").join(file)
    }
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite {
            path: path.to_path_buf(),
            producer: producer.to_string(),
        })
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `table` and a JSON sidecar next to it.
fn save_model<S: Serialize>(path: &Path, table: &[(String, Tensor)], sidecar: &S) -> Result<()> {
    ensure_parent(path)?;
    checkpoint::save(path, table)?;
    let json = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    write_text(&path.with_extension("json"), &(json + "\n"))
}

fn load_model<S: DeserializeOwned + Versioned>(path: &Path, producer: &str) -> Result<(Vec<(String, Tensor)>, S)> {
    require(path, producer)?;
    let side = path.with_extension("json");
    require(&side, producer)?;
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: S = serde_json::from_str(&text).map_err(|e| Error::Format {
        offset: e.column(),
        msg: format!("sidecar {}: {e}", side.display()),
    })?;
    if meta.version() != SIDECAR_VERSION {
        return Err(Error::Version {
            found: meta.version() as u16,
            expected: SIDECAR_VERSION as u16,
        });
    }
    Ok((checkpoint::load(path)?, meta))
}

trait Versioned {
    fn version(&self) -> u32;
}

macro_rules! versioned {
    ($($t:ty),*) => {$(impl Versioned for $t { fn version(&self) -> u32 { self.version } })*};
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeSidecar {
    pub version: u32,
    pub config: AeConfig,
    pub stats: LatentStats,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct F3dSidecar {
    pub version: u32,
    pub config: F3dConfig,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticSidecar {
    pub version: u32,
    pub config: CriticConfig,
    pub image_len: usize,
    pub num_classes: usize,
    pub heldout_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSidecar {
    pub version: u32,
    pub config: FlowConfig,
    pub dim: usize,
    pub num_classes: usize,
    /// `[V, c_l, h, w]` of one flattened sample.
    pub latent_shape: [usize; 4],
    /// Adapter rank, scale numerator and seed, present after alignment.
    pub adapter: Option<(usize, f64, u64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StitchFitSidecar {
    pub version: u32,
    pub per_layer_mse: BTreeMap<usize, f64>,
    pub k_star: usize,
    pub ridge: f64,
    pub d_f: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StitchedSidecar {
    pub version: u32,
    pub k: usize,
    pub adapter: AdapterConfig,
    pub seed: u64,
}

versioned!(
    AeSidecar,
    F3dSidecar,
    CriticSidecar,
    GeneratorSidecar,
    StitchFitSidecar,
    StitchedSidecar
);

/// Appends `(index, value)` rows under `header`, numbering after any rows
/// already present when resuming.
fn write_curve(path: &Path, header: &str, curve: &[f64], resume: bool) -> Result<()> {
    let existing = if resume {
        std::fs::read_to_string(path).ok()
    } else {
        None
    };
    let mut text = existing.unwrap_or_else(|| format!("{header},loss\n"));
    let start = text.lines().count().saturating_sub(1);
    for (i, v) in curve.iter().enumerate() {
        text.push_str(&format!("{},{v:e}\n", start + i));
    }
    write_text(path, &text)
}

fn optimizer(lr: f64) -> AdamW {
    AdamW::new(AdamWConfig {
        lr,
        ..AdamWConfig::default()
    })
}

fn with_state(
    mut table: Vec<(String, Tensor)>,
    opt: &AdamW,
    store: &crate::tensor::ParamStore,
) -> Vec<(String, Tensor)> {
    table.extend(opt.state_table(store));
    table
}

// ---------------------------------------------------------------- data

pub fn gen_data(cfg: &RunConfig) -> Result<Summary> {
    let w = &cfg.world;
    let wd = Workdir::new(&cfg.paths.workdir);
    let train = generate_dataset(w.n_scenes, w.classes, w.views, w.height, w.width, w.seed)?;
    let held = generate_dataset(
        w.heldout_scenes,
        w.classes,
        w.views,
        w.height,
        w.width,
        rng::mix(w.seed, HELDOUT_STREAM),
    )?;
    for (split, ds) in [("train", &train), ("heldout", &held)] {
        let path = wd.dataset(split);
        ensure_parent(&path)?;
        emit_dataset(&path, ds)?;
    }
    Ok(vec![format!(
        "wrote {} training and {} held-out scenes ({} views of {}x{}) to {}",
        train.len(),
        held.len(),
        w.views,
        w.height,
        w.width,
        wd.root.join("dataset").display()
    )])
}

pub fn load_split(cfg: &RunConfig, split: &str) -> Result<Dataset> {
    let path = Workdir::new(&cfg.paths.workdir).dataset(split);
    require(&path, "gen-data")?;
    let ds = load_dataset(&path)?;
    let w = &cfg.world;
    if (ds.meta.num_classes, ds.meta.views, ds.meta.height, ds.meta.width) != (w.classes, w.views, w.height, w.width) {
        return Err(Error::Config(format!(
            "{} was generated for C={} V={} {}x{}, config asks for C={} V={} {}x{}; rerun gen-data",
            path.display(),
            ds.meta.num_classes,
            ds.meta.views,
            ds.meta.height,
            ds.meta.width,
            w.classes,
            w.views,
            w.height,
            w.width
        )));
    }
    Ok(ds)
}

fn all_frames(ds: &Dataset) -> Result<Tensor> {
    let seqs: Vec<&Tensor> = ds.samples.iter().map(|s| &s.views.frames).collect();
    stack_frames(&seqs)
}

fn frame_labels(ds: &Dataset) -> Vec<usize> {
    ds.samples
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.prompt_class, s.views.views()))
        .collect()
}

// --------------------------------------------------------- autoencoder

pub fn train_vae(cfg: &RunConfig, resume: bool) -> Result<Summary> {
    let wd = Workdir::new(&cfg.paths.workdir);
    let train = load_split(cfg, "train")?;
    let held = load_split(cfg, "heldout")?;
    let frames = all_frames(&train)?;
    let ae_cfg = cfg.models.autoencoder.clone();
    let mut opt = optimizer(ae_cfg.lr);
    let mut ae = if resume {
        let (table, _) = load_model::<AeSidecar>(&wd.ckpt("vae"), "train-vae")?;
        let ae = VideoAE::from_table(ae_cfg.clone(), &table)?;
        opt.load_state(&ae.store, &table);
        ae
    } else {
        VideoAE::new(ae_cfg.clone())
    };
    let curve = fit_autoencoder(&mut ae, &mut opt, &frames, ae_cfg.epochs)?;
    let latents = train
        .samples
        .iter()
        .map(|s| ae.encode_tensor(&s.views.frames))
        .collect::<Result<Vec<_>>>()?;
    let stats = LatentStats::fit(&latents)?;
    let held_mse = ae.reconstruction_mse(&all_frames(&held)?)?;
    save_model(
        &wd.ckpt("vae"),
        &with_state(ae.store.to_table(), &opt, &ae.store),
        &AeSidecar {
            version: SIDECAR_VERSION,
            config: ae_cfg,
            stats,
        },
    )?;
    write_curve(&wd.report("vae_loss.csv"), "epoch", &curve, resume)?;
    Ok(vec![format!(
        "autoencoder: {} epochs, final train mse {:.3e}, held-out mse {held_mse:.3e} (step {})",
        curve.len(),
        curve.last().copied().unwrap_or(f64::NAN),
        opt.state.step
    )])
}

pub fn load_vae(cfg: &RunConfig) -> Result<(VideoAE, LatentStats)> {
    let (table, side) = load_model::<AeSidecar>(&Workdir::new(&cfg.paths.workdir).ckpt("vae"), "train-vae")?;
    Ok((VideoAE::from_table(side.config, &table)?, side.stats))
}

// ---------------------------------------------------------- 3D network

pub fn train_3d(cfg: &RunConfig, resume: bool) -> Result<Summary> {
    let wd = Workdir::new(&cfg.paths.workdir);
    let train = load_split(cfg, "train")?;
    let held = load_split(cfg, "heldout")?;
    let f_cfg = cfg.models.feedforward.clone();
    let (h, w) = (cfg.world.height, cfg.world.width);
    let mut opt = optimizer(f_cfg.lr);
    let mut f = if resume {
        let (table, _) = load_model::<F3dSidecar>(&wd.ckpt("f3d"), "train-3d")?;
        let f = Feedforward3D::from_table(f_cfg.clone(), h, w, &table)?;
        opt.load_state(&f.store, &table);
        f
    } else {
        Feedforward3D::new(f_cfg.clone(), h, w)?
    };
    let curve = fit_feedforward3d(&mut f, &mut opt, &train.samples, f_cfg.epochs)?;
    let m = eval::evaluate_f3d(&f, &held.samples)?;
    save_model(
        &wd.ckpt("f3d"),
        &with_state(f.store.to_table(), &opt, &f.store),
        &F3dSidecar {
            version: SIDECAR_VERSION,
            config: f_cfg,
            height: h,
            width: w,
        },
    )?;
    write_curve(&wd.report("f3d_loss.csv"), "epoch", &curve, resume)?;
    Ok(vec![format!(
        "3D network: {} epochs, final loss {:.4}, held-out acc_mean {:.4} comp_mean {:.4} nc_mean {:.3}",
        curve.len(),
        curve.last().copied().unwrap_or(f64::NAN),
        m.acc_mean,
        m.comp_mean,
        m.nc_mean
    )])
}

pub fn load_f3d(cfg: &RunConfig) -> Result<Feedforward3D> {
    let (table, side) = load_model::<F3dSidecar>(&Workdir::new(&cfg.paths.workdir).ckpt("f3d"), "train-3d")?;
    Feedforward3D::from_table(side.config, side.height, side.width, &table)
}

// -------------------------------------------------------------- critic

pub fn train_critic_stage(cfg: &RunConfig) -> Result<Summary> {
    let wd = Workdir::new(&cfg.paths.workdir);
    let train = load_split(cfg, "train")?;
    let held = load_split(cfg, "heldout")?;
    let (images, labels) = (all_frames(&train)?, frame_labels(&train));
    let (h_images, h_labels) = (all_frames(&held)?, frame_labels(&held));
    let (critic, curve) = train_critic(
        (&images, &labels),
        (&h_images, &h_labels),
        cfg.world.classes,
        cfg.models.critic.clone(),
    )?;
    let acc = critic.heldout_accuracy.unwrap_or(0.0);
    save_model(
        &wd.ckpt("critic"),
        &critic.store.to_table(),
        &CriticSidecar {
            version: SIDECAR_VERSION,
            config: critic.config.clone(),
            image_len: critic.image_len,
            num_classes: critic.num_classes,
            heldout_accuracy: acc,
        },
    )?;
    write_curve(&wd.report("critic_loss.csv"), "epoch", &curve, false)?;
    Ok(vec![format!(
        "critic: held-out accuracy {acc:.3} over {} classes",
        cfg.world.classes
    )])
}

pub fn load_critic(cfg: &RunConfig) -> Result<Critic> {
    let (table, side) = load_model::<CriticSidecar>(&Workdir::new(&cfg.paths.workdir).ckpt("critic"), "train-critic")?;
    let mut c = Critic::from_table(side.config, side.image_len, side.num_classes, &table)?;
    c.heldout_accuracy = Some(side.heldout_accuracy);
    Ok(c)
}

// ----------------------------------------------------------- generator

/// Standardized, flattened latents of every training scene with their
/// classes, and the per-sample latent shape.
pub fn training_latents(
    cfg: &RunConfig,
    ae: &VideoAE,
    stats: &LatentStats,
) -> Result<(Tensor, Vec<usize>, [usize; 4])> {
    let train = load_split(cfg, "train")?;
    let mut rows = Vec::new();
    let mut shape = [0; 4];
    for s in &train.samples {
        let z = stats.standardize(&ae.encode_tensor(&s.views.frames)?);
        shape.copy_from_slice(z.shape());
        rows.extend_from_slice(z.data());
    }
    let dim = shape.iter().product();
    let classes = train.samples.iter().map(|s| s.prompt_class).collect();
    Ok((Tensor::new(&[train.len(), dim], rows)?, classes, shape))
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

pub fn train_gen(cfg: &RunConfig, resume: bool) -> Result<Summary> {
    let wd = Workdir::new(&cfg.paths.workdir);
    let (ae, stats) = load_vae(cfg)?;
    let (latents, classes, shape) = training_latents(cfg, &ae, &stats)?;
    let g_cfg = cfg.models.generator.clone();
    let dim = latents.shape()[1];
    let mut opt = optimizer(g_cfg.lr);
    let mut gen = if resume {
        let (table, _) = load_model::<GeneratorSidecar>(&wd.ckpt("gen"), "train-gen")?;
        let g = FlowGenerator::from_table(g_cfg.clone(), dim, cfg.world.classes, &table)?;
        opt.load_state(&g.store, &table);
        g
    } else {
        FlowGenerator::new(g_cfg.clone(), dim, cfg.world.classes)
    };
    let curve = fit_generator(&mut gen, &mut opt, &rows_of(&latents), &classes, g_cfg.steps)?;
    save_model(
        &wd.ckpt("gen"),
        &with_state(gen.store.to_table(), &opt, &gen.store),
        &GeneratorSidecar {
            version: SIDECAR_VERSION,
            config: g_cfg,
            dim,
            num_classes: cfg.world.classes,
            latent_shape: shape,
            adapter: None,
        },
    )?;
    write_curve(&wd.report("gen_loss.csv"), "block", &curve, resume)?;
    Ok(vec![format!(
        "generator: dim {dim}, step {}, final block loss {:.4}",
        opt.state.step,
        curve.last().copied().unwrap_or(f64::NAN)
    )])
}

type LoadedGenerator = (FlowGenerator, GeneratorSidecar, Vec<(String, Tensor)>);

fn load_generator_from(path: &Path, producer: &str) -> Result<LoadedGenerator> {
    let (table, side) = load_model::<GeneratorSidecar>(path, producer)?;
    let mut g = FlowGenerator::new(side.config.clone(), side.dim, side.num_classes);
    if let Some((rank, alpha, seed)) = side.adapter {
        g.attach_adapters(rank, alpha, seed)?;
    }
    g.store.load_from(&table)?;
    Ok((g, side, table))
}

pub fn load_generator(cfg: &RunConfig) -> Result<(FlowGenerator, [usize; 4])> {
    let (g, side, _) = load_generator_from(&Workdir::new(&cfg.paths.workdir).ckpt("gen"), "train-gen")?;
    Ok((g, side.latent_shape))
}

pub fn load_aligned_generator(cfg: &RunConfig) -> Result<(FlowGenerator, [usize; 4])> {
    let (g, side, _) = load_generator_from(&Workdir::new(&cfg.paths.workdir).ckpt("gen_aligned"), "align")?;
    Ok((g, side.latent_shape))
}

// ----------------------------------------------------------- stitching

pub fn scan_stage(cfg: &RunConfig) -> Result<Summary> {
    let wd = Workdir::new(&cfg.paths.workdir);
    let (ae, _) = load_vae(cfg)?;
    let f = load_f3d(cfg)?;
    let train = load_split(cfg, "train")?;
    let n = cfg.stitch.fit_scenes.min(train.len()).max(1);
    let data = stitch::collect_activations(&ae, &f, &train.samples[..n], &cfg.stitch_layers())?;
    let fit = stitch::scan(&data, cfg.stitch.ridge)?;
    let table: Vec<(String, Tensor)> = fit
        .maps
        .iter()
        .map(|(k, s)| (format!("stitch/s/{k}"), s.clone()))
        .collect();
    save_model(
        &wd.ckpt("stitch_fit"),
        &table,
        &StitchFitSidecar {
            version: SIDECAR_VERSION,
            per_layer_mse: fit.per_layer_mse.clone(),
            k_star: fit.k_star,
            ridge: fit.ridge,
            d_f: fit.d_f,
        },
    )?;
    stitch::write_scan_csv(&wd.report("scan.csv"), &fit)?;
    let mut out: Summary = fit
        .per_layer_mse
        .iter()
        .map(|(k, m)| {
            format!(
                "layer {k}: mse {m:.4e}{}",
                if *k == fit.k_star { "  <- selected" } else { "" }
            )
        })
        .collect();
    out.push(format!("k* = {}", fit.k_star));
    Ok(out)
}

pub fn stitch_finetune(cfg: &RunConfig) -> Result<Summary> {
    let wd = Workdir::new(&cfg.paths.workdir);
    let (ae, _) = load_vae(cfg)?;
    let f = load_f3d(cfg)?;
    let (table, fit) = load_model::<StitchFitSidecar>(&wd.ckpt("stitch_fit"), "scan")?;
    let s = checkpoint::find(&table, &format!("stitch/s/{}", fit.k_star))?;
    let train = load_split(cfg, "train")?;
    let held = load_split(cfg, "heldout")?;
    let ft = &cfg.stitch.finetune;
    let mut model = stitch::assemble(&ae, s, &f, fit.k_star, cfg.stitch.adapter, ft.seed)?;
    let original = eval::evaluate_f3d(&f, &held.samples)?;
    let before = eval::evaluate_stitched(&model, &held.samples)?;
    let targets = stitch::pseudo_targets(&f, &train.samples, ft.confidence_threshold)?;
    let curve = stitch::finetune_stitched(&mut model, &train.samples, &targets, ft)?;
    let after = eval::evaluate_stitched(&model, &held.samples)?;
    save_model(
        &wd.ckpt("stitched"),
        &model.net.store.to_table(),
        &StitchedSidecar {
            version: SIDECAR_VERSION,
            k: model.k,
            adapter: model.adapter,
            seed: ft.seed,
        },
    )?;
    write_curve(&wd.report("stitch_finetune_loss.csv"), "epoch", &curve, false)?;
    let report = StitchReport {
        k: model.k,
        original,
        stitched_closed_form: before,
        stitched_finetuned: after,
        acc_ratio: after.acc_mean / original.acc_mean,
    };
    eval::write_json(&wd.report("stitch_eval.json"), &report)?;
    Ok(vec![
        format!("original 3D network: acc_mean {:.4}", original.acc_mean),
        format!(
            "stitched at k={} (closed form): acc_mean {:.4}",
            model.k, before.acc_mean
        ),
        format!(
            "stitched after fine-tuning: acc_mean {:.4} ({:.3}x original)",
            after.acc_mean, report.acc_ratio
        ),
    ])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StitchReport {
    pub k: usize,
    pub original: PointmapMetrics,
    pub stitched_closed_form: PointmapMetrics,
    pub stitched_finetuned: PointmapMetrics,
    /// Fine-tuned stitched `acc_mean` over the original's.
    pub acc_ratio: f64,
}

pub fn load_stitched(cfg: &RunConfig) -> Result<StitchedModel> {
    let wd = Workdir::new(&cfg.paths.workdir);
    let (ae, _) = load_vae(cfg)?;
    let f = load_f3d(cfg)?;
    let (table, side) = load_model::<StitchedSidecar>(&wd.ckpt("stitched"), "stitch-finetune")?;
    let zero = Tensor::zeros(&[ae.config.latent_channels + 1, f.config.width]);
    let mut model = stitch::assemble(&ae, &zero, &f, side.k, side.adapter, side.seed)?;
    model.net.store.load_from(&table)?;
    Ok(model)
}

// ----------------------------------------------------------- alignment

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptSummary {
    pub mean_total: f64,
    pub mean_q_mv: f64,
    pub mean_q_3d: f64,
    pub mean_cons: f64,
    pub per_prompt: Vec<RewardBreakdown>,
}

impl PromptSummary {
    pub fn new(per_prompt: Vec<RewardBreakdown>) -> PromptSummary {
        let n = per_prompt.len().max(1) as f64;
        let m = |f: fn(&RewardBreakdown) -> f64| per_prompt.iter().map(f).sum::<f64>() / n;
        PromptSummary {
            mean_total: m(|r| r.total),
            mean_q_mv: m(|r| r.q_mv),
            mean_q_3d: m(|r| r.q_3d),
            mean_cons: m(|r| r.cons),
            per_prompt,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlignReport {
    pub steps: u64,
    pub prompts: usize,
    pub before: PromptSummary,
    pub after: PromptSummary,
}

/// Seed of the held-out evaluation prompts.
pub fn heldout_prompt_seed(cfg: &AlignConfig) -> u64 {
    rng::mix(cfg.seed, 0xe7a1)
}

pub fn align_stage(cfg: &RunConfig, resume: bool) -> Result<(Summary, Vec<StepLog>)> {
    let wd = Workdir::new(&cfg.paths.workdir);
    let (ae, stats) = load_vae(cfg)?;
    let critic = load_critic(cfg)?;
    let stitched = load_stitched(cfg)?;
    let (base, shape) = load_generator(cfg)?;
    let (latents, classes, _) = training_latents(cfg, &ae, &stats)?;
    let a = &cfg.align;
    let mut opt = align::align_optimizer(a);
    let mut gen = if resume {
        let (g, _, table) = load_generator_from(&wd.ckpt("gen_aligned"), "align")?;
        opt.load_state(&g.store, &table);
        g
    } else {
        base.clone()
    };
    let models = RewardModels {
        stitched: &stitched,
        autoencoder: &ae,
        stats: &stats,
        critic: &critic,
        latent_shape: shape,
    };
    let mut out = Summary::new();
    if a.weights.is_zero() {
        out.push("reward weights are all zero: alignment degenerates to plain flow-matching fine-tuning".into());
    }
    let data = LatentData {
        latents: &latents,
        classes: &classes,
    };
    let logs = align::align(&mut gen, &mut opt, data, models, a)?;
    for l in &logs {
        if !l.reward.is_consistent() {
            return Err(Error::NonFinite(format!(
                "reward aggregation drifted at step {}: total {} from components",
                l.step, l.reward.total
            )));
        }
    }
    save_model(
        &wd.ckpt("gen_aligned"),
        &with_state(gen.store.to_table(), &opt, &gen.store),
        &GeneratorSidecar {
            version: SIDECAR_VERSION,
            config: gen.config.clone(),
            dim: gen.dim,
            num_classes: gen.num_classes,
            latent_shape: shape,
            adapter: Some((a.adapter_rank, a.adapter_alpha, a.seed)),
        },
    )?;
    append_align_csv(&wd.report("align.csv"), &logs, resume)?;
    let n = cfg.eval.align_prompts;
    let seed = heldout_prompt_seed(a);
    let before = PromptSummary::new(align::evaluate_prompts(&base, models, a, n, seed)?);
    let after = PromptSummary::new(align::evaluate_prompts(&gen, models, a, n, seed)?);
    out.push(format!(
        "{} updates (step {}); held-out mean reward {:.4} -> {:.4}, mean cons {:.4} -> {:.4}",
        logs.len(),
        opt.state.step,
        before.mean_total,
        after.mean_total,
        before.mean_cons,
        after.mean_cons
    ));
    eval::write_json(
        &wd.report("align_eval.json"),
        &AlignReport {
            steps: opt.state.step,
            prompts: n,
            before,
            after,
        },
    )?;
    Ok((out, logs))
}

fn append_align_csv(path: &Path, logs: &[StepLog], resume: bool) -> Result<()> {
    if resume && path.exists() {
        let tmp = path.with_extension("part.csv");
        align::write_align_csv(&tmp, logs)?;
        let text = std::fs::read_to_string(&tmp).map_err(|e| Error::io(&tmp, e))?;
        std::fs::remove_file(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let body: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    } else {
        align::write_align_csv(path, logs)
    }
}

// ---------------------------------------------------------- evaluation

pub fn eval_robustness(cfg: &RunConfig) -> Result<(Summary, eval::RobustnessSummary)> {
    let wd = Workdir::new(&cfg.paths.workdir);
    let (ae, _) = load_vae(cfg)?;
    let f = load_f3d(cfg)?;
    let stitched = load_stitched(cfg)?;
    let held = load_split(cfg, "heldout")?;
    let rows = eval::robustness_experiment(&stitched, &ae, &f, &held.samples, &cfg.eval.robustness)?;
    eval::write_robustness_csv(&wd.report("robustness.csv"), &rows)?;
    let summary = eval::robustness_summary(&rows);
    eval::write_json(&wd.report("robustness.json"), &summary)?;
    let mut out = Summary::new();
    for (alpha, paths) in &summary.per_alpha {
        let line: Vec<String> = paths
            .iter()
            .map(|(p, s)| format!("{p} acc_mean {:.4} (flagged {})", s.acc_mean, s.flagged))
            .collect();
        out.push(format!("alpha {alpha}: {}", line.join(", ")));
    }
    out.push(format!(
        "largest alpha {}: unified minus sequential acc_mean {:+.4}",
        summary.largest_alpha, summary.acc_gap_at_largest
    ));
    Ok((out, summary))
}

pub fn eval_scan(cfg: &RunConfig) -> Result<(Summary, eval::ScanStudy)> {
    let wd = Workdir::new(&cfg.paths.workdir);
    let (ae, _) = load_vae(cfg)?;
    let f = load_f3d(cfg)?;
    let train = load_split(cfg, "train")?;
    let held = load_split(cfg, "heldout")?;
    let study = eval::scan_study(
        &ae,
        &f,
        &train.samples,
        &held.samples,
        &cfg.scan_layers(),
        cfg.stitch.ridge,
        cfg.stitch.adapter,
        &cfg.stitch.finetune,
    )?;
    eval::write_scan_study_csv(&wd.report("scan_study.csv"), &study.rows)?;
    eval::write_json(&wd.report("scan_study.json"), &study)?;
    let mut out: Summary = study
        .rows
        .iter()
        .map(|r| {
            format!(
                "layer {}: lsq mse {:.4e}, stitched acc_mean {:.4}",
                r.layer, r.lsq_mse, r.acc_mean
            )
        })
        .collect();
    out.push(format!(
        "selected layer {}; Spearman(lsq mse, acc_mean) = {:.3}; original acc_mean {:.4}",
        study.selected, study.spearman, study.original.acc_mean
    ));
    Ok((out, study))
}

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use super::{median, perturb_latent, score_coords, spearman, PointmapMetrics};
use crate::error::{Error, Result};
use crate::nets::{Feedforward3D, VideoAE};
use crate::rng;
use crate::stitch::{
    assemble, collect_activations, finetune_stitched, pseudo_targets, scan, select_layer, AdapterConfig,
    FinetuneConfig, StitchedModel,
};
use crate::world::Sample;

/// Mean metrics of the 3D network on `samples`, scored on the true masks.
pub fn evaluate_f3d(f: &Feedforward3D, samples: &[Sample]) -> Result<PointmapMetrics> {
    let all = samples
        .iter()
        .map(|s| score_coords(&f.predict(&s.views.frames, s.views.views())?.coords, &s.pointmap))
        .collect::<Result<Vec<_>>>()?;
    Ok(PointmapMetrics::mean(&all))
}

/// Mean metrics of the stitched model fed with encoded frames.
pub fn evaluate_stitched(model: &StitchedModel, samples: &[Sample]) -> Result<PointmapMetrics> {
    let all = samples
        .iter()
        .map(|s| {
            score_coords(
                &model.predict_frames(&s.views.frames, s.views.views())?.coords,
                &s.pointmap,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PointmapMetrics::mean(&all))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessConfig {
    /// Ascending perturbation strengths.
    pub alphas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            alphas: vec![0.0, 0.0025, 0.005, 0.01, 0.02],
            trials: 16,
            seed: 31,
        }
    }
}

impl RobustnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.trials == 0 {
            return Err(Error::Config(
                "robustness sweep needs alphas and at least one trial".into(),
            ));
        }
        if self.alphas.iter().any(|a| !(*a >= 0.0)) || self.alphas.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!(
                "robustness alphas must be ascending and >= 0, got {:?}",
                self.alphas
            )));
        }
        Ok(())
    }
}

/// Decoding route for perturbed latents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Path {
    /// Latent straight into the stitched model.
    Unified,
    /// Latent decoded to frames, then the original 3D network.
    Sequential,
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Path::Unified => "unified",
            Path::Sequential => "sequential",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub alpha: f64,
    pub trial: usize,
    pub path: Path,
    pub acc_mean: f64,
    pub comp_mean: f64,
    pub nc_mean: f64,
    /// A prediction was not finite; metrics are NaN.
    pub flagged: bool,
}

fn path_row(alpha: f64, trial: usize, path: Path, per_sample: Result<Vec<PointmapMetrics>>) -> RobustnessRow {
    match per_sample {
        Ok(all) => {
            let m = PointmapMetrics::mean(&all);
            RobustnessRow {
                alpha,
                trial,
                path,
                acc_mean: m.acc_mean,
                comp_mean: m.comp_mean,
                nc_mean: m.nc_mean,
                flagged: false,
            }
        }
        Err(_) => RobustnessRow {
            alpha,
            trial,
            path,
            acc_mean: f64::NAN,
            comp_mean: f64::NAN,
            nc_mean: f64::NAN,
            flagged: true,
        },
    }
}

fn finite_coords(c: crate::tensor::Tensor) -> Result<crate::tensor::Tensor> {
    if c.is_finite() {
        Ok(c)
    } else {
        Err(Error::NonFinite("decoded pointmap".into()))
    }
}

/// Perturbs each sample's encoded latent and scores both decoding routes
/// against ground truth. One row per `(alpha, trial, path)`.
pub fn robustness_experiment(
    stitched: &StitchedModel,
    autoencoder: &VideoAE,
    f: &Feedforward3D,
    samples: &[Sample],
    cfg: &RobustnessConfig,
) -> Result<Vec<RobustnessRow>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("robustness sweep needs samples".into()));
    }
    let latents = samples
        .iter()
        .map(|s| autoencoder.encode_tensor(&s.views.frames))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(cfg.alphas.len() * cfg.trials * 2);
    for (ai, &alpha) in cfg.alphas.iter().enumerate() {
        for trial in 0..cfg.trials {
            let mut unified = Vec::with_capacity(samples.len());
            let mut sequential = Vec::with_capacity(samples.len());
            for (i, (s, z)) in samples.iter().zip(&latents).enumerate() {
                let seed = rng::mix(cfg.seed, ((ai * cfg.trials + trial) * samples.len() + i) as u64);
                // the whole view sequence is one latent sample
                let flat = z.reshape(&[1, z.numel()])?;
                let zp = perturb_latent(&flat, alpha, seed)?.reshape(z.shape())?;
                let v = s.views.views();
                unified.push(
                    stitched
                        .predict_latent(&zp, v)
                        .and_then(|p| finite_coords(p.coords))
                        .and_then(|c| score_coords(&c, &s.pointmap)),
                );
                sequential.push(
                    autoencoder
                        .decode_tensor(&zp)
                        .and_then(|frames| f.predict(&frames, v))
                        .and_then(|p| finite_coords(p.coords))
                        .and_then(|c| score_coords(&c, &s.pointmap)),
                );
            }
            rows.push(path_row(alpha, trial, Path::Unified, unified.into_iter().collect()));
            rows.push(path_row(
                alpha,
                trial,
                Path::Sequential,
                sequential.into_iter().collect(),
            ));
        }
    }
    Ok(rows)
}

/// Report with columns `alpha,trial,path,acc_mean,comp_mean,nc_mean,flagged`.
pub fn write_robustness_csv(path: &FsPath, rows: &[RobustnessRow]) -> Result<()> {
    let mut out = String::from("alpha,trial,path,acc_mean,comp_mean,nc_mean,flagged\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:e},{:e},{:e},{}\n",
            r.alpha, r.trial, r.path, r.acc_mean, r.comp_mean, r.nc_mean, r.flagged as u8
        ));
    }
    write_text(path, &out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub acc_mean: f64,
    pub acc_median: f64,
    pub comp_mean: f64,
    pub nc_mean: f64,
    pub flagged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    /// Keyed by the alpha as printed, then by path.
    pub per_alpha: BTreeMap<String, BTreeMap<String, PathSummary>>,
    pub largest_alpha: f64,
    /// Unified minus sequential mean accuracy at the largest alpha.
    pub acc_gap_at_largest: f64,
}

pub fn robustness_summary(rows: &[RobustnessRow]) -> RobustnessSummary {
    let mut groups: BTreeMap<(String, String), Vec<&RobustnessRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((format!("{}", r.alpha), r.path.to_string()))
            .or_default()
            .push(r);
    }
    let mut per_alpha: BTreeMap<String, BTreeMap<String, PathSummary>> = BTreeMap::new();
    for ((a, p), g) in groups {
        let ok: Vec<&&RobustnessRow> = g.iter().filter(|r| !r.flagged).collect();
        let acc: Vec<f64> = ok.iter().map(|r| r.acc_mean).collect();
        let n = ok.len().max(1) as f64;
        per_alpha.entry(a).or_default().insert(
            p,
            PathSummary {
                acc_mean: acc.iter().sum::<f64>() / n,
                acc_median: median(&acc),
                comp_mean: ok.iter().map(|r| r.comp_mean).sum::<f64>() / n,
                nc_mean: ok.iter().map(|r| r.nc_mean).sum::<f64>() / n,
                flagged: g.len() - ok.len(),
            },
        );
    }
    let largest_alpha = rows.iter().map(|r| r.alpha).fold(f64::NEG_INFINITY, f64::max);
    let key = format!("{largest_alpha}");
    let gap = per_alpha
        .get(&key)
        .and_then(|m| Some(m.get("unified")?.acc_mean - m.get("sequential")?.acc_mean))
        .unwrap_or(f64::NAN);
    RobustnessSummary {
        per_alpha,
        largest_alpha,
        acc_gap_at_largest: gap,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub layer: usize,
    pub lsq_mse: f64,
    pub acc_mean: f64,
    pub comp_mean: f64,
    pub nc_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanStudy {
    pub rows: Vec<ScanRow>,
    pub selected: usize,
    /// Rank correlation of `lsq_mse` and `acc_mean` over the rows.
    pub spearman: f64,
    pub original: PointmapMetrics,
}

/// For every layer: closed-form fit on `train`, stitched fine-tuning
/// against the original network, and held-out scoring.
#[allow(clippy::too_many_arguments)]
pub fn scan_study(
    autoencoder: &VideoAE,
    f: &Feedforward3D,
    train: &[Sample],
    heldout: &[Sample],
    layer_set: &[usize],
    ridge: Option<f64>,
    adapter: AdapterConfig,
    finetune: &FinetuneConfig,
) -> Result<ScanStudy> {
    if layer_set.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "a layer scan study needs at least 3 layers, got {}",
            layer_set.len()
        )));
    }
    let data = collect_activations(autoencoder, f, train, layer_set)?;
    let fit = scan(&data, ridge)?;
    drop(data);
    let targets = pseudo_targets(f, train, finetune.confidence_threshold)?;
    let mut rows = Vec::with_capacity(layer_set.len());
    for (&k, &mse) in &fit.per_layer_mse {
        let mut model = assemble(autoencoder, &fit.maps[&k], f, k, adapter, finetune.seed)?;
        finetune_stitched(&mut model, train, &targets, finetune)?;
        let m = evaluate_stitched(&model, heldout)?;
        rows.push(ScanRow {
            layer: k,
            lsq_mse: mse,
            acc_mean: m.acc_mean,
            comp_mean: m.comp_mean,
            nc_mean: m.nc_mean,
        });
    }
    let mse: Vec<f64> = rows.iter().map(|r| r.lsq_mse).collect();
    let acc: Vec<f64> = rows.iter().map(|r| r.acc_mean).collect();
    Ok(ScanStudy {
        selected: select_layer(&fit.per_layer_mse)?,
        spearman: spearman(&mse, &acc)?,
        original: super::experiments::evaluate_f3d(f, heldout)?,
        rows,
    })
}

/// Report with columns `layer,lsq_mse,acc_mean,comp_mean,nc_mean`.
pub fn write_scan_study_csv(path: &FsPath, rows: &[ScanRow]) -> Result<()> {
    let mut out = String::from("layer,lsq_mse,acc_mean,comp_mean,nc_mean\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e}\n",
            r.layer, r.lsq_mse, r.acc_mean, r.comp_mean, r.nc_mean
        ));
    }
    write_text(path, &out)
}

pub fn write_json<T: Serialize>(path: &FsPath, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidArgument(format!("summary not serializable: {e}")))?;
    write_text(path, &(text + "\n"))
}

fn write_text(path: &FsPath, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

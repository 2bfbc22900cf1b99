//! Declarative run configuration. Every key has a default; unknown keys
//! are rejected. Individual keys can be overridden with dotted paths such
//! as `align.steps=50`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::align::AlignConfig;
use crate::error::{Error, Result};
use crate::eval::RobustnessConfig;
use crate::nets::{AeConfig, CriticConfig, F3dConfig, FlowConfig};
use crate::stitch::{AdapterConfig, FinetuneConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Prompt classes.
    #[serde(rename = "C")]
    pub classes: usize,
    /// Views per sequence.
    #[serde(rename = "V")]
    pub views: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    /// Training scenes.
    pub n_scenes: usize,
    pub heldout_scenes: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            classes: 4,
            views: 4,
            height: 16,
            width: 16,
            n_scenes: 256,
            heldout_scenes: 16,
            seed: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsConfig {
    pub autoencoder: AeConfig,
    pub feedforward: F3dConfig,
    pub critic: CriticConfig,
    pub generator: FlowConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StitchConfig {
    /// Candidate layers; empty means every layer `1..l−1`.
    pub layer_set: Vec<usize>,
    /// Ridge λ; `null` means `1e-6·mean(diag(BᵀB))`.
    pub ridge: Option<f64>,
    /// Training scenes used for the closed-form fit.
    pub fit_scenes: usize,
    pub adapter: AdapterConfig,
    pub finetune: FinetuneConfig,
}

impl Default for StitchConfig {
    fn default() -> Self {
        StitchConfig {
            layer_set: Vec::new(),
            ridge: None,
            fit_scenes: 64,
            adapter: AdapterConfig { rank: 8, alpha: 32.0 },
            finetune: FinetuneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub robustness: RobustnessConfig,
    /// Layers of the scan study; empty means every layer `1..l−1`.
    pub scan_layers: Vec<usize>,
    /// Held-out prompts scored before and after alignment.
    pub align_prompts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            robustness: RobustnessConfig::default(),
            scan_layers: Vec::new(),
            align_prompts: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub workdir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            workdir: PathBuf::from("run"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub models: ModelsConfig,
    pub stitch: StitchConfig,
    pub align: AlignConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Applies `dotted.key=value`; the value is parsed as JSON and falls
    /// back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut node = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
            node = obj
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *node = value;
        let updated: RunConfig =
            serde_json::from_value(tree).map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.world;
        if w.classes < 2 || w.views < 2 || w.n_scenes == 0 || w.heldout_scenes == 0 {
            return Err(Error::Config(
                "world needs C >= 2, V >= 2 and nonempty train and held-out sets".into(),
            ));
        }
        if !w.height.is_multiple_of(4) || !w.width.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "frame size {}x{} must be a multiple of the 4x4 latent patch",
                w.height, w.width
            )));
        }
        self.align.rollout(0).validate()?;
        self.eval.robustness.validate()?;
        let l = self.models.feedforward.layers;
        for k in self.stitch.layer_set.iter().chain(&self.eval.scan_layers) {
            if *k == 0 || *k >= l {
                return Err(Error::Config(format!("stitching layer {k} outside 1..{}", l - 1)));
            }
        }
        Ok(())
    }

    pub fn stitch_layers(&self) -> Vec<usize> {
        layers_or_all(&self.stitch.layer_set, self.models.feedforward.layers)
    }

    pub fn scan_layers(&self) -> Vec<usize> {
        layers_or_all(&self.eval.scan_layers, self.models.feedforward.layers)
    }

    /// Every leaf key with its default, one `key = value` per line.
    pub fn key_reference() -> String {
        let mut out = Vec::new();
        flatten(
            "",
            &serde_json::to_value(RunConfig::default()).expect("config serializes"),
            &mut out,
        );
        out.join("\n")
    }
}

fn layers_or_all(set: &[usize], layers: usize) -> Vec<usize> {
    if set.is_empty() {
        (1..layers).collect()
    } else {
        set.to_vec()
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        leaf => out.push(format!("  {prefix} = {leaf}")),
    }
}

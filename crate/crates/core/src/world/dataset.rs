//! On-disk dataset: a checkpoint tensor table `X.stch` plus a JSON sidecar
//! `X.json` holding the metadata needed to regenerate every scene.
//!
//! Table entries per scene `i`: `seq{i}/frames [V,H,W,3]`,
//! `seq{i}/poses [V,4]` (azimuth, elevation, radius, focal),
//! `seq{i}/coords [V,H,W,3]`, `seq{i}/valid [V,H,W]` (0/1) and
//! `seq{i}/confidence [V,H,W]`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{camera::default_focal, make_trajectory, render_view, sample_scene, Pointmap, Pose, ViewSequence};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{checkpoint, Tensor};

pub const SIDECAR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub version: u32,
    #[serde(rename = "C")]
    pub num_classes: usize,
    #[serde(rename = "V")]
    pub views: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    /// Per-scene seed; each scene is a pure function of `(seed, class)`.
    pub seeds: Vec<u64>,
    pub prompt_classes: Vec<usize>,
}

/// One scene: its frames, cameras and ground-truth pointmap.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub prompt_class: usize,
    pub views: ViewSequence,
    pub pointmap: Pointmap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Renders the scene for `(seed, class)` along its own trajectory.
pub fn render_sample(
    seed: u64,
    prompt_class: usize,
    num_classes: usize,
    v: usize,
    h: usize,
    w: usize,
) -> Result<Sample> {
    let scene = sample_scene(seed, prompt_class, num_classes)?;
    let poses = make_trajectory(rng::mix(seed, 0x706f_7365), v, default_focal(w))?;
    let mut frames = Vec::with_capacity(v * h * w * 3);
    let mut coords = Vec::with_capacity(v * h * w * 3);
    let mut valid = Vec::with_capacity(v * h * w);
    for pose in &poses {
        let r = render_view(&scene, pose, h, w)?;
        frames.extend(r.frame);
        coords.extend(r.coords);
        valid.extend(r.valid);
    }
    Ok(Sample {
        seed,
        prompt_class,
        views: ViewSequence {
            frames: Tensor::new(&[v, h, w, 3], frames)?,
            poses,
        },
        pointmap: Pointmap::from_mask(Tensor::new(&[v, h, w, 3], coords)?, valid),
    })
}

/// `n` scenes with classes cycling through `0..num_classes` and seeds
/// derived from `seed`.
pub fn generate_dataset(n: usize, num_classes: usize, v: usize, h: usize, w: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || num_classes == 0 {
        return Err(Error::InvalidArgument(format!(
            "dataset needs scenes and classes, got {n} scenes / {num_classes} classes"
        )));
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| rng::mix(seed, i)).collect();
    let classes: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    let samples = seeds
        .iter()
        .zip(&classes)
        .map(|(&s, &c)| render_sample(s, c, num_classes, v, h, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        meta: DatasetMeta {
            version: SIDECAR_VERSION,
            num_classes,
            views: v,
            height: h,
            width: w,
            seeds,
            prompt_classes: classes,
        },
        samples,
    })
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn poses_tensor(poses: &[Pose]) -> Tensor {
    let data = poses
        .iter()
        .flat_map(|p| [p.azimuth, p.elevation, p.radius, p.focal])
        .collect();
    Tensor::new(&[poses.len(), 4], data).expect("four values per pose")
}

/// Writes `path` (tensor table) and its JSON sidecar.
pub fn emit_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut table = Vec::with_capacity(data.len() * 5);
    for (i, s) in data.samples.iter().enumerate() {
        let grid = s.pointmap.confidence.shape().to_vec();
        let valid = s.pointmap.valid.iter().map(|&b| b as u8 as f64).collect();
        table.push((format!("seq{i}/frames"), s.views.frames.clone()));
        table.push((format!("seq{i}/poses"), poses_tensor(&s.views.poses)));
        table.push((format!("seq{i}/coords"), s.pointmap.coords.clone()));
        table.push((format!("seq{i}/valid"), Tensor::new(&grid, valid)?));
        table.push((format!("seq{i}/confidence"), s.pointmap.confidence.clone()));
    }
    checkpoint::save(path, &table)?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&data.meta).expect("metadata serializes");
    std::fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
        offset: e.column(),
        msg: format!("sidecar {}: {e}", side.display()),
    })?;
    if meta.version != SIDECAR_VERSION {
        return Err(Error::Version {
            found: meta.version as u16,
            expected: SIDECAR_VERSION as u16,
        });
    }
    if meta.seeds.len() != meta.prompt_classes.len() {
        return Err(Error::Format {
            offset: 0,
            msg: "sidecar seeds and prompt_classes differ in length".into(),
        });
    }
    let table = checkpoint::load(path)?;
    let sequences = table.iter().filter(|(n, _)| n.ends_with("/frames")).count();
    if sequences != meta.seeds.len() {
        return Err(Error::Format {
            offset: 0,
            msg: format!(
                "sidecar lists {} scenes but the table holds {sequences}",
                meta.seeds.len()
            ),
        });
    }
    let (v, h, w) = (meta.views, meta.height, meta.width);
    let mut samples = Vec::with_capacity(sequences);
    for (i, (&seed, &class)) in meta.seeds.iter().zip(&meta.prompt_classes).enumerate() {
        let get = |field: &str| checkpoint::find(&table, &format!("seq{i}/{field}"));
        let frames = get("frames")?.clone();
        let coords = get("coords")?.clone();
        let confidence = get("confidence")?.clone();
        let valid_t = get("valid")?;
        let pose_t = get("poses")?;
        if frames.shape() != [v, h, w, 3] || coords.shape() != [v, h, w, 3] {
            return Err(Error::shape("load_dataset", &[v, h, w, 3], frames.shape()));
        }
        if pose_t.shape() != [v, 4] || valid_t.shape() != [v, h, w] {
            return Err(Error::shape("load_dataset", &[v, 4], pose_t.shape()));
        }
        let poses = pose_t
            .data()
            .chunks(4)
            .map(|p| Pose {
                azimuth: p[0],
                elevation: p[1],
                radius: p[2],
                focal: p[3],
            })
            .collect();
        samples.push(Sample {
            seed,
            prompt_class: class,
            views: ViewSequence { frames, poses },
            pointmap: Pointmap {
                coords,
                valid: valid_t.data().iter().map(|&x| x != 0.0).collect(),
                confidence,
            },
        });
    }
    Ok(Dataset { meta, samples })
}

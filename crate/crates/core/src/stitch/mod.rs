//! Linear stitching of the 3D network onto the autoencoder's latent space.
//!
//! Paired data: every latent cell, bilinearly resampled to the 3D
//! network's token grid and extended by a constant 1, forms a row of `B`;
//! the matching token activation after layer `k` forms the row of `A_k`.
//! The affine map `S_k` solves the ridge normal equations in closed form,
//! the layer with the lowest residual is selected, and the stitched model
//! runs `f_{k+1..l}` and the heads on `B·S_k`.

mod finetune;
mod linalg;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub use finetune::{finetune_stitched, pseudo_targets, FinetuneConfig, PseudoTarget};
pub use linalg::{cholesky_solve, gram};

use crate::error::{Error, Result};
use crate::nets::feedforward::{batch_frames, F3dOutput, Prediction};
use crate::nets::{Feedforward3D, VideoAE};
use crate::rng;
use crate::tensor::{Bound, ParamId, ResampleMode, Tape, Tensor, Var};
use crate::world::Sample;

/// Row-aligned design matrix and per-layer targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDataset {
    /// `[N, c_l + 1]`, last column all ones.
    pub b: Tensor,
    /// Layer index to `[N, D_F]`.
    pub a: BTreeMap<usize, Tensor>,
}

/// Latent cells of `z: [n, c, h, w]` resampled to `(gh, gw)` and laid out
/// as `[n·gh·gw, c]` rows in token order.
pub fn latent_rows<'t>(z: &Var<'t>, grid: (usize, usize)) -> Result<Var<'t>> {
    let s = z.shape();
    if s.len() != 4 {
        return Err(Error::shape("latent_rows", s, &[0, 0, grid.0, grid.1]));
    }
    let (n, c) = (s[0], s[1]);
    z.resample(grid.0, grid.1, ResampleMode::Bilinear)?
        .permute(&[0, 2, 3, 1])?
        .reshape(&[n * grid.0 * grid.1, c])
}

/// Appends a constant-1 column.
pub fn with_bias<'t>(rows: &Var<'t>) -> Result<Var<'t>> {
    let n = rows.shape()[0];
    let ones = rows.tape().constant(Tensor::ones(&[n, 1]));
    Var::concat(&[rows, &ones], 1)
}

const COLLECT_BATCH: usize = 8;

/// Pushes every sample through `E` and `F`, recording the design rows and
/// the activations after each layer in `layer_set`.
pub fn collect_activations(
    ae: &VideoAE,
    f: &Feedforward3D,
    samples: &[Sample],
    layer_set: &[usize],
) -> Result<ActivationDataset> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("activation collection needs samples".into()));
    }
    if layer_set.is_empty() {
        return Err(Error::InvalidArgument("empty stitching layer set".into()));
    }
    if let Some(&k) = layer_set.iter().find(|&&k| k == 0 || k >= f.layers()) {
        return Err(Error::InvalidArgument(format!(
            "stitching layer {k} outside 1..{}",
            f.layers() - 1
        )));
    }
    let views = samples[0].views.views();
    let grid = f.grid();
    let mut b_rows = Vec::new();
    let mut a_rows: BTreeMap<usize, Vec<f64>> = layer_set.iter().map(|&k| (k, Vec::new())).collect();
    let mut n = 0;
    for chunk in samples.chunks(COLLECT_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let frames = batch_frames(&refs)?;
        let tape = Tape::new();
        let pe = ae.store.bind_frozen(&tape);
        let pf = f.store.bind_frozen(&tape);
        let x = tape.constant(frames);
        let rows = with_bias(&latent_rows(&ae.encode(&pe, &x)?, grid)?)?;
        n += rows.shape()[0];
        b_rows.extend_from_slice(rows.data());
        let out = f.forward(&pf, &x, views)?;
        for (&k, dst) in a_rows.iter_mut() {
            dst.extend_from_slice(out.taps[k - 1].data());
        }
    }
    let de = b_rows.len() / n;
    if n < de {
        return Err(Error::InvalidArgument(format!(
            "{n} activation rows cannot determine {de} stitching inputs; add samples"
        )));
    }
    let d_f = f.config.width;
    Ok(ActivationDataset {
        b: Tensor::new(&[n, de], b_rows)?,
        a: a_rows
            .into_iter()
            .map(|(k, v)| Ok((k, Tensor::new(&[n, d_f], v)?)))
            .collect::<Result<_>>()?,
    })
}

/// Default ridge: `1e-6 · mean(diag(BᵀB))`.
pub fn default_ridge(b: &Tensor) -> f64 {
    let g = gram(b);
    let d = b.shape()[1];
    1e-6 * (0..d).map(|i| g[i * d + i]).sum::<f64>() / d as f64
}

/// `S = (BᵀB + λI)⁻¹ BᵀA` and `mse = ‖B·S − A‖²_F / (N·D_F)`.
pub fn fit_stitch(b: &Tensor, a: &Tensor, ridge: f64) -> Result<(Tensor, f64)> {
    if b.rank() != 2 || a.rank() != 2 || b.shape()[0] != a.shape()[0] {
        return Err(Error::shape("fit_stitch", b.shape(), a.shape()));
    }
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge {ridge} must be a finite λ ≥ 0")));
    }
    let de = b.shape()[1];
    let df = a.shape()[1];
    let mut g = gram(b);
    for i in 0..de {
        g[i * de + i] += ridge;
    }
    let bta = b.transpose()?.matmul(a)?;
    let s = cholesky_solve(&g, de, bta.data(), df).map_err(|e| match (e, ridge == 0.0) {
        (Error::Singular(m), true) => Error::Singular(format!("{m}; use a ridge λ > 0")),
        (e, _) => e,
    })?;
    let s = Tensor::new(&[de, df], s)?;
    if !s.is_finite() {
        return Err(Error::NonFinite("stitching map".into()));
    }
    Ok((s.clone(), stitch_mse(b, a, &s)?))
}

pub fn stitch_mse(b: &Tensor, a: &Tensor, s: &Tensor) -> Result<f64> {
    let pred = b.matmul(s)?;
    let sq: f64 = pred.data().iter().zip(a.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sq / a.numel() as f64)
}

/// Layer with the smallest MSE; ties go to the smallest index.
pub fn select_layer(per_layer_mse: &BTreeMap<usize, f64>) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&k, &m) in per_layer_mse {
        if best.is_none_or(|(_, bm)| m < bm) {
            best = Some((k, m));
        }
    }
    best.map(|(k, _)| k)
        .ok_or_else(|| Error::InvalidArgument("layer scan recorded no layers".into()))
}

/// Layer scan result.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchFit {
    pub per_layer_mse: BTreeMap<usize, f64>,
    pub maps: BTreeMap<usize, Tensor>,
    pub k_star: usize,
    pub ridge: f64,
    pub d_f: usize,
}

impl StitchFit {
    pub fn s(&self) -> &Tensor {
        &self.maps[&self.k_star]
    }
}

/// Fits every recorded layer and selects `k*`. `ridge = None` uses
/// [`default_ridge`].
pub fn scan(data: &ActivationDataset, ridge: Option<f64>) -> Result<StitchFit> {
    let lambda = ridge.unwrap_or_else(|| default_ridge(&data.b));
    let mut per_layer_mse = BTreeMap::new();
    let mut maps = BTreeMap::new();
    let mut d_f = 0;
    for (&k, a) in &data.a {
        let (s, mse) = fit_stitch(&data.b, a, lambda)?;
        d_f = a.shape()[1];
        per_layer_mse.insert(k, mse);
        maps.insert(k, s);
    }
    let k_star = select_layer(&per_layer_mse)?;
    Ok(StitchFit {
        per_layer_mse,
        maps,
        k_star,
        ridge: lambda,
        d_f,
    })
}

/// Scan report with columns `layer_index,D_F,mse,selected_flag`.
pub fn write_scan_csv(path: &Path, fit: &StitchFit) -> Result<()> {
    let mut out = String::from("layer_index,D_F,mse,selected_flag\n");
    for (&k, &m) in &fit.per_layer_mse {
        out.push_str(&format!("{k},{},{m:e},{}\n", fit.d_f, (k == fit.k_star) as u8));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Adapter settings of the stitched tail.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
}

/// Frozen encoder, affine stitch and adapted tail of the 3D network.
///
/// `net` is a copy of the 3D network whose parameters are all frozen
/// except the stitching map `stitch/s` and the adapters on layers
/// `k+1..l` and the heads. Layers `1..k` are never evaluated.
#[derive(Clone, Debug)]
pub struct StitchedModel {
    pub encoder: VideoAE,
    pub net: Feedforward3D,
    pub k: usize,
    pub s: ParamId,
    pub adapter: AdapterConfig,
}

/// Builds the stitched model from a fitted map for layer `k`.
pub fn assemble(
    encoder: &VideoAE,
    s: &Tensor,
    f: &Feedforward3D,
    k: usize,
    adapter: AdapterConfig,
    seed: u64,
) -> Result<StitchedModel> {
    if k == 0 || k >= f.layers() {
        return Err(Error::InvalidArgument(format!(
            "stitching index {k} outside 1..{}",
            f.layers() - 1
        )));
    }
    let de = encoder.config.latent_channels + 1;
    if s.shape() != [de, f.config.width] {
        return Err(Error::shape("assemble", s.shape(), &[de, f.config.width]));
    }
    let mut net = f.clone();
    net.store.freeze_all();
    let mut r = rng::child(seed, 0x5717);
    net.attach_tail_adapters(k, adapter.rank, adapter.alpha, &mut r)?;
    let s_id = net.store.add("stitch/s", s.clone(), true);
    let mut encoder = encoder.clone();
    encoder.store.freeze_all();
    Ok(StitchedModel {
        encoder,
        net,
        k,
        s: s_id,
        adapter,
    })
}

impl StitchedModel {
    /// Runs the stitch and tail on latents `z: [B·V, c_l, h, w]`.
    pub fn forward_latent<'t>(&self, p: &Bound<'t>, z: &Var<'t>, views: usize) -> Result<F3dOutput<'t>> {
        let rows = with_bias(&latent_rows(z, self.net.grid())?)?;
        let tokens = rows.matmul(&p[self.s])?;
        self.net.forward_from(p, self.k, &tokens, views)
    }

    /// Encodes frames with the frozen encoder, then [`Self::forward_latent`].
    pub fn forward_frames<'t>(&self, p: &Bound<'t>, frames: &Var<'t>, views: usize) -> Result<F3dOutput<'t>> {
        let tape = frames.tape();
        let pe = self.encoder.store.bind_frozen(tape);
        let z = self.encoder.encode(&pe, frames)?;
        self.forward_latent(p, &z, views)
    }

    pub fn predict_frames(&self, frames: &Tensor, views: usize) -> Result<Prediction> {
        let tape = Tape::new();
        let p = self.net.store.bind_frozen(&tape);
        let out = self.forward_frames(&p, &tape.constant(frames.clone()), views)?;
        Ok(Prediction::from_output(&out))
    }

    pub fn predict_latent(&self, z: &Tensor, views: usize) -> Result<Prediction> {
        let tape = Tape::new();
        let p = self.net.store.bind_frozen(&tape);
        let out = self.forward_latent(&p, &tape.constant(z.clone()), views)?;
        Ok(Prediction::from_output(&out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine_pair(n: usize, de: usize, df: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut r = rng::seeded(seed);
        let x = Tensor::randn(&[n, de - 1], 1.0, &mut r);
        let b = Tensor::from_fn(&[n, de], |i| {
            let (row, col) = (i / de, i % de);
            if col == de - 1 {
                1.0
            } else {
                x.data()[row * (de - 1) + col]
            }
        });
        let s = Tensor::randn(&[de, df], 1.0, &mut r);
        let a = b.matmul(&s).unwrap();
        (b, a, s)
    }

    #[test]
    fn exact_affine_relation_is_recovered() {
        let (b, a, s) = affine_pair(40, 5, 7, 1);
        let (fit, mse) = fit_stitch(&b, &a, 0.0).unwrap();
        assert!(fit.max_abs_diff(&s) < 1e-9);
        assert!(mse < 1e-20);
    }

    #[test]
    fn zero_ridge_on_collinear_design_is_singular() {
        let b = Tensor::from_fn(&[10, 3], |i| if i % 3 == 2 { 1.0 } else { 2.0 });
        let a = Tensor::ones(&[10, 2]);
        match fit_stitch(&b, &a, 0.0) {
            Err(Error::Singular(m)) => assert!(m.contains("ridge")),
            other => panic!("expected singular, got {other:?}"),
        }
        assert!(fit_stitch(&b, &a, 1e-3).is_ok());
    }

    #[test]
    fn ridge_shrinks_toward_zero() {
        let (b, a, _) = affine_pair(30, 4, 3, 2);
        let (s0, _) = fit_stitch(&b, &a, 0.0).unwrap();
        let (s1, m1) = fit_stitch(&b, &a, 1e3).unwrap();
        assert!(s1.norm() < s0.norm());
        assert!(m1 > 0.0);
    }

    #[test]
    fn selection_prefers_smallest_index_on_ties() {
        let m: BTreeMap<usize, f64> = [(3, 0.5), (1, 0.2), (2, 0.2), (4, 0.9)].into();
        assert_eq!(select_layer(&m).unwrap(), 1);
        assert!(select_layer(&BTreeMap::new()).is_err());
    }

    #[test]
    fn scan_csv_marks_selected_layer() {
        let dir = tempfile::tempdir().unwrap();
        let fit = StitchFit {
            per_layer_mse: [(1, 0.3), (2, 0.1)].into(),
            maps: BTreeMap::new(),
            k_star: 2,
            ridge: 0.0,
            d_f: 8,
        };
        let path = dir.path().join("scan.csv");
        write_scan_csv(&path, &fit).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "layer_index,D_F,mse,selected_flag");
        assert!(lines[1].starts_with("1,8,") && lines[1].ends_with(",0"));
        assert!(lines[2].ends_with(",1"));
    }
}

//! Pointmap and pose metrics, latent perturbation, and the two analysis
//! experiments: layer scan versus stitched quality, and noise robustness
//! of the stitched path versus decode-then-reconstruct.

mod experiments;

use serde::{Deserialize, Serialize};

pub use experiments::{
    evaluate_f3d, evaluate_stitched, robustness_experiment, robustness_summary, scan_study, write_json,
    write_robustness_csv, write_scan_study_csv, Path as EvalPath, PathSummary, RobustnessConfig, RobustnessRow,
    RobustnessSummary, ScanRow, ScanStudy,
};

use crate::error::{Error, Result};
use crate::nets::flow::standard_normal;
use crate::tensor::Tensor;
use crate::world::camera::{cross, dot, norm, sub};
use crate::world::{Pointmap, Pose, Vec3};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointmapMetrics {
    pub acc_mean: f64,
    pub acc_median: f64,
    pub comp_mean: f64,
    pub comp_median: f64,
    /// 0 when no pixel has a normal in both pointmaps.
    pub nc_mean: f64,
}

impl PointmapMetrics {
    /// Field-wise mean.
    pub fn mean(all: &[PointmapMetrics]) -> PointmapMetrics {
        let n = all.len().max(1) as f64;
        let f = |g: fn(&PointmapMetrics) -> f64| all.iter().map(g).sum::<f64>() / n;
        PointmapMetrics {
            acc_mean: f(|m| m.acc_mean),
            acc_median: f(|m| m.acc_median),
            comp_mean: f(|m| m.comp_mean),
            comp_median: f(|m| m.comp_median),
            nc_mean: f(|m| m.nc_mean),
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

fn valid_points(pm: &Pointmap) -> Vec<Vec3> {
    pm.valid
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(i, _)| pm.point(i))
        .collect()
}

/// Distance from every point of `from` to its nearest point of `to`,
/// by exhaustive search.
pub fn nearest_distances(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    let d = sub(*p, *q);
                    dot(d, d)
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Unit normals from the cross product of the `+x` and `+y` neighbor
/// differences, where the pixel and both neighbors are valid.
pub fn grid_normals(pm: &Pointmap) -> Vec<Option<Vec3>> {
    let s = pm.coords.shape();
    let r = s.len();
    let (h, w) = (s[r - 3], s[r - 2]);
    let frames = pm.valid.len() / (h * w);
    let mut out = vec![None; pm.valid.len()];
    for f in 0..frames {
        for y in 0..h.saturating_sub(1) {
            for x in 0..w.saturating_sub(1) {
                let i = (f * h + y) * w + x;
                let (ix, iy) = (i + 1, i + w);
                if !(pm.valid[i] && pm.valid[ix] && pm.valid[iy]) {
                    continue;
                }
                let p = pm.point(i);
                let n = cross(sub(pm.point(ix), p), sub(pm.point(iy), p));
                let len = norm(n);
                if len > 1e-12 {
                    out[i] = Some([n[0] / len, n[1] / len, n[2] / len]);
                }
            }
        }
    }
    out
}

/// Accuracy (prediction to truth), completion (truth to prediction) and
/// normal consistency between two pointmaps on the same grid.
pub fn pointmap_metrics(pred: &Pointmap, gt: &Pointmap) -> Result<PointmapMetrics> {
    if pred.coords.shape() != gt.coords.shape() || pred.valid.len() != gt.valid.len() {
        return Err(Error::shape("pointmap_metrics", pred.coords.shape(), gt.coords.shape()));
    }
    let (p, g) = (valid_points(pred), valid_points(gt));
    if p.is_empty() || g.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "pointmap metrics need valid points on both sides ({} predicted, {} true)",
            p.len(),
            g.len()
        )));
    }
    let acc = nearest_distances(&p, &g);
    let comp = nearest_distances(&g, &p);
    let cos: Vec<f64> = grid_normals(pred)
        .iter()
        .zip(grid_normals(gt))
        .filter_map(|(a, b)| Some(dot((*a)?, b?).clamp(-1.0, 1.0)))
        .collect();
    Ok(PointmapMetrics {
        acc_mean: mean(&acc),
        acc_median: median(&acc),
        comp_mean: mean(&comp),
        comp_median: median(&comp),
        nc_mean: if cos.is_empty() { 0.0 } else { mean(&cos) },
    })
}

/// Predicted coordinates scored on the ground-truth mask.
pub fn score_coords(coords: &Tensor, gt: &Pointmap) -> Result<PointmapMetrics> {
    let pred = Pointmap {
        coords: coords.clone(),
        valid: gt.valid.clone(),
        confidence: gt.confidence.clone(),
    };
    pointmap_metrics(&pred, gt)
}

/// Rotation error in degrees and absolute radius difference.
pub fn pose_error(pred: &Pose, gt: &Pose) -> (f64, f64) {
    (
        pred.rotation().angle_to(&gt.rotation()).to_degrees(),
        (pred.radius - gt.radius).abs(),
    )
}

/// `z + α·‖z_i‖_F·ε` with the Frobenius norm taken per sample along the
/// first axis and `ε` standard normal from `seed`.
pub fn perturb_latent(z: &Tensor, alpha: f64, seed: u64) -> Result<Tensor> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "perturbation strength {alpha} must be >= 0"
        )));
    }
    if alpha == 0.0 {
        return Ok(z.clone());
    }
    let n = z.shape().first().copied().unwrap_or(1).max(1);
    let per = z.numel() / n;
    let eps = standard_normal(z.numel(), seed);
    let mut out = z.clone();
    for (i, chunk) in out.data_mut().chunks_mut(per.max(1)).enumerate() {
        let fro = chunk.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (j, x) in chunk.iter_mut().enumerate() {
            *x += alpha * fro * eps[i * per + j];
        }
    }
    Ok(out)
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[order[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "rank correlation needs two equal series of length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

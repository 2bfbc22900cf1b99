use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Camera-to-world rotation, stored by columns `[right, down, forward]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(pub [Vec3; 3]);

impl Rotation {
    pub fn apply(&self, v: Vec3) -> Vec3 {
        let [c0, c1, c2] = self.0;
        [
            c0[0] * v[0] + c1[0] * v[1] + c2[0] * v[2],
            c0[1] * v[0] + c1[1] * v[1] + c2[1] * v[2],
            c0[2] * v[0] + c1[2] * v[1] + c2[2] * v[2],
        ]
    }

    pub fn apply_transpose(&self, v: Vec3) -> Vec3 {
        [dot(self.0[0], v), dot(self.0[1], v), dot(self.0[2], v)]
    }

    pub fn determinant(&self) -> f64 {
        dot(self.0[0], cross(self.0[1], self.0[2]))
    }

    /// Geodesic angle (radians) between two rotations.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        // trace(Aᵀ B) = Σ_k a_k · b_k over columns
        let tr: f64 = (0..3).map(|k| dot(self.0[k], other.0[k])).sum();
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// Look-at-origin pinhole camera.
///
/// The camera sits at `radius · (cos(el)·sin(az), sin(el), cos(el)·cos(az))`
/// and looks at the origin with world up `+y`. Camera axes follow the
/// x-right, y-down, z-forward convention; the principal point is the image
/// center and pixels are square.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub focal: f64,
}

/// Focal length for a 50° horizontal field of view at width `w`.
pub fn default_focal(w: usize) -> f64 {
    (w as f64 / 2.0) / (25f64.to_radians()).tan()
}

impl Pose {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "degenerate pose: radius {} must be positive",
                self.radius
            )));
        }
        if !(self.focal > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "degenerate pose: focal {} must be positive",
                self.focal
            )));
        }
        if self.elevation.abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::InvalidArgument(format!(
                "degenerate pose: elevation {} leaves the look-at frame undefined",
                self.elevation
            )));
        }
        Ok(())
    }

    /// Azimuth reduced to `[0, 2π)` and snapped to a 1e-9 rad grid, so
    /// that `az` and `az + 2π` produce bit-identical cameras.
    pub fn canonical_azimuth(&self) -> f64 {
        let a = self.azimuth.rem_euclid(std::f64::consts::TAU);
        (a * 1e9).round() / 1e9
    }

    pub fn position(&self) -> Vec3 {
        let (sa, ca) = self.canonical_azimuth().sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        [self.radius * ce * sa, self.radius * se, self.radius * ce * ca]
    }

    /// Unit direction from the origin toward the camera.
    pub fn direction(&self) -> Vec3 {
        let (sa, ca) = self.canonical_azimuth().sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        [ce * sa, se, ce * ca]
    }

    pub fn rotation(&self) -> Rotation {
        let forward = scale(self.direction(), -1.0);
        let right = normalize(cross(forward, [0.0, 1.0, 0.0]));
        let down = cross(forward, right);
        Rotation([right, down, forward])
    }

    /// World-space ray through the center of pixel `(row, col)`.
    pub fn ray(&self, row: usize, col: usize, h: usize, w: usize) -> (Vec3, Vec3) {
        let x = (col as f64 + 0.5 - w as f64 / 2.0) / self.focal;
        let y = (row as f64 + 0.5 - h as f64 / 2.0) / self.focal;
        let d = normalize(self.rotation().apply([x, y, 1.0]));
        (self.position(), d)
    }

    /// Projects a world point to continuous pixel coordinates
    /// `(col, row, depth)`; `None` behind the camera.
    pub fn project(&self, p: Vec3, h: usize, w: usize) -> Option<(f64, f64, f64)> {
        let c = self.rotation().apply_transpose(sub(p, self.position()));
        if c[2] <= 1e-9 {
            return None;
        }
        let col = w as f64 / 2.0 + self.focal * c[0] / c[2];
        let row = h as f64 / 2.0 + self.focal * c[1] / c[2];
        Some((col, row, c[2]))
    }
}

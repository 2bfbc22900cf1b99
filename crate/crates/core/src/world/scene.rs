use rand::Rng;
use serde::{Deserialize, Serialize};

use super::camera::Vec3;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Sphere,
    /// Axis-aligned cube; `size` is the half-extent.
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: Vec3,
    /// Sphere radius or cube half-extent.
    pub size: f64,
    pub color: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub prompt_class: usize,
    pub background: Vec3,
}

pub const CENTER_RANGE: f64 = 0.6;
pub const SIZE_RANGE: (f64, f64) = (0.15, 0.45);
/// Base color of the environment behind all primitives.
pub const BACKGROUND: Vec3 = [0.45, 0.45, 0.42];

/// Class lookup: what primitives (kind and color) a prompt class contains.
///
/// Class `c` holds `1 + c mod 3` primitives. Primitive `j` is a sphere when
/// `c + j` is even and a box otherwise; its color is a fixed hue derived
/// from `(c, j)`. Only placement and size vary with the seed.
pub fn class_template(class: usize) -> Vec<(PrimitiveKind, Vec3)> {
    let count = 1 + class % 3;
    (0..count)
        .map(|j| {
            let kind = if (class + j).is_multiple_of(2) {
                PrimitiveKind::Sphere
            } else {
                PrimitiveKind::Box
            };
            let hue = (class as f64 * 0.618_034 + j as f64 * 0.29).fract();
            (kind, hsv_to_rgb(hue, 0.8, 0.9))
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Vec3 {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Deterministic scene for `(seed, class)` among `num_classes` classes.
pub fn sample_scene(seed: u64, prompt_class: usize, num_classes: usize) -> Result<Scene> {
    if prompt_class >= num_classes {
        return Err(Error::InvalidArgument(format!(
            "prompt class {prompt_class} out of range for {num_classes} classes"
        )));
    }
    let mut r = rng::child(seed, prompt_class as u64);
    let primitives = class_template(prompt_class)
        .into_iter()
        .map(|(kind, color)| {
            let size = r.random_range(SIZE_RANGE.0..SIZE_RANGE.1);
            let reach = CENTER_RANGE.min(1.0 - size);
            let center = [
                r.random_range(-reach..reach),
                r.random_range(-reach..reach),
                r.random_range(-reach..reach),
            ];
            Primitive {
                kind,
                center,
                size,
                color,
            }
        })
        .collect();
    Ok(Scene {
        primitives,
        prompt_class,
        background: BACKGROUND,
    })
}

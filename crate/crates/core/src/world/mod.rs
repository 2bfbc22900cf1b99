//! Synthetic multi-view world: prompt-conditioned primitive scenes, an
//! analytic ray caster, smooth orbit trajectories and the on-disk dataset.

pub mod camera;
pub mod dataset;
pub mod render;
pub mod scene;

pub use camera::{default_focal, Pose, Rotation, Vec3};
pub use dataset::{emit_dataset, generate_dataset, load_dataset, render_sample, Dataset, DatasetMeta, Sample};
pub use render::{environment, make_trajectory, render_view, ViewRender, FAR_SENTINEL};
pub use scene::{sample_scene, Primitive, PrimitiveKind, Scene, BACKGROUND};

use crate::tensor::Tensor;

/// Frames of one scene. `frames` is `[V, H, W, 3]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSequence {
    pub frames: Tensor,
    pub poses: Vec<Pose>,
}

/// Per-pixel world coordinates. `coords` is `[V, H, W, 3]`, `valid` and
/// `confidence` are `V·H·W` long. Invalid pixels hold [`FAR_SENTINEL`]
/// and confidence 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Pointmap {
    pub coords: Tensor,
    pub valid: Vec<bool>,
    pub confidence: Tensor,
}

impl ViewSequence {
    pub fn views(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }
}

impl Pointmap {
    /// Builds a pointmap from raw coordinates and a validity mask, writing
    /// the sentinel and zero confidence into invalid pixels.
    pub fn from_mask(mut coords: Tensor, valid: Vec<bool>) -> Self {
        let shape = coords.shape()[..coords.rank() - 1].to_vec();
        for (px, &v) in valid.iter().enumerate() {
            if !v {
                coords.data_mut()[px * 3..px * 3 + 3].copy_from_slice(&FAR_SENTINEL);
            }
        }
        let confidence =
            Tensor::new(&shape, valid.iter().map(|&v| v as u8 as f64).collect()).expect("mask length matches grid");
        Pointmap {
            coords,
            valid,
            confidence,
        }
    }

    pub fn point(&self, px: usize) -> Vec3 {
        let c = &self.coords.data()[px * 3..px * 3 + 3];
        [c[0], c[1], c[2]]
    }
}

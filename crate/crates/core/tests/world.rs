use proptest::prelude::*;

use stitch3d::world::camera::{dot, norm, sub};
use stitch3d::world::{
    emit_dataset, generate_dataset, load_dataset, make_trajectory, render_sample, sample_scene, Primitive,
    PrimitiveKind, FAR_SENTINEL,
};

/// Distance from `p` to the surface of `q`; zero on the surface.
fn surface_distance(q: &Primitive, p: [f64; 3]) -> f64 {
    match q.kind {
        PrimitiveKind::Sphere => (norm(sub(p, q.center)) - q.size).abs(),
        PrimitiveKind::Box => {
            let d: Vec<f64> = (0..3).map(|k| (p[k] - q.center[k]).abs() - q.size).collect();
            let outside = d.iter().map(|x| x.max(0.0).powi(2)).sum::<f64>().sqrt();
            let inside = d.iter().cloned().fold(f64::MIN, f64::max).min(0.0);
            (outside + inside).abs()
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn valid_pixels_reproject_to_themselves(seed in any::<u64>(), class in 0usize..4) {
        let s = render_sample(seed, class, 4, 3, 16, 16).unwrap();
        let (h, w) = (16, 16);
        for (v, pose) in s.views.poses.iter().enumerate() {
            for px in 0..h * w {
                let i = v * h * w + px;
                if !s.pointmap.valid[i] {
                    continue;
                }
                let (col, row, _) = pose.project(s.pointmap.point(i), h, w).expect("in front of the camera");
                prop_assert!((col - ((px % w) as f64 + 0.5)).abs() <= 0.5 + 1e-9);
                prop_assert!((row - ((px / w) as f64 + 0.5)).abs() <= 0.5 + 1e-9);
            }
        }
    }

    /// A pixel's color is the flat color of the surface it sees, so a
    /// world point has the same color from every view.
    #[test]
    fn color_depends_only_on_the_world_point(seed in any::<u64>(), class in 0usize..4) {
        let scene = sample_scene(seed, class, 4).unwrap();
        let s = render_sample(seed, class, 4, 4, 16, 16).unwrap();
        let frames = s.views.frames.data();
        for i in 0..s.pointmap.valid.len() {
            if !s.pointmap.valid[i] {
                prop_assert_eq!(s.pointmap.point(i), FAR_SENTINEL);
                prop_assert_eq!(s.pointmap.confidence.data()[i], 0.0);
                continue;
            }
            let p = s.pointmap.point(i);
            let owner = scene
                .primitives
                .iter()
                .min_by(|a, b| surface_distance(a, p).total_cmp(&surface_distance(b, p)))
                .unwrap();
            prop_assert!(surface_distance(owner, p) < 1e-9);
            for k in 0..3 {
                prop_assert!((frames[i * 3 + k] - owner.color[k].clamp(0.0, 1.0)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn trajectory_rotations_are_orthonormal(seed in any::<u64>(), v in 2usize..8) {
        for pose in make_trajectory(seed, v, 16.0).unwrap() {
            let r = pose.rotation().0;
            for a in 0..3 {
                for b in 0..3 {
                    let want = if a == b { 1.0 } else { 0.0 };
                    prop_assert!((dot(r[a], r[b]) - want).abs() < 1e-10);
                }
            }
            prop_assert!((pose.rotation().determinant() - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.stch"), dir.path().join("b.stch"));
    emit_dataset(&a, &generate_dataset(6, 3, 2, 8, 8, 5).unwrap()).unwrap();
    emit_dataset(&b, &generate_dataset(6, 3, 2, 8, 8, 5).unwrap()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let sidecar = |p: &std::path::Path| std::fs::read(stitch3d::world::dataset::sidecar_path(p)).unwrap();
    assert_eq!(sidecar(&a), sidecar(&b));

    let other = dir.path().join("c.stch");
    emit_dataset(&other, &generate_dataset(6, 3, 2, 8, 8, 6).unwrap()).unwrap();
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&other).unwrap());
}

#[test]
fn load_then_emit_reproduces_bytes_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.stch"), dir.path().join("b.stch"));
    let data = generate_dataset(5, 2, 3, 8, 8, 11).unwrap();
    emit_dataset(&a, &data).unwrap();
    let back = load_dataset(&a).unwrap();
    assert_eq!(back.meta.seeds.len(), back.samples.len());
    assert_eq!(back.samples, data.samples);
    emit_dataset(&b, &back).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn missing_dataset_names_the_path() {
    let err = load_dataset(std::path::Path::new("/nonexistent/dir/train.stch")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/dir/train."), "{err}");
}

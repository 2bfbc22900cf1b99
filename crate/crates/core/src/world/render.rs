use rand::Rng;

use super::camera::{add, dot, scale, sub, Pose, Vec3};
use super::scene::{Primitive, PrimitiveKind, Scene};
use crate::error::{Error, Result};
use crate::rng;

/// World coordinates stored for pixels whose ray hits nothing.
pub const FAR_SENTINEL: Vec3 = [0.0, 0.0, 10.0];

/// Strength of the direction-dependent tint of the environment.
pub const ENV_TINT: f64 = 0.3;

/// Largest azimuth step between consecutive views of a trajectory.
pub const MAX_AZIMUTH_GAP: f64 = std::f64::consts::PI / 6.0;
pub const MIN_AZIMUTH_GAP: f64 = std::f64::consts::PI / 12.0;
pub const ELEVATION_RANGE: (f64, f64) = (0.15, 0.55);
pub const RADIUS_RANGE: (f64, f64) = (2.3, 2.8);

/// One rendered view: `frame` and `coords` are `H×W×3` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRender {
    pub frame: Vec<f64>,
    pub coords: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Environment color seen along world direction `d`: the base background
/// tinted by the ray's heading so that the camera's orientation is
/// recoverable from the image. Unlit and view-independent for world points.
pub fn environment(background: Vec3, d: Vec3) -> Vec3 {
    let heading = d[0].atan2(d[2]);
    let tint = [heading.cos(), heading.sin(), d[1]];
    let mut c = [0.0; 3];
    for k in 0..3 {
        c[k] = (background[k] + ENV_TINT * 0.5 * tint[k]).clamp(0.0, 1.0);
    }
    c
}

fn intersect(p: &Primitive, o: Vec3, d: Vec3) -> Option<f64> {
    match p.kind {
        PrimitiveKind::Sphere => {
            let oc = sub(o, p.center);
            let b = dot(oc, d);
            let c = dot(oc, oc) - p.size * p.size;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t0 = -b - s;
            let t1 = -b + s;
            if t0 > 1e-9 {
                Some(t0)
            } else if t1 > 1e-9 {
                Some(t1)
            } else {
                None
            }
        }
        PrimitiveKind::Box => {
            let mut tmin = f64::NEG_INFINITY;
            let mut tmax = f64::INFINITY;
            for k in 0..3 {
                let lo = p.center[k] - p.size;
                let hi = p.center[k] + p.size;
                if d[k].abs() < 1e-15 {
                    if o[k] < lo || o[k] > hi {
                        return None;
                    }
                } else {
                    let a = (lo - o[k]) / d[k];
                    let b = (hi - o[k]) / d[k];
                    tmin = tmin.max(a.min(b));
                    tmax = tmax.min(a.max(b));
                }
            }
            if tmax < tmin || tmax <= 1e-9 {
                None
            } else if tmin > 1e-9 {
                Some(tmin)
            } else {
                Some(tmax)
            }
        }
    }
}

/// Ray-casts `scene` from `pose` at `h×w`. The nearest hit wins; misses
/// get the environment color and the far sentinel.
pub fn render_view(scene: &Scene, pose: &Pose, h: usize, w: usize) -> Result<ViewRender> {
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!(
            "render resolution {h}x{w} below the 8x8 minimum"
        )));
    }
    pose.validate()?;
    let mut out = ViewRender {
        frame: vec![0.0; h * w * 3],
        coords: vec![0.0; h * w * 3],
        valid: vec![false; h * w],
    };
    for row in 0..h {
        for col in 0..w {
            let (o, d) = pose.ray(row, col, h, w);
            let hit = scene
                .primitives
                .iter()
                .filter_map(|p| intersect(p, o, d).map(|t| (t, p)))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            let px = row * w + col;
            let (color, coord) = match hit {
                Some((t, p)) => {
                    out.valid[px] = true;
                    (p.color, add(o, scale(d, t)))
                }
                None => (environment(scene.background, d), FAR_SENTINEL),
            };
            for k in 0..3 {
                out.frame[px * 3 + k] = color[k].clamp(0.0, 1.0);
                out.coords[px * 3 + k] = coord[k];
            }
        }
    }
    Ok(out)
}

/// Smooth orbit of `v` look-at poses: azimuth strictly increasing with
/// gaps in `[MIN_AZIMUTH_GAP, MAX_AZIMUTH_GAP]`, elevation and radius
/// drawn once per trajectory with a small per-view jitter.
pub fn make_trajectory(seed: u64, v: usize, focal: f64) -> Result<Vec<crate::world::Pose>> {
    if v < 2 {
        return Err(Error::InvalidArgument(format!(
            "a trajectory needs at least 2 views, got {v}"
        )));
    }
    let mut r = rng::child(seed, 0x7472_616a);
    let mut az = r.random_range(0.0..std::f64::consts::TAU);
    let el0 = r.random_range(ELEVATION_RANGE.0..ELEVATION_RANGE.1);
    let rad0 = r.random_range(RADIUS_RANGE.0..RADIUS_RANGE.1);
    let mut poses = Vec::with_capacity(v);
    for i in 0..v {
        if i > 0 {
            az += r.random_range(MIN_AZIMUTH_GAP..MAX_AZIMUTH_GAP);
        }
        poses.push(Pose {
            azimuth: az,
            elevation: el0 + r.random_range(-0.05..0.05),
            radius: rad0 + r.random_range(-0.1..0.1),
            focal,
        });
    }
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scene::{sample_scene, BACKGROUND};

    fn single_sphere() -> Scene {
        Scene {
            primitives: vec![Primitive {
                kind: PrimitiveKind::Sphere,
                center: [0.0; 3],
                size: 0.5,
                color: [1.0, 0.0, 0.0],
            }],
            prompt_class: 0,
            background: BACKGROUND,
        }
    }

    fn pose_on_z(focal: f64) -> Pose {
        Pose {
            azimuth: 0.0,
            elevation: 0.0,
            radius: 3.0,
            focal,
        }
    }

    /// Independent check: march along the ray in fixed steps until inside.
    fn march(scene: &Scene, o: Vec3, d: Vec3, step: f64) -> Option<Vec3> {
        let mut t = 0.0;
        while t < 10.0 {
            let p = add(o, scale(d, t));
            let inside = scene.primitives.iter().any(|q| match q.kind {
                PrimitiveKind::Sphere => crate::world::camera::norm(sub(p, q.center)) <= q.size,
                PrimitiveKind::Box => (0..3).all(|k| (p[k] - q.center[k]).abs() <= q.size),
            });
            if inside {
                return Some(p);
            }
            t += step;
        }
        None
    }

    #[test]
    fn center_pixel_hits_sphere_front() {
        let scene = single_sphere();
        let pose = pose_on_z(9.0);
        let v = render_view(&scene, &pose, 9, 9).unwrap();
        let px = 4 * 9 + 4;
        assert!(v.valid[px]);
        let hit = &v.coords[px * 3..px * 3 + 3];
        assert!(hit[0].abs() < 1e-12 && hit[1].abs() < 1e-12);
        assert!((hit[2] - 0.5).abs() < 1e-12);
        let (o, d) = pose.ray(4, 4, 9, 9);
        let marched = march(&scene, o, d, 1e-4).unwrap();
        assert!((marched[2] - hit[2]).abs() < 2e-4);
    }

    #[test]
    fn corner_ray_misses() {
        let v = render_view(&single_sphere(), &pose_on_z(9.0), 9, 9).unwrap();
        assert!(!v.valid[0]);
        assert_eq!(&v.coords[0..3], &FAR_SENTINEL);
    }

    #[test]
    fn degenerate_pose_rejected() {
        let mut p = pose_on_z(9.0);
        p.radius = 0.0;
        assert!(render_view(&single_sphere(), &p, 9, 9).is_err());
    }

    #[test]
    fn azimuth_periodicity_is_bit_exact() {
        let scene = sample_scene(3, 1, 4).unwrap();
        let a = Pose {
            azimuth: 0.7,
            elevation: 0.3,
            radius: 2.5,
            focal: 17.0,
        };
        let b = Pose {
            azimuth: a.azimuth + std::f64::consts::TAU,
            ..a
        };
        let ra = render_view(&scene, &a, 16, 16).unwrap();
        let rb = render_view(&scene, &b, 16, 16).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn trajectories_are_monotone_and_smooth() {
        for seed in 0..100 {
            let poses = make_trajectory(seed, 6, 17.0).unwrap();
            for w in poses.windows(2) {
                let gap = w[1].azimuth - w[0].azimuth;
                assert!(gap > 0.0 && gap <= MAX_AZIMUTH_GAP);
            }
        }
        assert!(make_trajectory(0, 1, 17.0).is_err());
    }
}

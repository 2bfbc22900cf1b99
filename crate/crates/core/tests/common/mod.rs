#![allow(dead_code)]

pub mod gradcheck;
pub mod rollout;

use stitch3d::nets::{AeConfig, F3dConfig, Feedforward3D, VideoAE};
use stitch3d::tensor::Tensor;

/// Small enough that the whole pipeline runs in about a second.
pub const TINY: &str = r#"{
  "world": {"C": 2, "V": 2, "H": 8, "W": 8, "n_scenes": 12, "heldout_scenes": 8, "seed": 5},
  "models": {
    "autoencoder": {"latent_channels": 4, "hidden": 16, "epochs": 15},
    "feedforward": {"layers": 4, "width": 12, "hidden": 16, "pose_hidden": 8, "epochs": 6},
    "critic": {"width": 16, "epochs": 30},
    "generator": {"hidden": 32, "depth": 1, "time_dim": 4, "class_dim": 4, "steps": 150}
  },
  "stitch": {"fit_scenes": 8, "adapter": {"rank": 2, "alpha": 4.0}, "finetune": {"epochs": 4, "warmup_steps": 2}},
  "align": {"steps": 6, "t1": 3, "t2": 6, "gen_batch": 4, "adapter_rank": 2},
  "eval": {"robustness": {"trials": 2, "alphas": [0.0, 0.05]}, "scan_layers": [1, 2, 3], "align_prompts": 2}
}"#;

/// Minimizes `½‖B·S − A‖² + ½λ‖S‖²` by plain gradient descent with step
/// `1/L`, `L` the largest eigenvalue of `BᵀB + λI` (power iteration).
pub fn gd_least_squares(b: &Tensor, a: &Tensor, ridge: f64, max_iters: usize) -> Tensor {
    let (n, de) = (b.shape()[0], b.shape()[1]);
    let df = a.shape()[1];
    let bd = b.data();
    let ad = a.data();
    let mut g = vec![0.0; de * de];
    for r in 0..n {
        for i in 0..de {
            for j in 0..de {
                g[i * de + j] += bd[r * de + i] * bd[r * de + j];
            }
        }
    }
    for i in 0..de {
        g[i * de + i] += ridge;
    }
    let mut bta = vec![0.0; de * df];
    for r in 0..n {
        for i in 0..de {
            for j in 0..df {
                bta[i * df + j] += bd[r * de + i] * ad[r * df + j];
            }
        }
    }
    let mut v = vec![1.0; de];
    let mut lmax = 0.0;
    for _ in 0..500 {
        let w: Vec<f64> = (0..de).map(|i| (0..de).map(|j| g[i * de + j] * v[j]).sum()).collect();
        lmax = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.iter().map(|x| x / lmax).collect();
    }
    let step = 1.0 / (lmax * 1.01);
    let mut s = vec![0.0; de * df];
    for _ in 0..max_iters {
        let mut grad_sq = 0.0;
        let mut grad = vec![0.0; de * df];
        for i in 0..de {
            for j in 0..df {
                let gs: f64 = (0..de).map(|k| g[i * de + k] * s[k * df + j]).sum();
                let gr = gs - bta[i * df + j];
                grad[i * df + j] = gr;
                grad_sq += gr * gr;
            }
        }
        for (x, gr) in s.iter_mut().zip(&grad) {
            *x -= step * gr;
        }
        if grad_sq.sqrt() < 1e-14 {
            break;
        }
    }
    Tensor::new(&[de, df], s).unwrap()
}

/// Autoencoder plus a 3D network whose activation after layer 1 is an
/// exact affine function of the encoder latent.
///
/// Residual stream layout: `[h_e pre-activations | c_l latent | pad]`.
/// The stem reproduces the encoder's first layer, block 1 recovers the
/// hidden units with GELU, writes the latent through the encoder's second
/// layer and cancels the pre-activations with `gelu(x) − gelu(−x) = x`.
/// Layers after 1 keep their random weights.
pub fn linear_tap_network(ae: &VideoAE, h: usize, w: usize, layers: usize, seed: u64) -> Feedforward3D {
    let he = ae.config.hidden;
    let c = ae.config.latent_channels;
    let d = he + c + 4;
    let cfg = F3dConfig {
        layers,
        width: d,
        hidden: 2 * he,
        patch: 4,
        pose_hidden: 8,
        seed,
        ..F3dConfig::default()
    };
    let mut f = Feedforward3D::new(cfg, h, w).unwrap();
    let get = |name: &str| ae.store.get(ae.store.id(name).unwrap()).clone();
    let (enc1_w, enc1_b) = (get("ae/enc1/w"), get("ae/enc1/b"));
    let (enc2_w, enc2_b) = (get("ae/enc2/w"), get("ae/enc2/b"));
    let pd = enc1_w.shape()[1];
    let mut set = |name: &str, t: Tensor| {
        let id = f.store.id(name).unwrap();
        f.store.set(id, t).unwrap();
    };
    let cells = (h / 4) * (w / 4);
    set("f3d/pos", Tensor::zeros(&[cells, d]));
    set(
        "f3d/stem/w",
        Tensor::from_fn(&[d, pd], |i| {
            let (r, col) = (i / pd, i % pd);
            if r < he {
                enc1_w.data()[r * pd + col]
            } else {
                0.0
            }
        }),
    );
    set(
        "f3d/stem/b",
        Tensor::from_fn(&[d], |r| if r < he { enc1_b.data()[r] } else { 0.0 }),
    );
    // hidden unit j < h_e reads +pre_j, unit h_e + j reads −pre_j
    set(
        "f3d/f1/fc1/w",
        Tensor::from_fn(&[2 * he, 3 * d], |i| {
            let (r, col) = (i / (3 * d), i % (3 * d));
            if r < he && col == r {
                1.0
            } else if r >= he && col == r - he {
                -1.0
            } else {
                0.0
            }
        }),
    );
    set("f3d/f1/fc1/b", Tensor::zeros(&[2 * he]));
    set(
        "f3d/f1/fc2/w",
        Tensor::from_fn(&[d, 2 * he], |i| {
            let (r, col) = (i / (2 * he), i % (2 * he));
            if r < he {
                if col == r {
                    -1.0
                } else if col == r + he {
                    1.0
                } else {
                    0.0
                }
            } else if r < he + c && col < he {
                enc2_w.data()[(r - he) * he + col]
            } else {
                0.0
            }
        }),
    );
    set(
        "f3d/f1/fc2/b",
        Tensor::from_fn(&[d], |r| {
            if (he..he + c).contains(&r) {
                enc2_b.data()[r - he]
            } else {
                0.0
            }
        }),
    );
    f
}

pub fn small_ae(seed: u64) -> VideoAE {
    VideoAE::new(AeConfig {
        latent_channels: 4,
        hidden: 12,
        seed,
        ..AeConfig::default()
    })
}

pub mod stack {
    use stitch3d::align::RewardModels;
    use stitch3d::nets::{
        AeConfig, Critic, CriticConfig, F3dConfig, Feedforward3D, FlowConfig, FlowGenerator, LatentStats, VideoAE,
    };
    use stitch3d::stitch::{assemble, collect_activations, scan, AdapterConfig, StitchedModel};
    use stitch3d::world::generate_dataset;

    /// Untrained but complete reward pipeline on 8×8 frames, 2 views,
    /// 2 classes; latents are `[2, 4, 2, 2]` (32 values).
    pub struct Stack {
        pub ae: VideoAE,
        pub stitched: StitchedModel,
        pub critic: Critic,
        pub stats: LatentStats,
    }

    pub const LATENT: [usize; 4] = [2, 4, 2, 2];

    impl Stack {
        pub fn new(seed: u64) -> Stack {
            let ae = VideoAE::new(AeConfig {
                latent_channels: 4,
                hidden: 12,
                seed,
                ..AeConfig::default()
            });
            let f = Feedforward3D::new(
                F3dConfig {
                    layers: 3,
                    width: 8,
                    hidden: 12,
                    pose_hidden: 6,
                    seed,
                    ..F3dConfig::default()
                },
                8,
                8,
            )
            .unwrap();
            let data = generate_dataset(6, 2, 2, 8, 8, seed).unwrap();
            let acts = collect_activations(&ae, &f, &data.samples, &[1, 2]).unwrap();
            let fit = scan(&acts, None).unwrap();
            let stitched = assemble(
                &ae,
                fit.s(),
                &f,
                fit.k_star,
                AdapterConfig { rank: 2, alpha: 2.0 },
                seed,
            )
            .unwrap();
            let mut critic = Critic::new(
                CriticConfig {
                    width: 8,
                    seed,
                    ..CriticConfig::default()
                },
                8 * 8 * 3,
                2,
            );
            critic.freeze();
            let stats = LatentStats {
                mean: vec![0.0; 4],
                std: vec![1.0; 4],
            };
            Stack {
                ae,
                stitched,
                critic,
                stats,
            }
        }

        pub fn models(&self) -> RewardModels<'_> {
            RewardModels {
                stitched: &self.stitched,
                autoencoder: &self.ae,
                stats: &self.stats,
                critic: &self.critic,
                latent_shape: LATENT,
            }
        }
    }

    /// Generator with 128 parameters over a 4-value latent.
    pub fn tiny_generator(seed: u64) -> FlowGenerator {
        FlowGenerator::new(
            FlowConfig {
                hidden: 8,
                depth: 1,
                time_dim: 4,
                class_dim: 2,
                seed,
                ..FlowConfig::default()
            },
            4,
            2,
        )
    }

    pub fn stack_generator(seed: u64) -> FlowGenerator {
        FlowGenerator::new(
            FlowConfig {
                hidden: 16,
                depth: 1,
                time_dim: 4,
                class_dim: 2,
                seed,
                ..FlowConfig::default()
            },
            32,
            2,
        )
    }
}

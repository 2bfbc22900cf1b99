//! Rollout gradient contract checks shared by the alignment tests and the
//! acceptance harness. Each returns the measured error so callers can
//! assert or report it.

use stitch3d::align::{rollout, rollout_steps, total_reward, RewardWeights, RolloutConfig};
use stitch3d::nets::flow::standard_normal;
use stitch3d::nets::FlowGenerator;
use stitch3d::tensor::{Tape, Tensor};

use super::stack::{stack_generator, tiny_generator, Stack};

pub fn z1(dim: usize, seed: u64) -> Tensor {
    Tensor::new(&[1, dim], standard_normal(dim, seed)).unwrap()
}

/// Gradient of `c·z_0` w.r.t. every generator parameter, flattened.
pub fn param_grad(gen: &FlowGenerator, c: &[f64], t: usize, t_train: &[usize]) -> Vec<f64> {
    let tape = Tape::new();
    let p = gen.store.bind(&tape);
    let z = tape.constant(z1(gen.dim, 7));
    let trace = rollout_steps(gen, &p, &z, &[1], t, t_train).unwrap();
    let w = tape.constant(Tensor::new(&[1, gen.dim], c.to_vec()).unwrap());
    let g = tape.backward(&trace.z0.mul(&w).unwrap().sum()).unwrap();
    p.grads(&g)
        .into_iter()
        .zip(gen.store.ids())
        .flat_map(|(g, id)| {
            g.map(|t| t.into_data())
                .unwrap_or_else(|| vec![0.0; gen.store.get(id).numel()])
        })
        .collect()
}

/// Largest parameter-gradient entry of the full reward when no step is
/// gradient-enabled; the contract requires exactly 0.
pub fn zero_k_max_gradient(seed: u64) -> f64 {
    let stack = Stack::new(seed);
    let gen = stack_generator(seed + 1);
    let tape = Tape::new();
    let p = gen.store.bind(&tape);
    let z = tape.constant(z1(gen.dim, seed + 2));
    let cfg = RolloutConfig {
        t1: 3,
        t2: 6,
        k: 0,
        seed: seed + 3,
    };
    let trace = rollout(&gen, &p, &z, &[0], &cfg).unwrap();
    assert!(trace.t_train.is_empty());
    let (total, b) = total_reward(&trace.z0, 0, stack.models(), RewardWeights::default(), seed + 4).unwrap();
    assert!(b.is_consistent());
    let g = tape.backward(&total).unwrap();
    p.grads(&g)
        .into_iter()
        .flatten()
        .flat_map(|t| t.into_data())
        .fold(0.0, |m, x| m.max(x.abs()))
}

/// For every single enabled step `j` of a `t`-step rollout, compares the
/// engine's `d(c·z_0)/dθ` with central differences of the analytic term
/// `−Δτ·c·v_θ(z_{τ_j}, τ_j)`. Returns the worst `|a − n| / tol` with
/// `tol = max(1e-5·max(|a|,|n|), 1e-7)`; passing means ≤ 1.
pub fn single_step_worst_ratio(seed: u64, t: usize) -> f64 {
    let gen = tiny_generator(seed);
    assert!(gen.store.iter().map(|(_, t)| t.numel()).sum::<usize>() <= 200);
    let c = [0.7, -1.3, 0.4, 2.0];
    let mut worst = 0.0f64;
    for j in 1..=t {
        let engine = param_grad(&gen, &c, t, &[j]);
        // state entering step j, from an untracked replay
        let mut z = z1(4, 7).into_data();
        let dt = 1.0 / t as f64;
        for i in 1..j {
            let v = gen.velocity_tensor(&z, 1.0 - (i - 1) as f64 * dt, 1).unwrap();
            z.iter_mut().zip(&v).for_each(|(a, b)| *a -= dt * b);
        }
        let tau = 1.0 - (j - 1) as f64 * dt;
        let h = 1e-6;
        let mut k = 0;
        for id in gen.store.ids().collect::<Vec<_>>() {
            for e in 0..gen.store.get(id).numel() {
                let eval = |delta: f64| {
                    let mut g2 = gen.clone();
                    g2.store.get_mut(id).data_mut()[e] += delta;
                    let v = g2.velocity_tensor(&z, tau, 1).unwrap();
                    -dt * v.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = engine[k];
                let tol = (1e-5 * a.abs().max(fd.abs())).max(1e-7);
                worst = worst.max((a - fd).abs() / tol);
                k += 1;
            }
        }
    }
    worst
}

/// Largest deviation of `dz_0/dz_1` from the identity on a 4-value latent.
pub fn noise_jacobian_error(seed: u64) -> f64 {
    let gen = tiny_generator(seed);
    let tape = Tape::new();
    let p = gen.store.bind(&tape);
    let z = tape.var(z1(4, seed + 6));
    let trace = rollout_steps(&gen, &p, &z, &[0], 8, &[2, 5]).unwrap();
    let mut worst = 0.0f64;
    for i in 0..4 {
        let g = tape.backward(&trace.z0.index_select(1, &[i]).unwrap().sum()).unwrap();
        for (j, &x) in g.get(&z).data().iter().enumerate() {
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((x - want).abs());
        }
    }
    worst
}

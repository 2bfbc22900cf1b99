mod common;

use common::rollout::{self, param_grad, z1};
use common::stack::{stack_generator, tiny_generator, Stack};
use stitch3d::align::{
    align, align_optimizer, evaluate_prompts, read_align_csv, reward_consistency, reward_quality, rollout,
    rollout_steps, write_align_csv, AlignConfig, LatentData, RewardWeights, RolloutConfig,
};
use stitch3d::rng;
use stitch3d::tensor::{Tape, Tensor};

#[test]
fn zero_gradient_steps_give_zero_reward_gradient() {
    assert_eq!(rollout::zero_k_max_gradient(1), 0.0);
}

#[test]
fn one_step_rollout_is_a_single_euler_update() {
    let gen = tiny_generator(1);
    let tape = Tape::new();
    let p = gen.store.bind(&tape);
    let start = z1(4, 9);
    let z = tape.constant(start.clone());
    let cfg = RolloutConfig {
        t1: 1,
        t2: 1,
        k: 1,
        seed: 0,
    };
    let trace = rollout(&gen, &p, &z, &[0], &cfg).unwrap();
    assert_eq!((trace.t, trace.t_train.clone()), (1, vec![1]));
    let v = gen.velocity_tensor(start.data(), 1.0, 0).unwrap();
    for ((z, s), v) in trace.z0.data().iter().zip(start.data()).zip(&v) {
        assert_eq!(*z, s - v);
    }
}

#[test]
fn single_step_gradient_matches_analytic_term() {
    for seed in [3, 8] {
        let worst = rollout::single_step_worst_ratio(seed, 6);
        assert!(worst <= 1.0, "seed {seed}: worst ratio {worst}");
    }
}

#[test]
fn gradients_over_disjoint_step_sets_add() {
    let gen = tiny_generator(4);
    let c = [1.0, 0.5, -0.25, 2.0];
    let t = 5;
    let all = param_grad(&gen, &c, t, &[1, 2, 3, 4, 5]);
    let four = param_grad(&gen, &c, t, &[1, 2, 3, 4]);
    let last = param_grad(&gen, &c, t, &[5]);
    for ((a, b), l) in all.iter().zip(&four).zip(&last) {
        assert!((a - (b + l)).abs() < 1e-12);
    }
}

#[test]
fn final_latent_moves_one_to_one_with_noise() {
    assert!(rollout::noise_jacobian_error(5) < 1e-8);
}

#[test]
fn rollouts_are_deterministic_and_reject_excess_steps() {
    let gen = tiny_generator(6);
    let run = || {
        let tape = Tape::new();
        let p = gen.store.bind(&tape);
        let z = tape.constant(z1(4, 1));
        let tr = rollout(
            &gen,
            &p,
            &z,
            &[1],
            &RolloutConfig {
                t1: 10,
                t2: 50,
                k: 2,
                seed: 9,
            },
        )
        .unwrap();
        (tr.t, tr.t_train.clone(), tr.z0.value().clone())
    };
    let a = run();
    assert_eq!(a, run());
    assert!((10..=50).contains(&a.0));
    assert_eq!(a.1.len(), 2);
    let tape = Tape::new();
    let p = gen.store.bind(&tape);
    let z = tape.constant(z1(4, 1));
    assert!(rollout_steps(&gen, &p, &z, &[1], 2, &[1, 2, 3]).is_err());
    assert!(rollout(
        &gen,
        &p,
        &z,
        &[1],
        &RolloutConfig {
            t1: 2,
            t2: 3,
            k: 3,
            seed: 0
        }
    )
    .is_err());
}

#[test]
fn quality_reward_is_order_invariant_and_uniform_for_flat_critic() {
    let mut stack = Stack::new(2);
    let tape = Tape::new();
    let mut r = rng::seeded(3);
    let imgs = Tensor::uniform(&[2, 8, 8, 3], 0.0, 1.0, &mut r);
    let swapped = Tensor::new(&[2, 8, 8, 3], [&imgs.data()[192..], &imgs.data()[..192]].concat()).unwrap();
    let a = reward_quality(&stack.critic, &tape.constant(imgs.clone()), 1)
        .unwrap()
        .item();
    let b = reward_quality(&stack.critic, &tape.constant(swapped), 1)
        .unwrap()
        .item();
    assert!((a - b).abs() < 1e-15);
    let id = stack.critic.store.id("critic/fc2/w").unwrap();
    stack.critic.store.set(id, Tensor::zeros(&[2, 8])).unwrap();
    let u = reward_quality(&stack.critic, &tape.constant(imgs), 0).unwrap().item();
    assert!((u - 0.5f64.ln()).abs() < 1e-12);
}

#[test]
fn consistency_reward_is_symmetric_and_non_positive() {
    let tape = Tape::new();
    let mut r = rng::seeded(4);
    for _ in 0..10 {
        let a = tape.constant(Tensor::uniform(&[2, 8, 8, 3], 0.0, 1.0, &mut r));
        let b = tape.constant(Tensor::uniform(&[2, 8, 8, 3], 0.0, 1.0, &mut r));
        let x = reward_consistency(&a, &b).unwrap().item();
        assert_eq!(x, reward_consistency(&b, &a).unwrap().item());
        assert!(x <= 0.0);
    }
    let bad = tape.constant(Tensor::zeros(&[1, 8, 8, 3]));
    let a = tape.constant(Tensor::zeros(&[2, 8, 8, 3]));
    assert!(reward_consistency(&a, &bad).is_err());
}

#[test]
fn zero_reward_weights_reduce_to_flow_matching() {
    let stack = Stack::new(3);
    let mut r = rng::seeded(5);
    let latents = Tensor::randn(&[6, 32], 1.0, &mut r);
    let classes = vec![0, 1, 0, 1, 0, 1];
    let data = LatentData {
        latents: &latents,
        classes: &classes,
    };
    let cfg = AlignConfig {
        steps: 3,
        t1: 2,
        t2: 4,
        gen_batch: 4,
        weights: RewardWeights {
            quality_mv: 0.0,
            quality_3d: 0.0,
            consistency: 0.0,
        },
        ..AlignConfig::default()
    };
    let mut gen = stack_generator(6);
    let mut opt = align_optimizer(&cfg);
    let logs = align(&mut gen, &mut opt, data, stack.models(), &cfg).unwrap();
    for l in &logs {
        assert_eq!(l.reward.total, 0.0);
        assert_eq!(l.l_total, l.l_gen);
    }
    assert!(logs[0].l_gen.is_finite());
}

#[test]
fn alignment_is_deterministic_and_logs_round_trip() {
    let stack = Stack::new(4);
    let mut r = rng::seeded(6);
    let latents = Tensor::randn(&[6, 32], 1.0, &mut r);
    let classes = vec![0, 1, 0, 1, 0, 1];
    let data = LatentData {
        latents: &latents,
        classes: &classes,
    };
    let cfg = AlignConfig {
        steps: 3,
        t1: 2,
        t2: 4,
        gen_batch: 4,
        ..AlignConfig::default()
    };
    let run = || {
        let mut gen = stack_generator(7);
        let mut opt = align_optimizer(&cfg);
        let logs = align(&mut gen, &mut opt, data, stack.models(), &cfg).unwrap();
        (logs, gen.store.to_table())
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    assert!(a.iter().all(|l| l.reward.is_consistent() && l.reward.cons <= 0.0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("align.csv");
    write_align_csv(&path, &a).unwrap();
    for row in read_align_csv(&path).unwrap() {
        let w = RewardWeights::default();
        assert!((row[3] - w.combine(row[0], row[1], row[2])).abs() < 1e-12);
    }
    let mut gen = stack_generator(7);
    gen.attach_adapters(8, 16.0, 0).unwrap();
    let eval = evaluate_prompts(&gen, stack.models(), &cfg, 3, 1).unwrap();
    assert_eq!(eval.len(), 3);
}

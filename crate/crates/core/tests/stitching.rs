mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use stitch3d::nets::feedforward::batch_frames;
use stitch3d::nets::{F3dConfig, Feedforward3D};
use stitch3d::rng;
use stitch3d::stitch::{
    assemble, collect_activations, finetune_stitched, fit_stitch, pseudo_targets, scan, select_layer, stitch_mse,
    AdapterConfig, FinetuneConfig, PseudoTarget,
};
use stitch3d::tensor::{Tape, Tensor};
use stitch3d::world::{generate_dataset, Sample};
use stitch3d::Error;

const ADAPTER: AdapterConfig = AdapterConfig { rank: 4, alpha: 2.0 };

fn tiny_f(seed: u64) -> Feedforward3D {
    Feedforward3D::new(
        F3dConfig {
            layers: 4,
            width: 8,
            hidden: 12,
            pose_hidden: 6,
            seed,
            ..F3dConfig::default()
        },
        16,
        16,
    )
    .unwrap()
}

fn scenes(n: usize, seed: u64) -> Vec<Sample> {
    generate_dataset(n, 4, 2, 16, 16, seed).unwrap().samples
}

#[test]
fn identity_design_returns_targets() {
    let b = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
    let mut r = rng::seeded(3);
    let a = Tensor::randn(&[4, 3], 1.0, &mut r);
    let (s, mse) = fit_stitch(&b, &a, 0.0).unwrap();
    assert!(s.max_abs_diff(&a) < 1e-15);
    assert!(mse < 1e-30);
}

#[test]
fn hand_solved_normal_equations() {
    let b = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
    let a = Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap();
    let (s, mse) = fit_stitch(&b, &a, 0.0).unwrap();
    assert!((s.data()[0] - 0.6).abs() < 1e-15);
    assert!((mse - 0.1).abs() < 1e-15);
    let oracle = common::gd_least_squares(&b, &a, 0.0, 10_000);
    assert!((oracle.data()[0] - 0.6).abs() < 1e-12);
}

#[test]
fn matches_gradient_descent_oracle_with_ridge() {
    let mut r = rng::seeded(8);
    let b = Tensor::randn(&[64, 9], 1.0, &mut r);
    let a = Tensor::randn(&[64, 12], 1.0, &mut r);
    for ridge in [0.0, 0.5, 10.0] {
        let (s, _) = fit_stitch(&b, &a, ridge).unwrap();
        let oracle = common::gd_least_squares(&b, &a, ridge, 50_000);
        assert!(s.max_abs_diff(&oracle) < 1e-6, "ridge {ridge}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn residual_is_orthogonal_and_perturbations_hurt(seed in 0u64..10_000, n in 12usize..40, de in 1usize..6, df in 1usize..6) {
        let mut r = rng::seeded(seed);
        let b = Tensor::randn(&[n, de], 1.0, &mut r);
        let a = Tensor::randn(&[n, df], 1.0, &mut r);
        let (s, mse) = fit_stitch(&b, &a, 0.0).unwrap();
        let resid = b.matmul(&s).unwrap().sub(&a).unwrap();
        let orth = b.transpose().unwrap().matmul(&resid).unwrap();
        prop_assert!(orth.data().iter().all(|v| v.abs() < 1e-8));
        let mut delta = Tensor::randn(&[de, df], 1.0, &mut r);
        let scale = 1e-3 / delta.norm();
        delta.data_mut().iter_mut().for_each(|x| *x *= scale);
        let moved = s.add(&delta).unwrap();
        prop_assert!(stitch_mse(&b, &a, &moved).unwrap() > mse);
    }

    #[test]
    fn selection_is_an_argmin(values in proptest::collection::vec(0.0f64..1.0, 1..8)) {
        let m: BTreeMap<usize, f64> = values.iter().enumerate().map(|(i, &v)| (i + 1, v)).collect();
        let k = select_layer(&m).unwrap();
        let best = values.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(m[&k], best);
        prop_assert!(m.iter().filter(|(_, &v)| v == best).all(|(&j, _)| j >= k));
    }
}

#[test]
fn selection_examples() {
    assert_eq!(select_layer(&[(1, 0.5), (2, 0.1), (3, 0.3)].into()).unwrap(), 2);
    assert_eq!(select_layer(&[(1, 0.1), (2, 0.1)].into()).unwrap(), 1);
    assert_eq!(select_layer(&[(4, 0.2)].into()).unwrap(), 4);
}

#[test]
fn identical_scenes_give_identical_rows() {
    let ae = common::small_ae(1);
    let f = tiny_f(2);
    let one = scenes(1, 5).remove(0);
    let data = collect_activations(&ae, &f, &[one.clone(), one], &[1, 3]).unwrap();
    let half = data.b.shape()[0] / 2;
    let w = data.b.shape()[1];
    assert_eq!(data.b.data()[..half * w], data.b.data()[half * w..]);
    assert_eq!(data.a.len(), 2);
    let a3 = &data.a[&3];
    let d = a3.shape()[1];
    assert_eq!(a3.data()[..half * d], a3.data()[half * d..]);
    assert!(data.b.data().chunks(w).all(|row| row[w - 1] == 1.0));
}

#[test]
fn permuting_scenes_permutes_rows() {
    let ae = common::small_ae(1);
    let f = tiny_f(2);
    let s = scenes(3, 6);
    let fwd = collect_activations(&ae, &f, &s, &[2]).unwrap();
    let rev: Vec<Sample> = s.iter().rev().cloned().collect();
    let bwd = collect_activations(&ae, &f, &rev, &[2]).unwrap();
    let per = fwd.b.numel() / 3;
    let per_a = fwd.a[&2].numel() / 3;
    for i in 0..3 {
        let j = 2 - i;
        assert_eq!(
            fwd.b.data()[i * per..(i + 1) * per],
            bwd.b.data()[j * per..(j + 1) * per]
        );
        assert_eq!(
            fwd.a[&2].data()[i * per_a..(i + 1) * per_a],
            bwd.a[&2].data()[j * per_a..(j + 1) * per_a]
        );
    }
}

#[test]
fn collection_rejects_bad_layers_and_too_few_rows() {
    let ae = common::small_ae(1);
    let f = tiny_f(2);
    let s = scenes(1, 7);
    assert!(matches!(
        collect_activations(&ae, &f, &s, &[4]),
        Err(Error::InvalidArgument(_))
    ));
    assert!(matches!(
        collect_activations(&ae, &f, &s, &[0]),
        Err(Error::InvalidArgument(_))
    ));
    assert!(collect_activations(&ae, &f, &[], &[1]).is_err());
    // one token per frame: 2 rows for 5 unknowns
    let small = generate_dataset(1, 2, 2, 8, 8, 1).unwrap().samples;
    let f_small = Feedforward3D::new(
        F3dConfig {
            layers: 2,
            width: 8,
            hidden: 8,
            patch: 8,
            ..F3dConfig::default()
        },
        8,
        8,
    )
    .unwrap();
    match collect_activations(&ae, &f_small, &small, &[1]) {
        Err(Error::InvalidArgument(m)) => assert!(m.contains("add samples")),
        other => panic!("expected a row-count error, got {other:?}"),
    }
}

#[test]
fn constructed_linear_tap_network_stitches_exactly() {
    let ae = common::small_ae(4);
    let f = common::linear_tap_network(&ae, 16, 16, 3, 9);
    let s = scenes(6, 10);
    let data = collect_activations(&ae, &f, &s, &[1]).unwrap();
    let (map, mse) = fit_stitch(&data.b, &data.a[&1], 0.0).unwrap();
    assert!(mse < 1e-24, "mse {mse}");
    let model = assemble(&ae, &map, &f, 1, ADAPTER, 0).unwrap();
    let held = scenes(2, 11);
    for sample in &held {
        let a = f.predict(&sample.views.frames, 2).unwrap();
        let b = model.predict_frames(&sample.views.frames, 2).unwrap();
        assert!(a.coords.max_abs_diff(&b.coords) < 1e-8);
        assert!(a.confidence.max_abs_diff(&b.confidence) < 1e-8);
        for (p, q) in a.pose.iter().zip(&b.pose) {
            assert!(p.raw.iter().zip(q.raw).all(|(x, y)| (x - y).abs() < 1e-8));
        }
    }
}

#[test]
fn last_layer_stitch_keeps_only_one_block() {
    let ae = common::small_ae(1);
    let f = tiny_f(2);
    let s = scenes(4, 12);
    let data = collect_activations(&ae, &f, &s, &[3]).unwrap();
    let fit = scan(&data, None).unwrap();
    assert_eq!(fit.k_star, 3);
    let model = assemble(&ae, fit.s(), &f, 3, ADAPTER, 0).unwrap();
    let tape = Tape::new();
    let p = model.net.store.bind(&tape);
    let frames = tape.constant(s[0].views.frames.clone());
    let out = model.forward_frames(&p, &frames, 2).unwrap();
    assert_eq!(out.taps.len(), 1);
}

#[test]
fn assemble_rejects_wrong_map_shape() {
    let ae = common::small_ae(1);
    let f = tiny_f(2);
    assert!(matches!(
        assemble(&ae, &Tensor::zeros(&[5, 7]), &f, 1, ADAPTER, 0),
        Err(Error::Shape { .. })
    ));
    assert!(assemble(&ae, &Tensor::zeros(&[5, 8]), &f, 4, ADAPTER, 0).is_err());
}

#[test]
fn encoder_receives_no_gradient() {
    let ae = common::small_ae(1);
    let f = tiny_f(2);
    let s = scenes(4, 13);
    let data = collect_activations(&ae, &f, &s, &[2]).unwrap();
    let fit = scan(&data, None).unwrap();
    let model = assemble(&ae, fit.s(), &f, 2, ADAPTER, 0).unwrap();
    assert_eq!(model.encoder.store.trainable_count(), 0);
    let tape = Tape::new();
    let p = model.net.store.bind(&tape);
    let pe = model.encoder.store.bind(&tape);
    let x = tape.constant(batch_frames(&[&s[0]]).unwrap());
    let z = model.encoder.encode(&pe, &x).unwrap();
    let out = model.forward_latent(&p, &z, 2).unwrap();
    let loss = out.coords.sum().add(&out.pose.sum()).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert!(pe.grads(&g).iter().all(Option::is_none));
    let trained = p.grads(&g).iter().filter(|x| x.is_some()).count();
    let trainable = model
        .net
        .store
        .ids()
        .filter(|&id| model.net.store.is_trainable(id))
        .count();
    assert_eq!(trained, trainable);
}

#[test]
fn zero_epochs_leave_model_bit_identical() {
    let ae = common::small_ae(1);
    let f = tiny_f(2);
    let s = scenes(4, 14);
    let data = collect_activations(&ae, &f, &s, &[1, 2]).unwrap();
    let fit = scan(&data, None).unwrap();
    let mut model = assemble(&ae, fit.s(), &f, fit.k_star, ADAPTER, 0).unwrap();
    let before = model.predict_frames(&s[0].views.frames, 2).unwrap();
    let targets = pseudo_targets(&f, &s, 0.5).unwrap();
    let cfg = FinetuneConfig {
        epochs: 0,
        ..FinetuneConfig::default()
    };
    let curve = finetune_stitched(&mut model, &s, &targets, &cfg).unwrap();
    assert!(curve.is_empty());
    assert_eq!(model.predict_frames(&s[0].views.frames, 2).unwrap(), before);
    // zero-initialized adapters: the closed-form stitch through the bare tail
    let tape = Tape::new();
    let pf = f.store.bind_frozen(&tape);
    let pe = ae.store.bind_frozen(&tape);
    let z = ae.encode(&pe, &tape.constant(s[0].views.frames.clone())).unwrap();
    let rows = stitch3d::stitch::with_bias(&stitch3d::stitch::latent_rows(&z, f.grid()).unwrap()).unwrap();
    let tokens = rows.matmul(&tape.constant(fit.s().clone())).unwrap();
    let bare = f.forward_from(&pf, fit.k_star, &tokens, 2).unwrap();
    assert_eq!(bare.coords.value(), &before.coords);
}

#[test]
fn self_distillation_is_a_fixed_point() {
    let ae = common::small_ae(1);
    let f = tiny_f(2);
    let s = scenes(4, 15);
    let data = collect_activations(&ae, &f, &s, &[2]).unwrap();
    let fit = scan(&data, None).unwrap();
    let mut model = assemble(&ae, fit.s(), &f, 2, ADAPTER, 0).unwrap();
    let targets: Vec<PseudoTarget> = s
        .iter()
        .map(|x| {
            let prediction = model.predict_frames(&x.views.frames, 2).unwrap();
            let mask = prediction.confidence.data().iter().map(|&c| c > 0.5).collect();
            PseudoTarget { prediction, mask }
        })
        .collect();
    let s_before = model.net.store.get(model.s).clone();
    let cfg = FinetuneConfig {
        epochs: 1,
        ..FinetuneConfig::default()
    };
    let curve = finetune_stitched(&mut model, &s, &targets, &cfg).unwrap();
    assert!(curve[0] < 1e-12, "loss {}", curve[0]);
    assert!(model.net.store.get(model.s).max_abs_diff(&s_before) < 1e-3);
}

#[test]
fn finetuning_reduces_distillation_loss() {
    let ae = common::small_ae(1);
    let f = tiny_f(2);
    let s = scenes(8, 16);
    let data = collect_activations(&ae, &f, &s, &[2]).unwrap();
    let fit = scan(&data, None).unwrap();
    let mut model = assemble(&ae, fit.s(), &f, 2, ADAPTER, 0).unwrap();
    let targets = pseudo_targets(&f, &s, 0.5).unwrap();
    let cfg = FinetuneConfig {
        epochs: 12,
        lr: 2e-3,
        batch_scenes: 2,
        ..FinetuneConfig::default()
    };
    let curve = finetune_stitched(&mut model, &s, &targets, &cfg).unwrap();
    assert!(curve.last().unwrap() < &curve[0], "{curve:?}");
}

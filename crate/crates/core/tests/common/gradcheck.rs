//! Central finite-difference oracle for every differentiable tape op.
//!
//! Each graph maps its inputs to a tensor `y`; the checked scalar is
//! `Σ y ⊙ w` for a fixed random `w`, so every output entry contributes.
//! An entry passes when `|analytic − numeric| ≤ max(REL·max(|a|,|n|), ABS)`.

use rand::seq::SliceRandom;
use rand::Rng as _;

use stitch3d::rng::{self, Rng};
use stitch3d::tensor::{ResampleMode, Tape, Tensor, Var};

pub const H: f64 = 1e-5;
pub const REL: f64 = 1e-5;
pub const ABS: f64 = 1e-7;
pub const GRAPHS_PER_OP: usize = 20;

type Graph = Box<dyn for<'t> Fn(&[Var<'t>]) -> Var<'t>>;

pub struct Case {
    inputs: Vec<Tensor>,
    graph: Graph,
}

fn case(inputs: Vec<Tensor>, graph: impl for<'t> Fn(&[Var<'t>]) -> Var<'t> + 'static) -> Case {
    Case {
        inputs,
        graph: Box::new(graph),
    }
}

pub struct OpReport {
    pub op: &'static str,
    pub graphs: usize,
    pub entries: usize,
    /// Largest `|a − n| / tolerance`; the op passes when ≤ 1.
    pub worst_ratio: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.graphs >= GRAPHS_PER_OP && self.worst_ratio <= 1.0
    }
}

fn dim(r: &mut Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

fn shape(r: &mut Rng, max_rank: usize) -> Vec<usize> {
    let rank = dim(r, 1, max_rank);
    (0..rank).map(|_| dim(r, 1, 4)).collect()
}

fn normal(r: &mut Rng, s: &[usize]) -> Tensor {
    Tensor::randn(s, 1.0, r)
}

/// Entries bounded away from zero, for ops with a kink there.
fn off_zero(r: &mut Rng, s: &[usize]) -> Tensor {
    let n: usize = s.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(0.1..2.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(s, data).unwrap()
}

fn build(op: &'static str, r: &mut Rng) -> Case {
    match op {
        "add" | "sub" | "mul" => {
            let s = shape(r, 3);
            let (a, b) = (normal(r, &s), normal(r, &s));
            match op {
                "add" => case(vec![a, b], |v| v[0].add(&v[1]).unwrap()),
                "sub" => case(vec![a, b], |v| v[0].sub(&v[1]).unwrap()),
                _ => case(vec![a, b], |v| v[0].mul(&v[1]).unwrap()),
            }
        }
        "scale" => {
            let c = r.random_range(-3.0..3.0);
            let s = shape(r, 3);
            case(vec![normal(r, &s)], move |v| v[0].scale(c))
        }
        "add_scalar" => {
            let c = r.random_range(-3.0..3.0);
            let s = shape(r, 3);
            case(vec![normal(r, &s)], move |v| v[0].add_scalar(c).square())
        }
        "neg" => {
            let s = shape(r, 3);
            case(vec![normal(r, &s)], |v| v[0].neg())
        }
        "tanh" | "gelu" | "sigmoid" | "softplus" | "exp" | "square" => {
            let s = shape(r, 3);
            let x = normal(r, &s);
            match op {
                "tanh" => case(vec![x], |v| v[0].tanh()),
                "gelu" => case(vec![x], |v| v[0].gelu()),
                "sigmoid" => case(vec![x], |v| v[0].sigmoid()),
                "softplus" => case(vec![x], |v| v[0].softplus()),
                "exp" => case(vec![x], |v| v[0].exp()),
                _ => case(vec![x], |v| v[0].square()),
            }
        }
        "ln" => {
            let s = shape(r, 3);
            case(vec![Tensor::uniform(&s, 0.5, 3.0, r)], |v| v[0].ln())
        }
        "abs" => {
            let s = shape(r, 3);
            case(vec![off_zero(r, &s)], |v| v[0].abs())
        }
        "sum" => {
            let s = shape(r, 3);
            case(vec![normal(r, &s)], |v| v[0].square().sum())
        }
        "mean" => {
            let s = shape(r, 3);
            case(vec![normal(r, &s)], |v| v[0].tanh().mean())
        }
        "matmul" => {
            let (m, k, n) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 5));
            case(vec![normal(r, &[m, k]), normal(r, &[k, n])], |v| {
                v[0].matmul(&v[1]).unwrap()
            })
        }
        "affine" => {
            let (n, i, o) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 5));
            case(vec![normal(r, &[n, i]), normal(r, &[o, i]), normal(r, &[o])], |v| {
                v[0].affine(&v[1], &v[2]).unwrap()
            })
        }
        "add_row" => {
            let (n, d) = (dim(r, 1, 5), dim(r, 1, 5));
            case(vec![normal(r, &[n, d]), normal(r, &[d])], |v| {
                v[0].add_row(&v[1]).unwrap()
            })
        }
        "transpose" => {
            let (n, d) = (dim(r, 1, 5), dim(r, 1, 5));
            case(vec![normal(r, &[n, d])], |v| v[0].transpose().unwrap())
        }
        "reshape" => {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            case(vec![normal(r, &[a, b])], move |v| v[0].reshape(&[b, a]).unwrap().tanh())
        }
        "gather" => {
            let s = shape(r, 2);
            let n: usize = s.iter().product();
            let m = dim(r, 1, 8);
            let index: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
            case(vec![normal(r, &s)], move |v| {
                v[0].gather(index.clone().into(), &[m]).unwrap()
            })
        }
        "permute" => {
            let s = vec![dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
            let mut perm = vec![0, 1, 2];
            perm.shuffle(r);
            case(vec![normal(r, &s)], move |v| v[0].permute(&perm).unwrap())
        }
        "index_select" => {
            let s = vec![dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 3)];
            let axis = r.random_range(0..3);
            let k = dim(r, 1, 5);
            let idx: Vec<usize> = (0..k).map(|_| r.random_range(0..s[axis])).collect();
            case(vec![normal(r, &s)], move |v| v[0].index_select(axis, &idx).unwrap())
        }
        "concat" => {
            let base = vec![dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
            let axis = r.random_range(0..3);
            let parts = dim(r, 2, 3);
            let inputs = (0..parts)
                .map(|_| {
                    let mut s = base.clone();
                    s[axis] = dim(r, 1, 3);
                    normal(r, &s)
                })
                .collect();
            case(inputs, move |v| {
                let refs: Vec<&Var<'_>> = v.iter().collect();
                Var::concat(&refs, axis).unwrap()
            })
        }
        "resample_nearest" | "resample_bilinear" => {
            let s = vec![dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 5), dim(r, 1, 5)];
            let (oh, ow) = (dim(r, 1, 8), dim(r, 1, 8));
            let mode = if op == "resample_nearest" {
                ResampleMode::Nearest
            } else {
                ResampleMode::Bilinear
            };
            case(vec![normal(r, &s)], move |v| v[0].resample(oh, ow, mode).unwrap())
        }
        "segment_mean" => {
            let (g, groups, d) = (dim(r, 1, 4), dim(r, 1, 3), dim(r, 1, 4));
            case(vec![normal(r, &[g * groups, d])], move |v| {
                v[0].segment_mean(g).unwrap()
            })
        }
        "log_softmax" => {
            let (n, c) = (dim(r, 1, 4), dim(r, 2, 5));
            case(vec![normal(r, &[n, c])], |v| v[0].log_softmax().unwrap())
        }
        "softmax_ce" => {
            let (n, c) = (dim(r, 1, 5), dim(r, 2, 5));
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
            case(vec![normal(r, &[n, c])], move |v| v[0].softmax_ce(&labels).unwrap())
        }
        "l1" => {
            let s = shape(r, 3);
            let x = normal(r, &s);
            let t = x.add(&off_zero(r, &s)).unwrap();
            case(vec![x, t], |v| v[0].l1(&v[1]).unwrap())
        }
        "l2" => {
            let s = shape(r, 3);
            case(vec![normal(r, &s), normal(r, &s)], |v| v[0].l2(&v[1]).unwrap())
        }
        "mlp3" => {
            let (n, d0, d1, d2) = (dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 6), dim(r, 1, 6));
            let inputs = vec![
                normal(r, &[n, d0]),
                normal(r, &[d1, d0]),
                normal(r, &[d1]),
                normal(r, &[d2, d1]),
                normal(r, &[d2]),
                normal(r, &[1, d2]),
                normal(r, &[1]),
            ];
            case(inputs, |v| {
                let h1 = v[0].affine(&v[1], &v[2]).unwrap().tanh();
                let h2 = h1.affine(&v[3], &v[4]).unwrap().gelu();
                h2.affine(&v[5], &v[6]).unwrap().sum()
            })
        }
        other => panic!("no graph builder for `{other}`"),
    }
}

pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "neg",
    "tanh",
    "gelu",
    "sigmoid",
    "softplus",
    "exp",
    "ln",
    "square",
    "abs",
    "sum",
    "mean",
    "matmul",
    "affine",
    "add_row",
    "transpose",
    "reshape",
    "gather",
    "permute",
    "index_select",
    "concat",
    "resample_nearest",
    "resample_bilinear",
    "segment_mean",
    "log_softmax",
    "softmax_ce",
    "l1",
    "l2",
    "mlp3",
];

/// `(entries checked, worst ratio)` for one graph.
fn check_case(c: &Case, w_rng: &mut Rng) -> (usize, f64) {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = c.inputs.iter().map(|t| tape.var(t.clone())).collect();
    let y = (c.graph)(&vars);
    let w = Tensor::randn(y.shape(), 1.0, w_rng);
    let loss = y.mul(&tape.constant(w.clone())).unwrap().sum();
    let grads = tape.backward(&loss).unwrap();

    let eval = |inputs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = (c.graph)(&vars);
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };

    let mut worst = 0.0f64;
    let mut entries = 0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        for j in 0..c.inputs[i].numel() {
            let mut plus = c.inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = c.inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[j];
            let tol = (REL * a.abs().max(numeric.abs())).max(ABS);
            worst = worst.max((a - numeric).abs() / tol);
            entries += 1;
        }
    }
    (entries, worst)
}

pub fn check_op(op: &'static str, graphs: usize) -> OpReport {
    let mut entries = 0;
    let mut worst = 0.0f64;
    for g in 0..graphs {
        let mut r = rng::child(0x6a4d, (op.len() as u64) << 32 | g as u64 ^ fxhash(op));
        let c = build(op, &mut r);
        let (e, w) = check_case(&c, &mut r);
        entries += e;
        worst = worst.max(w);
    }
    OpReport {
        op,
        graphs,
        entries,
        worst_ratio: worst,
    }
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

pub fn run_suite() -> Vec<OpReport> {
    OPS.iter().map(|op| check_op(op, GRAPHS_PER_OP)).collect()
}

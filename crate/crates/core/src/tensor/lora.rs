//! Low-rank adapters on frozen matrices.
//!
//! Convention: for a base matrix `W: [m, n]` and input rows `x: [b, n]` the
//! adapted output is `x · (W + (alpha / r) · up · down)ᵀ`, where
//! `down: [r, n]` and `up: [m, r]`. `up` starts at zero so the adapter is
//! an exact no-op until trained.

use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    pub base: Tensor,
    pub down: Tensor,
    pub up: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

/// Shared adapted product used by both the standalone adapter and the
/// network layers: `x·baseᵀ + s·(x·downᵀ)·upᵀ`.
pub(crate) fn adapted_matmul<'t>(
    x: &Var<'t>,
    base: &Var<'t>,
    down: &Var<'t>,
    up: &Var<'t>,
    scale: f64,
) -> Result<Var<'t>> {
    let main = x.matmul(&base.transpose()?)?;
    let low = x.matmul(&down.transpose()?)?.matmul(&up.transpose()?)?;
    main.add(&low.scale(scale))
}

impl LowRankAdapter {
    /// Zero-initialized `up`, Gaussian `down` with std `1/sqrt(n)`.
    pub fn new<R: Rng + ?Sized>(base: Tensor, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be positive".into()));
        }
        if base.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "adapter base must be a matrix, got {:?}",
                base.shape()
            )));
        }
        let (m, n) = (base.shape()[0], base.shape()[1]);
        Ok(LowRankAdapter {
            down: Tensor::randn(&[rank, n], 1.0 / (n as f64).sqrt(), rng),
            up: Tensor::zeros(&[m, rank]),
            base,
            rank,
            alpha,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Apply to `x: [b, n]`. Only `down` and `up` are tracked; `base` is a
    /// constant on the tape.
    pub fn apply<'t>(&self, tape: &'t Tape, x: &Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        if self.rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be positive".into()));
        }
        let n = self.base.shape()[1];
        if x.shape().len() != 2 || x.shape()[1] != n {
            return Err(Error::shape("adapter_apply", x.shape(), self.base.shape()));
        }
        let base = tape.constant(self.base.clone());
        let down = tape.var(self.down.clone());
        let up = tape.var(self.up.clone());
        let y = adapted_matmul(x, &base, &down, &up, self.scale())?;
        Ok((y, down, up))
    }

    /// `base + (alpha/r)·up·down` as one matrix.
    pub fn merged(&self) -> Tensor {
        let mut w = self.base.clone();
        let delta = self.up.matmul(&self.down).expect("adapter factor shapes agree");
        let s = self.scale();
        w.data_mut().iter_mut().zip(delta.data()).for_each(|(a, d)| *a += s * d);
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_up_reproduces_base_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let ad = LowRankAdapter::new(base.clone(), 2, 4.0, &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[5, 4], 1.0, &mut rng));
        let (y, _, _) = ad.apply(&tape, &x).unwrap();
        let plain = x.value().matmul(&base.transpose().unwrap()).unwrap();
        assert_eq!(y.value(), &plain);
    }

    #[test]
    fn rank_one_hand_example() {
        let ad = LowRankAdapter {
            base: Tensor::zeros(&[1, 2]),
            down: Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap(),
            up: Tensor::new(&[1, 1], vec![1.0]).unwrap(),
            rank: 1,
            alpha: 1.0,
        };
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![5.0, 7.0]).unwrap());
        let (y, _, _) = ad.apply(&tape, &x).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn zero_rank_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(LowRankAdapter::new(Tensor::zeros(&[2, 2]), 0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn only_factors_receive_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ad = LowRankAdapter::new(Tensor::randn(&[2, 3], 1.0, &mut rng), 2, 2.0, &mut rng).unwrap();
        ad.up = Tensor::randn(&[2, 2], 1.0, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
        let (y, down, up) = ad.apply(&tape, &x).unwrap();
        let grads = tape.backward(&y.square().sum()).unwrap();
        assert!(grads.try_get(&down).is_some());
        assert!(grads.try_get(&up).is_some());
        // base is bound as a constant: the tape holds no leaf for it
        assert_eq!(tape.len(), 2 + 8);
    }

    #[test]
    fn merged_matches_factored_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ad = LowRankAdapter::new(Tensor::randn(&[5, 6], 1.0, &mut rng), 3, 6.0, &mut rng).unwrap();
        ad.up = Tensor::randn(&[5, 3], 0.5, &mut rng);
        let tape = Tape::new();
        let xt = Tensor::randn(&[7, 6], 1.0, &mut rng);
        let x = tape.constant(xt.clone());
        let (y, _, _) = ad.apply(&tape, &x).unwrap();
        let merged = xt.matmul(&ad.merged().transpose().unwrap()).unwrap();
        for (a, b) in y.data().iter().zip(merged.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}

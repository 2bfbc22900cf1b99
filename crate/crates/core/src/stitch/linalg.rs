use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pivots below this fraction of the largest diagonal entry count as zero.
const PIVOT_TOL: f64 = 1e-12;

/// `BᵀB` of a `[n, d]` matrix, row-major `d×d`.
pub fn gram(b: &Tensor) -> Vec<f64> {
    let (n, d) = (b.shape()[0], b.shape()[1]);
    let mut g = vec![0.0; d * d];
    for r in 0..n {
        let row = &b.data()[r * d..(r + 1) * d];
        for i in 0..d {
            let bi = row[i];
            if bi == 0.0 {
                continue;
            }
            for j in i..d {
                g[i * d + j] += bi * row[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            g[i * d + j] = g[j * d + i];
        }
    }
    g
}

/// Solves `G·X = R` for symmetric positive definite `G: n×n` and
/// `R: n×m`, both row-major.
pub fn cholesky_solve(g: &[f64], n: usize, rhs: &[f64], m: usize) -> Result<Vec<f64>> {
    if g.len() != n * n || rhs.len() != n * m {
        return Err(Error::shape("cholesky_solve", &[n, n], &[rhs.len() / m.max(1), m]));
    }
    let max_diag = (0..n).map(|i| g[i * n + i].abs()).fold(0.0, f64::max);
    let tol = PIVOT_TOL * max_diag.max(f64::MIN_POSITIVE);
    // lower factor, G = L·Lᵀ
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = g[j * n + j];
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !(diag > tol) {
            return Err(Error::Singular(format!(
                "normal matrix is not positive definite (pivot {j} = {diag:e})"
            )));
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut v = g[i * n + j];
            for k in 0..j {
                v -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = v / ljj;
        }
    }
    let mut x = rhs.to_vec();
    for c in 0..m {
        for i in 0..n {
            let mut v = x[i * m + c];
            for k in 0..i {
                v -= l[i * n + k] * x[k * m + c];
            }
            x[i * m + c] = v / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut v = x[i * m + c];
            for k in i + 1..n {
                v -= l[k * n + i] * x[k * m + c];
            }
            x[i * m + c] = v / l[i * n + i];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn solves_spd_system() {
        let mut r = rng::seeded(4);
        let b = Tensor::randn(&[20, 5], 1.0, &mut r);
        let g = gram(&b);
        let x_true = Tensor::randn(&[5, 3], 1.0, &mut r);
        let rhs = Tensor::new(&[5, 5], g.clone()).unwrap().matmul(&x_true).unwrap();
        let x = cholesky_solve(&g, 5, rhs.data(), 3).unwrap();
        for (a, b) in x.iter().zip(x_true.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn rank_deficient_is_singular() {
        // duplicated column
        let b = Tensor::from_fn(&[6, 3], |i| {
            if i % 3 == 2 {
                ((i - 1) / 3) as f64
            } else {
                (i / 3) as f64
            }
        });
        let g = gram(&b);
        assert!(matches!(cholesky_solve(&g, 3, &[1.0; 3], 1), Err(Error::Singular(_))));
    }
}

//! Symmetric positive-definite solves and the ridge normal equations.

use crate::error::{dim_err, Error, Result};
use crate::linalg::mat::{check_finite, Mat};

/// Diagonal jitter multipliers (times `trace(A)/d`) tried after a failed
/// factorization, in order.
pub const JITTER_LADDER: [f64; 3] = [1e-12, 1e-10, 1e-8];

const SYMMETRY_TOL: f64 = 1e-9;

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Mat,
    /// Jitter that was added to the diagonal, zero if none was needed.
    pub jitter: f64,
}

impl Cholesky {
    /// Factorizes `a`, climbing [`JITTER_LADDER`] on failure.
    pub fn factor(a: &Mat) -> Result<Self> {
        let d = a.rows();
        if d == 0 || a.cols() != d {
            return Err(dim_err(
                "cholesky",
                "square, d >= 1",
                format!("{:?}", a.shape()),
            ));
        }
        check_symmetric(a)?;
        if let Some(l) = try_cholesky(a, 0.0) {
            return Ok(Self { l, jitter: 0.0 });
        }
        let base = a.trace() / d as f64;
        for mult in JITTER_LADDER {
            let jitter = mult * base;
            if jitter <= 0.0 || !jitter.is_finite() {
                continue;
            }
            if let Some(l) = try_cholesky(a, jitter) {
                return Ok(Self { l, jitter });
            }
        }
        Err(Error::Singular { dim: d })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn lower(&self) -> &Mat {
        &self.l
    }

    /// Solves `A X = B` column by column.
    pub fn solve(&self, b: &Mat) -> Result<Mat> {
        let d = self.dim();
        if b.rows() != d {
            return Err(dim_err("cholesky solve", d, b.rows()));
        }
        let k = b.cols();
        let l = &self.l;
        let mut x = b.clone();
        let mut col = vec![0.0; d];
        for c in 0..k {
            for (i, v) in col.iter_mut().enumerate() {
                *v = b[(i, c)];
            }
            // L y = b
            for i in 0..d {
                let li = l.row(i);
                let mut s = col[i];
                for j in 0..i {
                    s -= li[j] * col[j];
                }
                col[i] = s / li[i];
            }
            // Lᵀ x = y
            for i in (0..d).rev() {
                let mut s = col[i];
                for j in i + 1..d {
                    s -= l[(j, i)] * col[j];
                }
                col[i] = s / l[(i, i)];
            }
            for (i, v) in col.iter().enumerate() {
                x[(i, c)] = *v;
            }
        }
        check_finite(&x, "cholesky solve output")?;
        Ok(x)
    }
}

fn check_symmetric(a: &Mat) -> Result<()> {
    let scale = a.max_abs().max(1.0);
    for i in 0..a.rows() {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::InvalidArgument(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

fn try_cholesky(a: &Mat, jitter: f64) -> Option<Mat> {
    let d = a.rows();
    let max_diag = (0..d).fold(0.0f64, |m, i| m.max(a[(i, i)].abs())) + jitter;
    // pivots this small relative to the diagonal are treated as rank loss
    let floor = max_diag * d as f64 * f64::EPSILON;
    let mut l = Mat::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[(i, j)];
            if i == j {
                s += jitter;
            }
            let (li, lj) = (i * d, j * d);
            let ls = l.as_slice();
            for k in 0..j {
                s -= ls[li + k] * ls[lj + k];
            }
            if i == j {
                if !(s > floor) || !s.is_finite() {
                    return None;
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Solves `A X = B` for symmetric positive-definite `A`.
pub fn spd_solve(a: &Mat, b: &Mat) -> Result<Mat> {
    Cholesky::factor(a)?.solve(b)
}

/// Like [`spd_solve`], also returning the Frobenius residual `‖A X − B‖`.
pub fn spd_solve_with_residual(a: &Mat, b: &Mat) -> Result<(Mat, f64)> {
    let x = spd_solve(a, b)?;
    let r = a.matmul(&x)?.sub(b)?.frobenius();
    Ok((x, r))
}

/// Ridge regression with multiple targets.
///
/// Solves `(DᵀD + sample_count·reg·I) W = Dᵀ T`, the minimizer of
/// `(1/sample_count)‖T − D W‖² + reg‖W‖²`. The penalty scaling is explicit
/// so mini-batch and full-data solves use the same `reg`.
pub fn ridge_solve(design: &Mat, targets: &Mat, reg: f64, sample_count: usize) -> Result<Mat> {
    let gram = ridge_gram(design, reg, sample_count)?;
    if design.rows() != targets.rows() {
        return Err(dim_err("ridge_solve", design.rows(), targets.rows()));
    }
    let rhs = design.t_matmul(targets)?;
    spd_solve(&gram, &rhs)
}

/// `DᵀD + sample_count·reg·I`.
pub fn ridge_gram(design: &Mat, reg: f64, sample_count: usize) -> Result<Mat> {
    if !(reg >= 0.0) || !reg.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "ridge penalty must be finite and >= 0, got {reg}"
        )));
    }
    check_finite(design, "ridge design")?;
    let mut gram = design.t_matmul(design)?;
    gram.add_diagonal(sample_count as f64 * reg);
    Ok(gram)
}

/// Solves a general square system `A X = B` by Gaussian elimination with
/// partial pivoting.
pub fn lu_solve(a: &Mat, b: &Mat) -> Result<Mat> {
    let d = a.rows();
    if d == 0 || a.cols() != d {
        return Err(dim_err(
            "lu_solve",
            "square, d >= 1",
            format!("{:?}", a.shape()),
        ));
    }
    if b.rows() != d {
        return Err(dim_err("lu_solve rhs", d, b.rows()));
    }
    check_finite(a, "lu_solve matrix")?;
    let k = b.cols();
    let mut m = a.clone();
    let mut x = b.clone();
    let scale = a.max_abs();
    for col in 0..d {
        let piv = (col..d)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .expect("non-empty range");
        if !(m[(piv, col)].abs() > scale * d as f64 * f64::EPSILON) {
            return Err(Error::Singular { dim: d });
        }
        if piv != col {
            for j in 0..d {
                let t = m[(col, j)];
                m[(col, j)] = m[(piv, j)];
                m[(piv, j)] = t;
            }
            for j in 0..k {
                let t = x[(col, j)];
                x[(col, j)] = x[(piv, j)];
                x[(piv, j)] = t;
            }
        }
        let p = m[(col, col)];
        for i in col + 1..d {
            let f = m[(i, col)] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..d {
                m[(i, j)] -= f * m[(col, j)];
            }
            for j in 0..k {
                x[(i, j)] -= f * x[(col, j)];
            }
        }
    }
    for i in (0..d).rev() {
        for j in 0..k {
            let mut s = x[(i, j)];
            for l in i + 1..d {
                s -= m[(i, l)] * x[(l, j)];
            }
            x[(i, j)] = s / m[(i, i)];
        }
    }
    check_finite(&x, "lu_solve output")?;
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RngStream;

    #[test]
    fn ridge_scalar_hand_case() {
        // (2 + 2·0.5) w = 6
        let d = Mat::from_rows(&[[1.0], [1.0]]);
        let t = Mat::from_rows(&[[2.0], [4.0]]);
        let w = ridge_solve(&d, &t, 0.5, 2).unwrap();
        assert!((w[(0, 0)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn ridge_zero_targets_and_identity_design() {
        let mut rng = RngStream::new(1, 0);
        let d = Mat::from_fn(6, 3, |_, _| rng.gaussian());
        let w = ridge_solve(&d, &Mat::zeros(6, 2), 0.1, 6).unwrap();
        assert!(w.as_slice().iter().all(|&v| v == 0.0));

        let t = Mat::from_fn(4, 2, |_, _| rng.gaussian());
        let w = ridge_solve(&Mat::identity(4), &t, 0.0, 4).unwrap();
        for (a, b) in w.as_slice().iter().zip(t.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn spd_hand_cases() {
        let b = Mat::from_rows(&[[1.5, -2.0], [0.25, 3.0]]);
        assert_eq!(spd_solve(&Mat::identity(2), &b).unwrap(), b);
        let x = spd_solve(&Mat::from_rows(&[[4.0]]), &Mat::from_rows(&[[12.0]])).unwrap();
        assert!((x[(0, 0)] - 3.0).abs() < 1e-15);
        let a = Mat::from_rows(&[[2.0, 0.0], [0.0, 5.0]]);
        let x = spd_solve(&a, &Mat::from_rows(&[[2.0], [10.0]])).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-15 && (x[(1, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn singular_without_penalty_is_reported() {
        let d = Mat::zeros(3, 2);
        let t = Mat::filled(3, 1, 1.0);
        assert!(matches!(
            ridge_solve(&d, &t, 0.0, 3),
            Err(Error::Singular { .. })
        ));
        // a penalty fixes it
        assert!(ridge_solve(&d, &t, 1e-3, 3).is_ok());
    }

    #[test]
    fn rank_deficient_gram_uses_declared_jitter() {
        let a = Mat::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        let chol = Cholesky::factor(&a).unwrap();
        assert!(chol.jitter > 0.0);
        assert!(chol.jitter <= 1e-8 * a.trace() / 2.0 * (1.0 + 1e-12));
    }

    #[test]
    fn rejects_asymmetric_and_negative_penalty() {
        let a = Mat::from_rows(&[[2.0, 1.0], [0.0, 2.0]]);
        assert!(spd_solve(&a, &Mat::zeros(2, 1)).is_err());
        assert!(ridge_solve(&Mat::identity(2), &Mat::zeros(2, 1), -1.0, 2).is_err());
        assert!(ridge_solve(&Mat::identity(2), &Mat::zeros(3, 1), 0.1, 2).is_err());
    }

    #[test]
    fn general_solve_hand_case() {
        // needs a row swap: [[0, 1], [2, 1]] x = [3, 5]
        let a = Mat::from_rows(&[[0.0, 1.0], [2.0, 1.0]]);
        let x = lu_solve(&a, &Mat::from_rows(&[[3.0], [5.0]])).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-15 && (x[(1, 0)] - 3.0).abs() < 1e-15);
        assert!(lu_solve(
            &Mat::from_rows(&[[1.0, 2.0], [2.0, 4.0]]),
            &Mat::zeros(2, 1)
        )
        .is_err());
    }

    #[test]
    fn residual_is_reported() {
        let a = Mat::from_rows(&[[3.0, 1.0], [1.0, 2.0]]);
        let b = Mat::from_rows(&[[1.0], [0.0]]);
        let (_, r) = spd_solve_with_residual(&a, &b).unwrap();
        assert!(r < 1e-14);
    }
}

//! Closed-form stage solutions and the regularized empirical stage losses.
//!
//! Stage 1 regresses treatment features on instrument features,
//! `ψ(x) ≈ V φ(z)`; stage 2 regresses the outcome on the predicted
//! treatment features, `ỹ ≈ uᵀ V φ(z̃)`. Both are ridge problems whose
//! penalty is scaled by the sample count of the batch they are fit on.

use crate::error::{dim_err, Result};
use crate::linalg::{ridge_gram, ridge_solve, Cholesky, Mat};

/// Stage-1 coefficient matrix `V`, shape `d1 × d2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Sol {
    pub v: Mat,
}

impl Stage1Sol {
    /// Predicted treatment features `V φ(z)` for each row, `k × d1`.
    pub fn predict(&self, phi_feats: &Mat) -> Result<Mat> {
        phi_feats.matmul_t(&self.v)
    }
}

/// `V̂ = Ψᵀ Φ (ΦᵀΦ + m λ1 I)⁻¹`, the exact minimizer of [`stage1_loss`].
pub fn stage1_solve(psi_feats: &Mat, phi_feats: &Mat, lambda1: f64) -> Result<Stage1Sol> {
    if psi_feats.rows() != phi_feats.rows() {
        return Err(dim_err(
            "stage1_solve rows",
            psi_feats.rows(),
            phi_feats.rows(),
        ));
    }
    let w = ridge_solve(phi_feats, psi_feats, lambda1, phi_feats.rows())?;
    Ok(Stage1Sol { v: w.transpose() })
}

/// `(1/m) Σ ‖ψᵢ − V φᵢ‖² + λ1 ‖V‖²_F`.
pub fn stage1_loss(psi_feats: &Mat, phi_feats: &Mat, sol: &Stage1Sol, lambda1: f64) -> Result<f64> {
    if psi_feats.rows() != phi_feats.rows() {
        return Err(dim_err(
            "stage1_loss rows",
            psi_feats.rows(),
            phi_feats.rows(),
        ));
    }
    if sol.v.shape() != (psi_feats.cols(), phi_feats.cols()) {
        return Err(dim_err(
            "stage1_loss V shape",
            format!("{}x{}", psi_feats.cols(), phi_feats.cols()),
            format!("{:?}", sol.v.shape()),
        ));
    }
    let m = psi_feats.rows() as f64;
    let resid = psi_feats.sub(&sol.predict(phi_feats)?)?;
    Ok(resid.frobenius_sq() / m + lambda1 * sol.v.frobenius_sq())
}

/// `û = (V Φ2ᵀ Φ2 Vᵀ + n λ2 I)⁻¹ V Φ2ᵀ y`, the exact minimizer of
/// [`stage2_loss`] for fixed `V`.
pub fn stage2_solve(
    sol: &Stage1Sol,
    phi2_feats: &Mat,
    y: &[f64],
    lambda2: f64,
) -> Result<Vec<f64>> {
    let design = stage2_design(sol, phi2_feats, y)?;
    solve_vector(&design, y, lambda2)
}

/// `(1/n) Σ (ỹᵢ − uᵀ V φ(z̃ᵢ))² + λ2 ‖u‖²`.
pub fn stage2_loss(
    sol: &Stage1Sol,
    phi2_feats: &Mat,
    y: &[f64],
    u: &[f64],
    lambda2: f64,
) -> Result<f64> {
    let design = stage2_design(sol, phi2_feats, y)?;
    ridge_vector_loss(&design, y, u, lambda2)
}

fn stage2_design(sol: &Stage1Sol, phi2_feats: &Mat, y: &[f64]) -> Result<Mat> {
    if phi2_feats.rows() != y.len() {
        return Err(dim_err("stage-2 rows", y.len(), phi2_feats.rows()));
    }
    if phi2_feats.cols() != sol.v.cols() {
        return Err(dim_err(
            "stage-2 instrument features",
            sol.v.cols(),
            phi2_feats.cols(),
        ));
    }
    sol.predict(phi2_feats)
}

/// Ridge solve for a single target vector with `sample_count = rows`.
pub(crate) fn solve_vector(design: &Mat, y: &[f64], reg: f64) -> Result<Vec<f64>> {
    if design.rows() != y.len() {
        return Err(dim_err("ridge target length", design.rows(), y.len()));
    }
    Ok(ridge_solve(design, &Mat::column(y), reg, design.rows())?.into_vec())
}

/// `(1/n)‖y − D u‖² + reg ‖u‖²`.
pub(crate) fn ridge_vector_loss(design: &Mat, y: &[f64], u: &[f64], reg: f64) -> Result<f64> {
    let pred = design.mul_vec(u)?;
    if pred.len() != y.len() {
        return Err(dim_err("ridge loss rows", y.len(), pred.len()));
    }
    let n = y.len() as f64;
    let sse: f64 = y.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / n + reg * u.iter().map(|v| v * v).sum::<f64>())
}

/// `M = Φ1 (Φ1ᵀΦ1 + m λ1 I)⁻¹`, so that `V̂ = Ψ1ᵀ M`.
///
/// `M` depends only on the instrument features, which lets the stage-2
/// gradient treat it as a constant while the treatment features change.
#[derive(Debug, Clone)]
pub struct Stage1Projection {
    pub m: Mat,
}

impl Stage1Projection {
    pub fn new(phi_feats: &Mat, lambda1: f64) -> Result<Self> {
        let gram = ridge_gram(phi_feats, lambda1, phi_feats.rows())?;
        let chol = Cholesky::factor(&gram)?;
        let m = chol.solve(&phi_feats.transpose())?.transpose();
        Ok(Self { m })
    }

    pub fn rows(&self) -> usize {
        self.m.rows()
    }

    pub fn stage1(&self, psi_feats: &Mat) -> Result<Stage1Sol> {
        Ok(Stage1Sol {
            v: psi_feats.t_matmul(&self.m)?,
        })
    }
}

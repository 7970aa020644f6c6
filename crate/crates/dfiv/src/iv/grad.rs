//! Gradients of the stage losses with respect to feature-map parameters.
//!
//! Each function returns the loss value at the current parameters together
//! with the gradient, so training loops can log without a second pass.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::iv::features::Features;
use crate::iv::stages::{ridge_vector_loss, solve_vector, Stage1Projection};
use crate::linalg::{ridge_gram, Cholesky, Mat};
use crate::neural::GradBuffer;

/// How the stage-1 gradient treats the dependence of `V̂` on `θZ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1GradMode {
    /// Hold `V̂` fixed. Exact at the ridge minimizer.
    #[default]
    Envelope,
    /// Differentiate through `(ΦᵀΦ + mλI)⁻¹ ΦᵀΨ` as well.
    FullSolve,
}

/// Stage-1 ridge fit kept around for backpropagation.
///
/// Holds `W = A⁻¹ B` with `A = ΦᵀΦ + mλI`, `B = ΦᵀΨ`, so `V̂ = Wᵀ`.
pub(crate) struct RidgeFit {
    chol: Cholesky,
    pub w: Mat,
}

impl RidgeFit {
    pub fn new(phi: &Mat, psi: &Mat, lambda1: f64) -> Result<Self> {
        if phi.rows() != psi.rows() {
            return Err(dim_err("stage-1 rows", phi.rows(), psi.rows()));
        }
        let chol = Cholesky::factor(&ridge_gram(phi, lambda1, phi.rows())?)?;
        let w = chol.solve(&phi.t_matmul(psi)?)?;
        Ok(Self { chol, w })
    }

    /// Adds to `g_phi` the part of `∂L/∂Φ` that flows through `W`, given
    /// `g_w = ∂L/∂W`.
    pub fn backprop(&self, phi: &Mat, psi: &Mat, g_w: &Mat, g_phi: &mut Mat) -> Result<()> {
        let g_b = self.chol.solve(g_w)?;
        let g_a = g_b.matmul_t(&self.w)?.scale(-1.0);
        let sym = g_a.add(&g_a.transpose())?;
        g_phi.add_assign_scaled(&phi.matmul(&sym)?, 1.0)?;
        g_phi.add_assign_scaled(&psi.matmul_t(&g_b)?, 1.0)?;
        Ok(())
    }
}

/// Stage-1 loss and its gradient over the instrument network.
///
/// `psi_feats` are the treatment features of the batch, held fixed.
pub fn grad_stage1_theta_z(
    psi_feats: &Mat,
    phi: &Features,
    z: &Mat,
    lambda1: f64,
    mode: Stage1GradMode,
) -> Result<(f64, GradBuffer)> {
    let mut grads = phi
        .grad_buffer()
        .ok_or_else(|| Error::InvalidArgument("instrument features are not trainable".into()))?;
    let phi_feats = phi.eval(z)?;
    let (loss, g_phi) = stage1_feature_grad(psi_feats, &phi_feats, lambda1, mode)?;
    phi.backward_into(z, &g_phi, &mut grads)?;
    Ok((loss, grads))
}

/// Stage-1 loss and `∂L1/∂Φ` for given feature matrices.
pub(crate) fn stage1_feature_grad(
    psi_feats: &Mat,
    phi_feats: &Mat,
    lambda1: f64,
    mode: Stage1GradMode,
) -> Result<(f64, Mat)> {
    let m = phi_feats.rows() as f64;
    let fit = RidgeFit::new(phi_feats, psi_feats, lambda1)?;
    let resid = psi_feats.sub(&phi_feats.matmul(&fit.w)?)?;
    let loss = resid.frobenius_sq() / m + lambda1 * fit.w.frobenius_sq();
    let mut g_phi = resid.matmul_t(&fit.w)?.scale(-2.0 / m);
    if mode == Stage1GradMode::FullSolve {
        let mut g_w = phi_feats.t_matmul(&resid)?.scale(-2.0 / m);
        g_w.add_assign_scaled(&fit.w, 2.0 * lambda1)?;
        fit.backprop(phi_feats, psi_feats, &g_w, &mut g_phi)?;
    }
    Ok((loss, g_phi))
}

/// Stage-2 quantities at the analytic `û`, with the upstream gradient on
/// the predicted-feature design `P = Φ2 V̂ᵀ`.
pub(crate) struct Stage2Eval {
    pub loss: f64,
    /// `∂L2/∂P`, shape `n × d1`.
    pub g_design: Mat,
}

/// Solves stage 2 on `design` and returns the loss and `∂L2/∂design`. By
/// the envelope argument `û` may be held fixed when differentiating.
pub(crate) fn stage2_eval(design: &Mat, y: &[f64], lambda2: f64) -> Result<Stage2Eval> {
    let u = solve_vector(design, y, lambda2)?;
    let loss = ridge_vector_loss(design, y, &u, lambda2)?;
    let pred = design.mul_vec(&u)?;
    let n = y.len() as f64;
    let g_design = Mat::from_fn(design.rows(), design.cols(), |i, j| {
        -2.0 / n * (y[i] - pred[i]) * u[j]
    });
    Ok(Stage2Eval { loss, g_design })
}

/// Stage-2 loss and its gradient over the treatment network.
///
/// `proj` caches `Φ1 (Φ1ᵀΦ1 + mλ1I)⁻¹` for the stage-1 batch; it does not
/// depend on `θX`. `phi2_feats` are the instrument features of the stage-2
/// batch.
pub fn grad_stage2_theta_x(
    psi: &Features,
    x1: &Mat,
    proj: &Stage1Projection,
    phi2_feats: &Mat,
    y: &[f64],
    lambda2: f64,
) -> Result<(f64, GradBuffer)> {
    let mut grads = psi
        .grad_buffer()
        .ok_or_else(|| Error::InvalidArgument("treatment features are not trainable".into()))?;
    if proj.rows() != x1.rows() {
        return Err(dim_err("stage-1 batch rows", proj.rows(), x1.rows()));
    }
    let psi1 = psi.eval(x1)?;
    let stage1 = proj.stage1(&psi1)?;
    let design = stage1.predict(phi2_feats)?;
    let ev = stage2_eval(&design, y, lambda2)?;
    // P = Φ2 Vᵀ and V = Ψ1ᵀ M
    let g_v = ev.g_design.t_matmul(phi2_feats)?;
    let g_psi1 = proj.m.matmul_t(&g_v)?;
    psi.backward_into(x1, &g_psi1, &mut grads)?;
    Ok((ev.loss, grads))
}

/// Stage-2 loss and its gradient over the instrument network, with `V̂`
/// differentiated through the stage-1 solve and `Φ2` directly.
///
/// Alternating training never uses this; it drives the joint-training
/// ablation.
pub fn grad_stage2_theta_z(
    psi1_feats: &Mat,
    phi: &Features,
    z1: &Mat,
    z2: &Mat,
    y: &[f64],
    lambda1: f64,
    lambda2: f64,
) -> Result<(f64, GradBuffer)> {
    let mut grads = phi
        .grad_buffer()
        .ok_or_else(|| Error::InvalidArgument("instrument features are not trainable".into()))?;
    let phi1 = phi.eval(z1)?;
    let phi2 = phi.eval(z2)?;
    let fit = RidgeFit::new(&phi1, psi1_feats, lambda1)?;
    let design = phi2.matmul(&fit.w)?;
    let ev = stage2_eval(&design, y, lambda2)?;
    // P = Φ2 W
    let g_phi2 = ev.g_design.matmul_t(&fit.w)?;
    let g_w = phi2.t_matmul(&ev.g_design)?;
    let mut g_phi1 = Mat::zeros(phi1.rows(), phi1.cols());
    fit.backprop(&phi1, psi1_feats, &g_w, &mut g_phi1)?;
    phi.backward_into(z1, &g_phi1, &mut grads)?;
    phi.backward_into(z2, &g_phi2, &mut grads)?;
    Ok((ev.loss, grads))
}

/// Stage-2 loss as a function of both networks, `(L2, ∂/∂θX, ∂/∂θZ)`.
pub(crate) fn grad_stage2_joint(
    psi: &Features,
    phi: &Features,
    x1: &Mat,
    z1: &Mat,
    z2: &Mat,
    y: &[f64],
    lambda1: f64,
    lambda2: f64,
) -> Result<(f64, GradBuffer, GradBuffer)> {
    let (loss, gz) = grad_stage2_theta_z(&psi.eval(x1)?, phi, z1, z2, y, lambda1, lambda2)?;
    let proj = Stage1Projection::new(&phi.eval(z1)?, lambda1)?;
    let (_, gx) = grad_stage2_theta_x(psi, x1, &proj, &phi.eval(z2)?, y, lambda2)?;
    Ok((loss, gx, gz))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::iv::stages::{stage1_loss, stage1_solve, stage2_loss, stage2_solve};
    use crate::linalg::RngStream;
    use crate::neural::{Activation, FeatureMap};

    pub fn tanh_net(dims: &[usize], seed: u64) -> Features {
        let mut rng = RngStream::new(seed, 77);
        let acts = vec![Activation::Tanh; dims.len() - 1];
        let mut fm = FeatureMap::init(dims, &acts, &mut rng).unwrap();
        // nonzero biases so the test exercises them
        let mut p = fm.params();
        for v in p.iter_mut() {
            *v += 0.1 * rng.gaussian();
        }
        fm.set_params(&p).unwrap();
        Features::mlp(fm)
    }

    /// Central differences of `f` over the MLP parameters of `feat`.
    pub fn fd_grad(feat: &Features, f: impl Fn(&Features) -> f64) -> Vec<f64> {
        let h = 1e-6;
        let base = feat.as_mlp().unwrap().params();
        let mut out = Vec::with_capacity(base.len());
        let mut probe = feat.clone();
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] = base[k] + h;
            probe.as_mlp_mut().unwrap().set_params(&p).unwrap();
            let up = f(&probe);
            p[k] = base[k] - h;
            probe.as_mlp_mut().unwrap().set_params(&p).unwrap();
            let down = f(&probe);
            out.push((up - down) / (2.0 * h));
        }
        out
    }

    pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn stage1_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(10, 0);
        let z = rng.gaussian_mat(24, 3, 1.0);
        let psi = rng.gaussian_mat(24, 4, 1.0);
        let phi = tanh_net(&[3, 6, 5], 1);
        let lambda = 0.05;
        for mode in [Stage1GradMode::Envelope, Stage1GradMode::FullSolve] {
            let (_, g) = grad_stage1_theta_z(&psi, &phi, &z, lambda, mode).unwrap();
            let fd = fd_grad(&phi, |f| {
                let pf = f.eval(&z).unwrap();
                let sol = stage1_solve(&psi, &pf, lambda).unwrap();
                stage1_loss(&psi, &pf, &sol, lambda).unwrap()
            });
            let err = rel_err(&g.flatten(), &fd);
            assert!(err <= 1e-5, "{mode:?}: rel err {err}");
        }
    }

    #[test]
    fn envelope_and_full_solve_agree() {
        let mut rng = RngStream::new(11, 0);
        let z = rng.gaussian_mat(30, 2, 1.0);
        let psi = rng.gaussian_mat(30, 3, 1.0);
        let phi = tanh_net(&[2, 8, 6], 2);
        let (_, a) = grad_stage1_theta_z(&psi, &phi, &z, 0.1, Stage1GradMode::Envelope).unwrap();
        let (_, b) = grad_stage1_theta_z(&psi, &phi, &z, 0.1, Stage1GradMode::FullSolve).unwrap();
        assert!(rel_err(&a.flatten(), &b.flatten()) <= 1e-6);
    }

    #[test]
    fn stage1_gradient_vanishes_at_exact_fit() {
        let z = Mat::from_rows(&[[0.3], [-0.7], [1.1]]);
        let phi = tanh_net(&[1, 4, 2], 3);
        let phi_feats = phi.eval(&z).unwrap();
        // targets exactly linear in the instrument features
        let psi = phi_feats.matmul(&Mat::from_rows(&[[1.0], [-2.0]])).unwrap();
        let (loss, g) = grad_stage1_theta_z(&psi, &phi, &z, 0.0, Stage1GradMode::Envelope).unwrap();
        assert!(loss < 1e-20);
        assert!(g.norm() < 1e-9, "{}", g.norm());
    }

    fn stage2_objective(
        psi: &Features,
        phi: &Features,
        x1: &Mat,
        z1: &Mat,
        z2: &Mat,
        y: &[f64],
        l1: f64,
        l2: f64,
    ) -> f64 {
        let s1 = stage1_solve(&psi.eval(x1).unwrap(), &phi.eval(z1).unwrap(), l1).unwrap();
        let p2 = phi.eval(z2).unwrap();
        let u = stage2_solve(&s1, &p2, y, l2).unwrap();
        stage2_loss(&s1, &p2, y, &u, l2).unwrap()
    }

    #[test]
    fn stage2_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(12, 0);
        let (m, n) = (20, 16);
        let x1 = rng.gaussian_mat(m, 2, 1.0);
        let z1 = rng.gaussian_mat(m, 3, 1.0);
        let z2 = rng.gaussian_mat(n, 3, 1.0);
        let y: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let psi = tanh_net(&[2, 5, 4], 4);
        let phi = tanh_net(&[3, 6, 5], 5);
        let (l1, l2) = (0.05, 0.02);
        let proj = Stage1Projection::new(&phi.eval(&z1).unwrap(), l1).unwrap();
        let (_, g) =
            grad_stage2_theta_x(&psi, &x1, &proj, &phi.eval(&z2).unwrap(), &y, l2).unwrap();
        let fd = fd_grad(&psi, |f| {
            stage2_objective(f, &phi, &x1, &z1, &z2, &y, l1, l2)
        });
        let err = rel_err(&g.flatten(), &fd);
        assert!(err <= 1e-5, "rel err {err}");

        let psi1 = psi.eval(&x1).unwrap();
        let (_, gz) = grad_stage2_theta_z(&psi1, &phi, &z1, &z2, &y, l1, l2).unwrap();
        let fd = fd_grad(&phi, |f| {
            stage2_objective(&psi, f, &x1, &z1, &z2, &y, l1, l2)
        });
        let err = rel_err(&gz.flatten(), &fd);
        assert!(err <= 1e-5, "theta_z rel err {err}");
    }

    #[test]
    fn stage2_gradient_zero_targets() {
        let mut rng = RngStream::new(13, 0);
        let x1 = rng.gaussian_mat(10, 2, 1.0);
        let z1 = rng.gaussian_mat(10, 2, 1.0);
        let psi = tanh_net(&[2, 3, 3], 6);
        let proj = Stage1Projection::new(&z1, 0.1).unwrap();
        let (loss, g) = grad_stage2_theta_x(
            &psi,
            &x1,
            &proj,
            &rng.gaussian_mat(7, 2, 1.0),
            &[0.0; 7],
            0.1,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn linear_treatment_two_point_hand_case() {
        // ψ(x) = w x + b on a scalar instrument feature. With û optimal,
        // L2(V) = (1/n)[Σy² − c²V²/(V²S + nλ2)], S = Σφ̃², c = Σφ̃y, so
        // dL2/dV = −2 λ2 c² V / (V²S + nλ2)², and V = Σψᵢφᵢ/(Σφᵢ² + mλ1).
        let (w, b) = (0.7, -0.2);
        let fm = FeatureMap::new(vec![crate::neural::Layer {
            weight: Mat::from_rows(&[[w]]),
            bias: vec![b],
            activation: Activation::Identity,
        }])
        .unwrap();
        let psi = Features::mlp(fm);
        let x1 = Mat::from_rows(&[[1.0], [3.0]]);
        let phi1 = [0.5, 2.0];
        let phi2 = [1.5, -1.0];
        let y = [2.0, 0.5];
        let (l1, l2) = (0.1, 0.3);
        let (m, n) = (2.0, 2.0);

        let denom1 = phi1.iter().map(|p| p * p).sum::<f64>() + m * l1;
        let v = (0..2).map(|i| (w * x1[(i, 0)] + b) * phi1[i]).sum::<f64>() / denom1;
        let s: f64 = phi2.iter().map(|p| p * p).sum();
        let c: f64 = phi2.iter().zip(&y).map(|(p, t)| p * t).sum();
        let dl_dv = -2.0 * l2 * c * c * v / (v * v * s + n * l2).powi(2);
        let dv_dw = (0..2).map(|i| x1[(i, 0)] * phi1[i]).sum::<f64>() / denom1;
        let dv_db = phi1.iter().sum::<f64>() / denom1;

        let proj = Stage1Projection::new(&Mat::column(&phi1), l1).unwrap();
        let (_, g) = grad_stage2_theta_x(&psi, &x1, &proj, &Mat::column(&phi2), &y, l2).unwrap();
        let flat = g.flatten();
        assert!(
            (flat[0] - dl_dv * dv_dw).abs() < 1e-12,
            "{} vs {}",
            flat[0],
            dl_dv * dv_dw
        );
        assert!((flat[1] - dl_dv * dv_db).abs() < 1e-12);
    }
}

//! Two-stage regression with observed confounders `o`.
//!
//! The structural function is `f(x, o) = uᵀ (ψ(x) ⊗ ξ(o))`. Stage 1
//! regresses `ψ(x)` on instrument features computed from `(z, o)`; stage 2
//! regresses the outcome on `V̂φ(z, o) ⊗ ξ(o)`. Tensor products are the
//! row-major vectorization of the outer product everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::iv::dataset::{IvDataset, JointSample};
use crate::iv::features::Features;
use crate::iv::grad::{grad_stage1_theta_z, stage2_eval};
use crate::iv::model::StructuralModel;
use crate::iv::stages::{
    ridge_vector_loss, solve_vector, stage1_loss, stage1_solve, Stage1Projection, Stage1Sol,
};
use crate::iv::train::{
    check_loss, draw_batch, entries, rows, DfivConfig, EarlyStop, IterationLog, TwoStageFit,
};
use crate::linalg::{Mat, RngStream};
use crate::neural::{adam_step, AdamState};

/// `vec(a bᵀ)` in row-major order: `[a₀b₀, a₀b₁, …, a₁b₀, …]`.
pub fn tensor_product(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &ai in a {
        out.extend(b.iter().map(|&bj| ai * bj));
    }
    out
}

/// Row-wise [`tensor_product`] of two matrices with equal row counts.
pub fn row_tensor(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows() != b.rows() {
        return Err(dim_err("row_tensor rows", a.rows(), b.rows()));
    }
    let (p, q) = (a.cols(), b.cols());
    let mut out = Mat::zeros(a.rows(), p * q);
    for i in 0..a.rows() {
        let (ra, rb) = (a.row(i), b.row(i));
        let dst = out.row_mut(i);
        for (k, &x) in ra.iter().enumerate() {
            for (l, &y) in rb.iter().enumerate() {
                dst[k * q + l] = x * y;
            }
        }
    }
    Ok(out)
}

/// Instrument-network input: `z` and `o` side by side.
pub fn instrument_inputs(z: &Mat, o: &Mat) -> Result<Mat> {
    z.hcat(o)
}

/// Stage 1 with instrument features built from `(z, o)`; the arithmetic is
/// that of [`stage1_solve`].
pub fn stage1_solve_obs(psi_feats: &Mat, phi_zo_feats: &Mat, lambda1: f64) -> Result<Stage1Sol> {
    stage1_solve(psi_feats, phi_zo_feats, lambda1)
}

/// Ridge solution over the design with rows `V̂φ(z̃ᵢ, õᵢ) ⊗ ξ(õᵢ)`; `u` has
/// length `d1·dξ`.
pub fn stage2_solve_obs(
    sol: &Stage1Sol,
    phi2_feats: &Mat,
    xi2_feats: &Mat,
    y: &[f64],
    lambda2: f64,
) -> Result<Vec<f64>> {
    solve_vector(&obs_design(sol, phi2_feats, xi2_feats)?, y, lambda2)
}

pub fn stage2_loss_obs(
    sol: &Stage1Sol,
    phi2_feats: &Mat,
    xi2_feats: &Mat,
    y: &[f64],
    u: &[f64],
    lambda2: f64,
) -> Result<f64> {
    ridge_vector_loss(&obs_design(sol, phi2_feats, xi2_feats)?, y, u, lambda2)
}

fn obs_design(sol: &Stage1Sol, phi2_feats: &Mat, xi2_feats: &Mat) -> Result<Mat> {
    if phi2_feats.cols() != sol.v.cols() {
        return Err(dim_err(
            "stage-2 instrument features",
            sol.v.cols(),
            phi2_feats.cols(),
        ));
    }
    row_tensor(&sol.predict(phi2_feats)?, xi2_feats)
}

/// Splits `∂L/∂(p ⊗ ξ)` into `∂L/∂p` and `∂L/∂ξ`.
fn split_tensor_grad(g: &Mat, p: &Mat, xi: &Mat) -> (Mat, Mat) {
    let (n, d1, dx) = (p.rows(), p.cols(), xi.cols());
    let mut gp = Mat::zeros(n, d1);
    let mut gx = Mat::zeros(n, dx);
    for i in 0..n {
        let gi = g.row(i);
        for a in 0..d1 {
            let mut s = 0.0;
            for b in 0..dx {
                s += gi[a * dx + b] * xi[(i, b)];
            }
            gp[(i, a)] = s;
        }
        for b in 0..dx {
            let mut s = 0.0;
            for a in 0..d1 {
                s += gi[a * dx + b] * p[(i, a)];
            }
            gx[(i, b)] = s;
        }
    }
    (gp, gx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsConfig {
    pub base: DfivConfig,
    /// Run the stage-1 inner loop until the relative loss change drops
    /// below `stage1_tol` (at most `stage1_cap` steps) instead of exactly
    /// `base.inner_stage1` steps.
    pub run_to_convergence: bool,
    pub stage1_cap: usize,
    pub stage1_tol: f64,
}

impl Default for ObsConfig {
    fn default() -> Self {
        Self {
            base: DfivConfig::default(),
            run_to_convergence: true,
            stage1_cap: 50,
            stage1_tol: 1e-4,
        }
    }
}

impl ObsConfig {
    /// Fixed inner-loop counts and full-batch stages, matching
    /// [`crate::iv::train_dfiv`]'s schedule for the same `base`.
    pub fn fixed(base: DfivConfig) -> Self {
        Self {
            base,
            run_to_convergence: false,
            ..Self::default()
        }
    }
}

/// Stage-2 loss and, for each trainable map, the gradient with respect to
/// its parameters.
struct ObsStage2<'a> {
    proj: &'a Stage1Projection,
    phi2: &'a Mat,
    y: &'a [f64],
    lambda2: f64,
}

impl ObsStage2<'_> {
    fn eval(&self, psi1: &Mat, xi2: &Mat) -> Result<(Mat, Mat, crate::iv::grad::Stage2Eval)> {
        let p = self.proj.stage1(psi1)?.predict(self.phi2)?;
        let ev = stage2_eval(&row_tensor(&p, xi2)?, self.y, self.lambda2)?;
        let (gp, gxi) = split_tensor_grad(&ev.g_design, &p, xi2);
        Ok((gp, gxi, ev))
    }
}

/// Trains `psi`, `phi` (over `(z, o)`) and `xi` with the observable
/// confounder schedule: a stage-1 inner loop on the instrument network,
/// then one treatment-network step and one observable-network step on the
/// stage-2 loss, repeated `base.inner_stage2` times per outer iteration.
pub fn train_dfiv_obs(
    data: &IvDataset,
    psi: Features,
    phi: Features,
    xi: Features,
    cfg: &ObsConfig,
) -> Result<TwoStageFit> {
    data.validate()?;
    let (Some(o1_all), Some(o2_all)) = (&data.stage1_o, &data.stage2_o) else {
        return Err(Error::InvalidArgument(
            "observables missing from the dataset".into(),
        ));
    };
    let zo1_all = instrument_inputs(&data.stage1_z, o1_all)?;
    let zo2_all = instrument_inputs(&data.stage2_z, o2_all)?;
    if psi.input_dim() != data.stage1_x.cols() {
        return Err(dim_err(
            "treatment feature input",
            data.stage1_x.cols(),
            psi.input_dim(),
        ));
    }
    if phi.input_dim() != zo1_all.cols() {
        return Err(dim_err(
            "instrument feature input",
            zo1_all.cols(),
            phi.input_dim(),
        ));
    }
    if xi.input_dim() != o1_all.cols() {
        return Err(dim_err(
            "observable feature input",
            o1_all.cols(),
            xi.input_dim(),
        ));
    }
    let base = &cfg.base;
    let (m, n) = (data.m(), data.n());
    base.validate(m, n)?;
    if cfg.run_to_convergence && (cfg.stage1_cap == 0 || !(cfg.stage1_tol >= 0.0)) {
        return Err(Error::InvalidArgument(
            "stage-1 cap must be >= 1 and tolerance >= 0".into(),
        ));
    }
    let (bm, bn) = base.batch_sizes(m, n);
    let want_oos = base.track_oos || base.early_stop.is_some();
    if want_oos && data.holdout.as_ref().is_none_or(|h| h.o.is_none()) {
        return Err(Error::InvalidArgument(
            "held-out losses need held-out observables".into(),
        ));
    }

    let (mut psi, mut phi, mut xi) = (psi, phi, xi);
    let mut adam_x = psi.as_mlp().map(AdamState::new);
    let mut adam_z = phi.as_mlp().map(AdamState::new);
    let mut adam_o = xi.as_mlp().map(AdamState::new);
    let mut rng = RngStream::new(base.seed, crate::iv::train::BATCH_STREAM);
    let mut stopper = EarlyStop::new(base.early_stop);
    let mut log = Vec::with_capacity(base.epochs);

    for it in 0..base.epochs {
        let b1 = draw_batch(&mut rng, m, bm);
        let b2 = draw_batch(&mut rng, n, bn);
        let (x1, zo1) = (rows(&data.stage1_x, &b1), rows(&zo1_all, &b1));
        let (y2, zo2, o2) = (
            entries(&data.stage2_y, &b2),
            rows(&zo2_all, &b2),
            rows(o2_all, &b2),
        );

        if let Some(state) = adam_z.as_mut() {
            let psi1 = psi.eval(&x1)?;
            let steps = if cfg.run_to_convergence {
                cfg.stage1_cap
            } else {
                base.inner_stage1
            };
            let mut prev = f64::INFINITY;
            for _ in 0..steps {
                let (loss, g) =
                    grad_stage1_theta_z(&psi1, &phi, &zo1, base.lambda1, base.stage1_grad)?;
                check_loss(loss, it)?;
                if cfg.run_to_convergence
                    && (prev - loss).abs() <= cfg.stage1_tol * prev.abs().max(f64::MIN_POSITIVE)
                {
                    break;
                }
                prev = loss;
                adam_step(phi.as_mlp_mut().expect("trainable"), &g, state, base.lr)?;
            }
        }

        let proj = Stage1Projection::new(&phi.eval(&zo1)?, base.lambda1)?;
        let phi2 = phi.eval(&zo2)?;
        let stage2 = ObsStage2 {
            proj: &proj,
            phi2: &phi2,
            y: &y2,
            lambda2: base.lambda2,
        };
        for _ in 0..base.inner_stage2 {
            if let Some(state) = adam_x.as_mut() {
                let (gp, _, ev) = stage2.eval(&psi.eval(&x1)?, &xi.eval(&o2)?)?;
                check_loss(ev.loss, it)?;
                // P = Φ2 Vᵀ and V = Ψ1ᵀ M
                let g_psi1 = proj.m.matmul_t(&gp.t_matmul(&phi2)?)?;
                let mut g = psi.grad_buffer().expect("trainable");
                psi.backward_into(&x1, &g_psi1, &mut g)?;
                adam_step(psi.as_mlp_mut().expect("trainable"), &g, state, base.lr)?;
            }
            if let Some(state) = adam_o.as_mut() {
                let (_, gxi, ev) = stage2.eval(&psi.eval(&x1)?, &xi.eval(&o2)?)?;
                check_loss(ev.loss, it)?;
                let mut g = xi.grad_buffer().expect("trainable");
                xi.backward_into(&o2, &gxi, &mut g)?;
                adam_step(xi.as_mlp_mut().expect("trainable"), &g, state, base.lr)?;
            }
        }

        let psi1 = psi.eval(&x1)?;
        let phi1 = phi.eval(&zo1)?;
        let s1 = stage1_solve(&psi1, &phi1, base.lambda1)?;
        let stage1_l = stage1_loss(&psi1, &phi1, &s1, base.lambda1)?;
        let (_, _, ev) = stage2.eval(&psi1, &xi.eval(&o2)?)?;
        check_loss(stage1_l, it)?;
        check_loss(ev.loss, it)?;
        let mut rec = IterationLog {
            iteration: it,
            stage1_loss: stage1_l,
            stage2_loss: ev.loss,
            l1_oos: None,
            l2_oos: None,
            test_mse: None,
        };
        let mut stop = false;
        if want_oos {
            let fit = final_fit_obs(data, &zo1_all, &zo2_all, &psi, &phi, &xi, base)?;
            let (l1, l2) = fit.oos_losses(data.holdout.as_ref().expect("checked above"))?;
            rec.l1_oos = Some(l1);
            rec.l2_oos = Some(l2);
            stop = stopper.update(l2);
        }
        log.push(rec);
        if stop {
            break;
        }
    }

    let mut fit = final_fit_obs(data, &zo1_all, &zo2_all, &psi, &phi, &xi, base)?;
    fit.log = log;
    Ok(fit)
}

fn final_fit_obs(
    data: &IvDataset,
    zo1: &Mat,
    zo2: &Mat,
    psi: &Features,
    phi: &Features,
    xi: &Features,
    cfg: &DfivConfig,
) -> Result<TwoStageFit> {
    let o2 = data.stage2_o.as_ref().expect("validated");
    let stage1 = stage1_solve_obs(&psi.eval(&data.stage1_x)?, &phi.eval(zo1)?, cfg.lambda1)?;
    let u = stage2_solve_obs(
        &stage1,
        &phi.eval(zo2)?,
        &xi.eval(o2)?,
        &data.stage2_y,
        cfg.lambda2,
    )?;
    Ok(TwoStageFit {
        model: StructuralModel::with_observables(u, psi.clone(), xi.clone())?,
        phi: phi.clone(),
        stage1,
        log: Vec::new(),
    })
}

/// Fixed-feature two-stage estimate with observables.
pub fn fixed_feature_2sls_obs(
    data: &IvDataset,
    psi: Features,
    phi: Features,
    xi: Features,
    lambda1: f64,
    lambda2: f64,
) -> Result<TwoStageFit> {
    let cfg = ObsConfig::fixed(DfivConfig {
        lambda1,
        lambda2,
        epochs: 0,
        ..DfivConfig::default()
    });
    train_dfiv_obs(data, psi, phi, xi, &cfg)
}

/// Held-out stage losses for a model with observables: instrument features
/// use `(z, o)` and the stage-2 prediction uses `V̂φ(z, o) ⊗ ξ(o)`.
pub(crate) fn oos_stage_losses_obs(fit: &TwoStageFit, holdout: &JointSample) -> Result<(f64, f64)> {
    let (Some(xi), Some(o)) = (&fit.model.xi, &holdout.o) else {
        return Err(Error::InvalidArgument(
            "held-out observables missing".into(),
        ));
    };
    let k = holdout.y.len();
    if k == 0 {
        return Err(Error::InvalidArgument("held-out set is empty".into()));
    }
    let p = fit
        .stage1
        .predict(&fit.phi.eval(&instrument_inputs(&holdout.z, o)?)?)?;
    let l1 = fit.model.psi.eval(&holdout.x)?.sub(&p)?.frobenius_sq() / k as f64;
    let fitted = row_tensor(&p, &xi.eval(o)?)?.mul_vec(&fit.model.u)?;
    let l2 = holdout
        .y
        .iter()
        .zip(&fitted)
        .map(|(y, f)| (y - f).powi(2))
        .sum::<f64>()
        / k as f64;
    Ok((l1, l2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iv::grad::tests::{fd_grad, rel_err, tanh_net};
    use crate::iv::stages::stage2_solve;
    use crate::iv::train::train_dfiv;

    #[test]
    fn tensor_product_cases() {
        assert_eq!(
            tensor_product(&[1.0, 2.0], &[3.0, 4.0]),
            vec![3.0, 4.0, 6.0, 8.0]
        );
        assert_eq!(
            tensor_product(&[1.5, -2.0, 0.25], &[1.0]),
            vec![1.5, -2.0, 0.25]
        );
        let mut rng = RngStream::new(1, 0);
        for _ in 0..20 {
            let a: Vec<f64> = (0..4).map(|_| rng.gaussian()).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.gaussian()).collect();
            let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n(&tensor_product(&a, &b)) - n(&a) * n(&b)).abs() <= 1e-12);
            let alpha = rng.gaussian();
            let scaled: Vec<f64> = a.iter().map(|x| alpha * x).collect();
            let lhs = tensor_product(&scaled, &b);
            let rhs: Vec<f64> = tensor_product(&a, &b).iter().map(|x| alpha * x).collect();
            for (l, r) in lhs.iter().zip(&rhs) {
                assert!((l - r).abs() <= 1e-15 * (1.0 + r.abs()));
            }
        }
    }

    #[test]
    fn stage1_obs_hand_case() {
        // φ built from (z, o) = (2, 0) with identity features
        let zo = instrument_inputs(&Mat::from_rows(&[[2.0]]), &Mat::from_rows(&[[0.0]])).unwrap();
        let phi = zo.take_cols(1);
        let s = stage1_solve_obs(&Mat::from_rows(&[[3.0]]), &phi, 0.0).unwrap();
        assert!((s.v[(0, 0)] - 1.5).abs() < 1e-12);
        // empty-width observables leave the instrument input unchanged
        let z = Mat::from_rows(&[[1.0, 2.0]]);
        assert_eq!(instrument_inputs(&z, &Mat::zeros(1, 0)).unwrap(), z);
    }

    #[test]
    fn stage2_obs_cases() {
        let v = Stage1Sol {
            v: Mat::from_rows(&[[1.0]]),
        };
        // V̂φ = 2, ξ = 3: (36) u = 72
        let u = stage2_solve_obs(
            &v,
            &Mat::from_rows(&[[2.0]]),
            &Mat::from_rows(&[[3.0]]),
            &[12.0],
            0.0,
        )
        .unwrap();
        assert!((u[0] - 2.0).abs() < 1e-12);
        let u = stage2_solve_obs(
            &v,
            &Mat::from_rows(&[[2.0]]),
            &Mat::from_rows(&[[3.0]]),
            &[0.0],
            0.5,
        )
        .unwrap();
        assert_eq!(u, vec![0.0]);

        let mut rng = RngStream::new(2, 0);
        let sol = Stage1Sol {
            v: rng.gaussian_mat(3, 4, 1.0),
        };
        let phi2 = rng.gaussian_mat(12, 4, 1.0);
        let y: Vec<f64> = (0..12).map(|_| rng.gaussian()).collect();
        let a = stage2_solve_obs(&sol, &phi2, &Mat::filled(12, 1, 1.0), &y, 0.1).unwrap();
        let b = stage2_solve(&sol, &phi2, &y, 0.1).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn tensor_gradient_split_matches_finite_differences() {
        let mut rng = RngStream::new(3, 0);
        let (m, n) = (18, 14);
        let x1 = rng.gaussian_mat(m, 1, 1.0);
        let zo1 = rng.gaussian_mat(m, 3, 1.0);
        let zo2 = rng.gaussian_mat(n, 3, 1.0);
        let o2 = zo2.select_cols(&[1, 2]);
        let y: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let psi = tanh_net(&[1, 4, 3], 1);
        let phi = tanh_net(&[3, 5, 4], 2);
        let xi = tanh_net(&[2, 4, 2], 3);
        let (l1, l2) = (0.05, 0.02);
        let proj = Stage1Projection::new(&phi.eval(&zo1).unwrap(), l1).unwrap();
        let phi2 = phi.eval(&zo2).unwrap();
        let st = ObsStage2 {
            proj: &proj,
            phi2: &phi2,
            y: &y,
            lambda2: l2,
        };
        let (gp, gxi, _) = st
            .eval(&psi.eval(&x1).unwrap(), &xi.eval(&o2).unwrap())
            .unwrap();

        let objective = |psi: &Features, xi: &Features| {
            let s1 = stage1_solve(&psi.eval(&x1).unwrap(), &phi.eval(&zo1).unwrap(), l1).unwrap();
            let xf = xi.eval(&o2).unwrap();
            let u = stage2_solve_obs(&s1, &phi2, &xf, &y, l2).unwrap();
            stage2_loss_obs(&s1, &phi2, &xf, &y, &u, l2).unwrap()
        };
        let g_psi1 = proj.m.matmul_t(&gp.t_matmul(&phi2).unwrap()).unwrap();
        let mut g = psi.grad_buffer().unwrap();
        psi.backward_into(&x1, &g_psi1, &mut g).unwrap();
        let fd = fd_grad(&psi, |f| objective(f, &xi));
        assert!(rel_err(&g.flatten(), &fd) <= 1e-5);

        let mut g = xi.grad_buffer().unwrap();
        xi.backward_into(&o2, &gxi, &mut g).unwrap();
        let fd = fd_grad(&xi, |f| objective(&psi, f));
        assert!(rel_err(&g.flatten(), &fd) <= 1e-5);
    }

    fn obs_data(seed: u64, m: usize, n: usize, o_width: usize) -> IvDataset {
        let mut rng = RngStream::new(seed, 0);
        let z1 = rng.gaussian_mat(m, 2, 1.0);
        let o1 = rng.gaussian_mat(m, o_width, 1.0);
        let x1 = Mat::from_fn(m, 1, |i, _| z1[(i, 0)] + 0.3 * rng.gaussian());
        let z2 = rng.gaussian_mat(n, 2, 1.0);
        let o2 = rng.gaussian_mat(n, o_width, 1.0);
        let y: Vec<f64> = (0..n)
            .map(|i| z2[(i, 0)].sin() + 0.1 * rng.gaussian())
            .collect();
        IvDataset::new(x1, z1, y, z2)
            .unwrap()
            .with_observables(o1, o2)
            .unwrap()
    }

    #[test]
    fn empty_observables_reduce_to_plain_training() {
        let data = obs_data(4, 30, 30, 0);
        let base = DfivConfig {
            epochs: 4,
            inner_stage1: 3,
            inner_stage2: 2,
            lr: 1e-2,
            ..DfivConfig::default()
        };
        let psi = tanh_net(&[1, 5, 3], 1);
        let phi = tanh_net(&[2, 5, 4], 2);
        let plain = train_dfiv(&data, psi.clone(), phi.clone(), &base).unwrap();
        let obs = train_dfiv_obs(
            &data,
            psi,
            phi,
            Features::constant(0),
            &ObsConfig::fixed(base),
        )
        .unwrap();
        assert_eq!(plain.model.u, obs.model.u);
        assert_eq!(plain.model.psi, obs.model.psi);
        assert_eq!(plain.phi, obs.phi);
        assert_eq!(plain.log, obs.log);
    }

    #[test]
    fn obs_training_is_deterministic_and_row_order_invariant() {
        let data = obs_data(5, 40, 40, 1);
        let cfg = ObsConfig {
            base: DfivConfig {
                epochs: 3,
                lr: 1e-2,
                ..DfivConfig::default()
            },
            ..ObsConfig::default()
        };
        let run = || {
            train_dfiv_obs(
                &data,
                tanh_net(&[1, 4, 3], 1),
                tanh_net(&[3, 4, 3], 2),
                tanh_net(&[1, 3, 2], 3),
                &cfg,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.model, b.model);

        let mut rng = RngStream::new(6, 0);
        let x = rng.gaussian_mat(10, 1, 1.0);
        let o = rng.gaussian_mat(10, 1, 1.0);
        let pred = a.model.predict(&x, Some(&o)).unwrap();
        let perm: Vec<usize> = (0..10).rev().collect();
        let back = a
            .model
            .predict(&x.select_rows(&perm), Some(&o.select_rows(&perm)))
            .unwrap();
        for (i, &k) in perm.iter().enumerate() {
            assert_eq!(back[i], pred[k]);
        }
    }

    #[test]
    fn missing_observables_are_rejected() {
        let data = obs_data(7, 10, 10, 1);
        let mut plain = data.clone();
        plain.stage1_o = None;
        plain.stage2_o = None;
        let res = train_dfiv_obs(
            &plain,
            Features::identity(1),
            Features::identity(3),
            Features::identity(1),
            &ObsConfig::default(),
        );
        assert!(res.is_err());
    }
}

//! Alternating mini-batch training of the instrument and treatment networks
//! with closed-form stage solves in between.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::iv::dataset::{IvDataset, JointSample};
use crate::iv::features::Features;
use crate::iv::grad::{grad_stage1_theta_z, grad_stage2_theta_x, Stage1GradMode};
use crate::iv::model::StructuralModel;
use crate::iv::stages::{
    stage1_loss, stage1_solve, stage2_loss, stage2_solve, Stage1Projection, Stage1Sol,
};
use crate::linalg::{Mat, RngStream};
use crate::neural::{adam_step, AdamState};

/// Callback scoring a model after each outer iteration (e.g. test MSE).
pub type Monitor<'a> = &'a dyn Fn(&StructuralModel) -> Result<f64>;

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

pub(crate) const BATCH_STREAM: u64 = 0x6261_7463;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfivConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Stage-1 batch size; `None` means `min(m, 1000)`.
    pub batch_m: Option<usize>,
    /// Stage-2 batch size; `None` means `min(n, 1000)`.
    pub batch_n: Option<usize>,
    /// Instrument-network updates per outer iteration.
    pub inner_stage1: usize,
    /// Treatment-network updates per outer iteration.
    pub inner_stage2: usize,
    pub lr: f64,
    /// Outer iterations.
    pub epochs: usize,
    pub seed: u64,
    /// Stop once the held-out stage-2 loss has not improved for this many
    /// outer iterations. Needs held-out data.
    pub early_stop: Option<usize>,
    pub stage1_grad: Stage1GradMode,
    /// Record held-out stage losses in the iteration log.
    pub track_oos: bool,
}

impl Default for DfivConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            batch_m: None,
            batch_n: None,
            inner_stage1: 20,
            inner_stage2: 1,
            lr: 1e-3,
            epochs: 100,
            seed: 0,
            early_stop: None,
            stage1_grad: Stage1GradMode::Envelope,
            track_oos: false,
        }
    }
}

impl DfivConfig {
    pub fn batch_sizes(&self, m: usize, n: usize) -> (usize, usize) {
        (
            self.batch_m.unwrap_or(m.min(1000)),
            self.batch_n.unwrap_or(n.min(1000)),
        )
    }

    pub fn validate(&self, m: usize, n: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.inner_stage1 == 0 || self.inner_stage2 == 0 {
            return bad("inner update counts must be >= 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        let (bm, bn) = self.batch_sizes(m, n);
        if bm == 0 || bm > m || bn == 0 || bn > n {
            return bad(format!(
                "batch sizes ({bm}, {bn}) must lie in 1..=({m}, {n})"
            ));
        }
        if self.early_stop == Some(0) {
            return bad("early-stop patience must be >= 1".into());
        }
        Ok(())
    }
}

/// One record per outer iteration, written as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub stage1_loss: f64,
    pub stage2_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l1_oos: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l2_oos: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_mse: Option<f64>,
}

pub fn log_to_jsonl(log: &[IterationLog]) -> Result<String> {
    let mut out = String::new();
    for rec in log {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    Ok(out)
}

/// A fitted two-stage estimator: the structural model plus the stage-1
/// pieces needed for held-out diagnostics.
#[derive(Debug, Clone)]
pub struct TwoStageFit {
    pub model: StructuralModel,
    pub phi: Features,
    pub stage1: Stage1Sol,
    pub log: Vec<IterationLog>,
}

impl TwoStageFit {
    /// Held-out `(L1_oos, L2_oos)`.
    pub fn oos_losses(&self, holdout: &JointSample) -> Result<(f64, f64)> {
        if self.model.has_observables() {
            return crate::iv::confounded::oos_stage_losses_obs(self, holdout);
        }
        oos_stage_losses(
            &self.model.psi,
            &self.phi,
            &self.stage1,
            &self.model.u,
            holdout,
        )
    }
}

/// Out-of-sample stage losses on held-out joint triples:
/// `L1 = mean ‖ψ(x) − V̂φ(z)‖²` and `L2 = mean (y − ûᵀV̂φ(z))²`.
pub fn oos_stage_losses(
    psi: &Features,
    phi: &Features,
    stage1: &Stage1Sol,
    u: &[f64],
    holdout: &JointSample,
) -> Result<(f64, f64)> {
    let k = holdout.y.len();
    if k == 0 {
        return Err(Error::InvalidArgument("held-out set is empty".into()));
    }
    let pred = stage1.predict(&phi.eval(&holdout.z)?)?;
    let l1 = psi.eval(&holdout.x)?.sub(&pred)?.frobenius_sq() / k as f64;
    let fitted = pred.mul_vec(u)?;
    let l2 = holdout
        .y
        .iter()
        .zip(&fitted)
        .map(|(y, f)| (y - f).powi(2))
        .sum::<f64>()
        / k as f64;
    Ok((l1, l2))
}

/// Stage-1 solve on all stage-1 rows, then the stage-2 solve on all
/// stage-2 rows. Shared by training and the fixed-feature estimators.
pub(crate) fn final_fit(
    data: &IvDataset,
    psi: &Features,
    phi: &Features,
    lambda1: f64,
    lambda2: f64,
) -> Result<(Stage1Sol, Vec<f64>)> {
    let stage1 = stage1_solve(
        &psi.eval(&data.stage1_x)?,
        &phi.eval(&data.stage1_z)?,
        lambda1,
    )?;
    let u = stage2_solve(&stage1, &phi.eval(&data.stage2_z)?, &data.stage2_y, lambda2)?;
    Ok((stage1, u))
}

pub(crate) fn check_dims(data: &IvDataset, psi: &Features, phi: &Features) -> Result<()> {
    if psi.input_dim() != data.stage1_x.cols() {
        return Err(dim_err(
            "treatment feature input",
            data.stage1_x.cols(),
            psi.input_dim(),
        ));
    }
    if phi.input_dim() != data.stage1_z.cols() {
        return Err(dim_err(
            "instrument feature input",
            data.stage1_z.cols(),
            phi.input_dim(),
        ));
    }
    Ok(())
}

pub(crate) fn check_loss(loss: f64, iteration: usize) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Diverged { iteration, loss });
    }
    Ok(())
}

/// Row indices of one mini-batch. A batch covering every row uses them in
/// order and draws nothing from `rng`.
pub(crate) fn draw_batch(rng: &mut RngStream, total: usize, size: usize) -> Option<Vec<usize>> {
    (size < total).then(|| rng.sample_indices(total, size))
}

pub(crate) fn rows(m: &Mat, idx: &Option<Vec<usize>>) -> Mat {
    match idx {
        Some(i) => m.select_rows(i),
        None => m.clone(),
    }
}

pub(crate) fn entries(v: &[f64], idx: &Option<Vec<usize>>) -> Vec<f64> {
    match idx {
        Some(i) => i.iter().map(|&k| v[k]).collect(),
        None => v.to_vec(),
    }
}

/// Tracks the held-out stage-2 loss for early stopping.
pub(crate) struct EarlyStop {
    patience: Option<usize>,
    best: f64,
    since_best: usize,
}

impl EarlyStop {
    pub fn new(patience: Option<usize>) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    /// Returns true when training should stop.
    pub fn update(&mut self, l2_oos: f64) -> bool {
        if l2_oos < self.best {
            self.best = l2_oos;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.patience.is_some_and(|p| self.since_best >= p)
    }
}

/// Trains the treatment network `psi` and instrument network `phi` by
/// alternating gradient steps, then fits `û` on the full data.
///
/// Per outer iteration one stage-1 and one stage-2 mini-batch are drawn and
/// held fixed; the instrument network takes `inner_stage1` steps on the
/// stage-1 loss with `V̂` re-solved each step, then the treatment network
/// takes `inner_stage2` steps on the stage-2 loss with `V̂` and `û`
/// re-solved each step. Fixed (non-MLP) feature maps are simply not
/// updated.
pub fn train_dfiv(
    data: &IvDataset,
    psi: Features,
    phi: Features,
    cfg: &DfivConfig,
) -> Result<TwoStageFit> {
    train_dfiv_inner(data, psi, phi, cfg, None)
}

/// [`train_dfiv`] that also scores the full-data model after every outer
/// iteration with `monitor`, stored as `test_mse` in the log.
pub fn train_dfiv_monitored(
    data: &IvDataset,
    psi: Features,
    phi: Features,
    cfg: &DfivConfig,
    monitor: Monitor<'_>,
) -> Result<TwoStageFit> {
    train_dfiv_inner(data, psi, phi, cfg, Some(monitor))
}

fn train_dfiv_inner(
    data: &IvDataset,
    psi: Features,
    phi: Features,
    cfg: &DfivConfig,
    monitor: Option<Monitor<'_>>,
) -> Result<TwoStageFit> {
    data.validate()?;
    check_dims(data, &psi, &phi)?;
    let (m, n) = (data.m(), data.n());
    cfg.validate(m, n)?;
    let (bm, bn) = cfg.batch_sizes(m, n);
    let want_oos = cfg.track_oos || cfg.early_stop.is_some();
    if want_oos && data.holdout.is_none() {
        return Err(Error::InvalidArgument(
            "held-out losses requested without held-out data".into(),
        ));
    }

    let (mut psi, mut phi) = (psi, phi);
    let mut adam_x = psi.as_mlp().map(AdamState::new);
    let mut adam_z = phi.as_mlp().map(AdamState::new);
    let mut rng = RngStream::new(cfg.seed, BATCH_STREAM);
    let mut stopper = EarlyStop::new(cfg.early_stop);
    let mut log = Vec::with_capacity(cfg.epochs);

    for it in 0..cfg.epochs {
        let b1 = draw_batch(&mut rng, m, bm);
        let b2 = draw_batch(&mut rng, n, bn);
        let (x1, z1) = (rows(&data.stage1_x, &b1), rows(&data.stage1_z, &b1));
        let (y2, z2) = (entries(&data.stage2_y, &b2), rows(&data.stage2_z, &b2));

        if let Some(state) = adam_z.as_mut() {
            let psi1 = psi.eval(&x1)?;
            for _ in 0..cfg.inner_stage1 {
                let (loss, g) =
                    grad_stage1_theta_z(&psi1, &phi, &z1, cfg.lambda1, cfg.stage1_grad)?;
                check_loss(loss, it)?;
                adam_step(phi.as_mlp_mut().expect("trainable"), &g, state, cfg.lr)?;
            }
        }

        let proj = Stage1Projection::new(&phi.eval(&z1)?, cfg.lambda1)?;
        let phi2 = phi.eval(&z2)?;
        if let Some(state) = adam_x.as_mut() {
            for _ in 0..cfg.inner_stage2 {
                let (loss, g) = grad_stage2_theta_x(&psi, &x1, &proj, &phi2, &y2, cfg.lambda2)?;
                check_loss(loss, it)?;
                adam_step(psi.as_mlp_mut().expect("trainable"), &g, state, cfg.lr)?;
            }
        }

        // batch losses at the updated parameters
        let psi1 = psi.eval(&x1)?;
        let phi1 = phi.eval(&z1)?;
        let s1 = stage1_solve(&psi1, &phi1, cfg.lambda1)?;
        let stage1 = stage1_loss(&psi1, &phi1, &s1, cfg.lambda1)?;
        let s1p = proj.stage1(&psi1)?;
        let u = stage2_solve(&s1p, &phi2, &y2, cfg.lambda2)?;
        let stage2 = stage2_loss(&s1p, &phi2, &y2, &u, cfg.lambda2)?;
        check_loss(stage1, it)?;
        check_loss(stage2, it)?;

        let mut rec = IterationLog {
            iteration: it,
            stage1_loss: stage1,
            stage2_loss: stage2,
            l1_oos: None,
            l2_oos: None,
            test_mse: None,
        };
        let mut stop = false;
        if want_oos || monitor.is_some() {
            let (s1, u) = final_fit(data, &psi, &phi, cfg.lambda1, cfg.lambda2)?;
            if want_oos {
                let holdout = data.holdout.as_ref().expect("checked above");
                let (l1, l2) = oos_stage_losses(&psi, &phi, &s1, &u, holdout)?;
                rec.l1_oos = Some(l1);
                rec.l2_oos = Some(l2);
                stop = stopper.update(l2);
            }
            if let Some(score) = monitor {
                rec.test_mse = Some(score(&StructuralModel::new(u, psi.clone())?)?);
            }
        }
        log.push(rec);
        if stop {
            break;
        }
    }

    let (stage1, u) = final_fit(data, &psi, &phi, cfg.lambda1, cfg.lambda2)?;
    Ok(TwoStageFit {
        model: StructuralModel::new(u, psi)?,
        phi,
        stage1,
        log,
    })
}

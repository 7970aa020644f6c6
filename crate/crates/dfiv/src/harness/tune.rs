//! Regularization tuning from held-out stage losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iv::{train_dfiv, train_dfiv_obs, DfivConfig, Features, IvDataset, ObsConfig};

/// Candidate `λ1` and `λ2` values, each positive and sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneGrid {
    lambda1: Vec<f64>,
    lambda2: Vec<f64>,
}

impl TuneGrid {
    pub fn new(lambda1: Vec<f64>, lambda2: Vec<f64>) -> Result<Self> {
        for (name, vals) in [("lambda1", &lambda1), ("lambda2", &lambda2)] {
            if vals.is_empty() {
                return Err(Error::InvalidArgument(format!("{name} grid is empty")));
            }
            if vals.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} grid values must be positive and finite"
                )));
            }
            if vals.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "{name} grid must be strictly ascending"
                )));
            }
        }
        Ok(Self { lambda1, lambda2 })
    }

    /// The same candidates for both stages.
    pub fn symmetric(values: Vec<f64>) -> Result<Self> {
        Self::new(values.clone(), values)
    }

    pub fn lambda1(&self) -> &[f64] {
        &self.lambda1
    }

    pub fn lambda2(&self) -> &[f64] {
        &self.lambda2
    }
}

impl Default for TuneGrid {
    fn default() -> Self {
        Self::symmetric(vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0]).expect("valid default grid")
    }
}

/// Held-out loss of one grid candidate, or the reason it failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub lambda: f64,
    pub oos_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub lambda1: f64,
    pub lambda2: f64,
    /// `L1_oos` per `λ1` candidate, with `λ2` at its configured value.
    pub stage1_scores: Vec<CandidateScore>,
    /// `L2_oos` per `λ2` candidate, with `λ1` at the selected value.
    pub stage2_scores: Vec<CandidateScore>,
}

impl TuneOutcome {
    pub fn best_l1_oos(&self) -> f64 {
        best(&self.stage1_scores).map_or(f64::INFINITY, |(_, v)| v)
    }

    pub fn best_l2_oos(&self) -> f64 {
        best(&self.stage2_scores).map_or(f64::INFINITY, |(_, v)| v)
    }
}

/// Lowest score; on ties the earliest (smallest) candidate wins.
fn best(scores: &[CandidateScore]) -> Option<(f64, f64)> {
    let mut out: Option<(f64, f64)> = None;
    for c in scores {
        if let Some(v) = c.oos_loss {
            if out.is_none_or(|(_, b)| v < b) {
                out = Some((c.lambda, v));
            }
        }
    }
    out
}

fn score_all(candidates: &[f64], eval: impl Fn(f64) -> Result<f64>) -> Vec<CandidateScore> {
    candidates
        .iter()
        .map(|&lambda| match eval(lambda).and_then(finite) {
            Ok(v) => CandidateScore {
                lambda,
                oos_loss: Some(v),
                error: None,
            },
            Err(e) => CandidateScore {
                lambda,
                oos_loss: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("held-out loss"))
    }
}

/// Two-pass grid search. `eval(λ1, λ2)` trains with that pair and returns
/// `(L1_oos, L2_oos)`. `λ1` is picked with `λ2 = default_lambda2`, then
/// `λ2` given the chosen `λ1`. Failed candidates are skipped.
pub fn tune_by(
    grid: &TuneGrid,
    default_lambda2: f64,
    eval: impl Fn(f64, f64) -> Result<(f64, f64)>,
) -> Result<TuneOutcome> {
    let stage1_scores = score_all(&grid.lambda1, |l1| eval(l1, default_lambda2).map(|p| p.0));
    let Some((lambda1, _)) = best(&stage1_scores) else {
        return Err(Error::InvalidArgument(format!(
            "every lambda1 candidate failed: {}",
            first_error(&stage1_scores)
        )));
    };
    let stage2_scores = score_all(&grid.lambda2, |l2| eval(lambda1, l2).map(|p| p.1));
    let Some((lambda2, _)) = best(&stage2_scores) else {
        return Err(Error::InvalidArgument(format!(
            "every lambda2 candidate failed: {}",
            first_error(&stage2_scores)
        )));
    };
    Ok(TuneOutcome {
        lambda1,
        lambda2,
        stage1_scores,
        stage2_scores,
    })
}

fn first_error(scores: &[CandidateScore]) -> String {
    scores
        .iter()
        .find_map(|c| c.error.clone())
        .unwrap_or_default()
}

/// The configuration used for one tuning candidate: the given `λ` pair and
/// `budget` times the epochs (at least one when training is on).
pub fn tuning_config(cfg: &DfivConfig, lambda1: f64, lambda2: f64, budget: f64) -> DfivConfig {
    let epochs = if cfg.epochs == 0 {
        0
    } else {
        ((cfg.epochs as f64 * budget).ceil() as usize).max(1)
    };
    DfivConfig {
        lambda1,
        lambda2,
        epochs,
        early_stop: None,
        track_oos: false,
        ..cfg.clone()
    }
}

/// Default share of the final epoch budget spent on each candidate.
pub const TUNING_BUDGET: f64 = 0.25;

/// Picks `λ1` by held-out stage-1 loss, retraining per candidate from the
/// given initial networks, then `λ2` by held-out stage-2 loss.
pub fn tune_lambdas(
    data: &IvDataset,
    psi: &Features,
    phi: &Features,
    grid: &TuneGrid,
    cfg: &DfivConfig,
) -> Result<TuneOutcome> {
    let holdout = require_holdout(data)?;
    tune_by(grid, cfg.lambda2, |l1, l2| {
        let fit = train_dfiv(
            data,
            psi.clone(),
            phi.clone(),
            &tuning_config(cfg, l1, l2, TUNING_BUDGET),
        )?;
        fit.oos_losses(holdout)
    })
}

/// [`tune_lambdas`] for the observable-confounder estimator.
pub fn tune_lambdas_obs(
    data: &IvDataset,
    psi: &Features,
    phi: &Features,
    xi: &Features,
    grid: &TuneGrid,
    cfg: &ObsConfig,
) -> Result<TuneOutcome> {
    let holdout = require_holdout(data)?;
    tune_by(grid, cfg.base.lambda2, |l1, l2| {
        let obs = ObsConfig {
            base: tuning_config(&cfg.base, l1, l2, TUNING_BUDGET),
            ..cfg.clone()
        };
        train_dfiv_obs(data, psi.clone(), phi.clone(), xi.clone(), &obs)?.oos_losses(holdout)
    })
}

fn require_holdout(data: &IvDataset) -> Result<&crate::iv::JointSample> {
    data.holdout
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("tuning needs held-out joint samples".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iv::JointSample;
    use crate::linalg::{Mat, RngStream};

    #[test]
    fn grid_validation() {
        assert!(TuneGrid::new(vec![], vec![1.0]).is_err());
        assert!(TuneGrid::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(TuneGrid::new(vec![1.0, 0.1], vec![1.0]).is_err());
        assert!(TuneGrid::new(vec![0.1, 0.1], vec![1.0]).is_err());
        assert!(TuneGrid::new(vec![0.1, 1.0], vec![2.0]).is_ok());
        assert_eq!(TuneGrid::default().lambda1().len(), 5);
    }

    #[test]
    fn singleton_grid_returns_its_value() {
        let g = TuneGrid::new(vec![0.3], vec![7.0]).unwrap();
        let out = tune_by(&g, 1.0, |a, b| Ok((a, b))).unwrap();
        assert_eq!((out.lambda1, out.lambda2), (0.3, 7.0));
    }

    #[test]
    fn ties_go_to_the_smaller_value() {
        let g = TuneGrid::symmetric(vec![0.1, 1.0, 10.0]).unwrap();
        let out = tune_by(&g, 1.0, |a, _| Ok((if a < 5.0 { 2.0 } else { 3.0 }, 1.0))).unwrap();
        assert_eq!((out.lambda1, out.lambda2), (0.1, 0.1));
    }

    #[test]
    fn stage2_choice_uses_selected_lambda1() {
        let g = TuneGrid::symmetric(vec![0.1, 1.0, 10.0]).unwrap();
        let out = tune_by(&g, 1.0, |a, b| Ok(((a - 1.0).abs(), (b - a * 10.0).abs()))).unwrap();
        assert_eq!((out.lambda1, out.lambda2), (1.0, 10.0));
    }

    #[test]
    fn failures_are_skipped_and_all_failing_errors() {
        let g = TuneGrid::symmetric(vec![0.1, 1.0]).unwrap();
        let out = tune_by(&g, 1.0, |a, _| {
            if a < 0.5 {
                Err(Error::Singular { dim: 1 })
            } else {
                Ok((5.0, 5.0))
            }
        })
        .unwrap();
        assert_eq!(out.lambda1, 1.0);
        assert!(out.stage1_scores[0].error.is_some());
        assert!(tune_by(&g, 1.0, |_, _| Ok((f64::NAN, 1.0))).is_err());
    }

    #[test]
    fn needs_holdout() {
        let mut rng = RngStream::new(1, 0);
        let x = rng.gaussian_mat(20, 1, 1.0);
        let data = IvDataset::new(x.clone(), x.clone(), vec![0.0; 20], x).unwrap();
        let f = Features::identity(1).with_intercept();
        assert!(tune_lambdas(&data, &f, &f, &TuneGrid::default(), &DfivConfig::default()).is_err());
    }

    #[test]
    fn fixed_feature_tuning_matches_direct_scores() {
        let mut rng = RngStream::new(3, 0);
        let z = rng.gaussian_mat(60, 2, 1.0);
        let x = Mat::from_fn(60, 1, |i, _| z[(i, 0)] + 0.3 * rng.gaussian());
        let z2 = rng.gaussian_mat(60, 2, 1.0);
        let y: Vec<f64> = (0..60).map(|i| z2[(i, 0)] + 0.2 * rng.gaussian()).collect();
        let hz = rng.gaussian_mat(30, 2, 1.0);
        let hx = Mat::from_fn(30, 1, |i, _| hz[(i, 0)] + 0.3 * rng.gaussian());
        let hy: Vec<f64> = (0..30).map(|i| hx[(i, 0)] + 0.2 * rng.gaussian()).collect();
        let data = IvDataset::new(x, z, y, z2)
            .unwrap()
            .with_holdout(JointSample {
                x: hx,
                y: hy,
                z: hz,
                o: None,
            })
            .unwrap();
        let psi = Features::identity(1).with_intercept();
        let phi = Features::polynomial(2, 3).unwrap().with_intercept();
        let cfg = DfivConfig {
            epochs: 0,
            ..DfivConfig::default()
        };
        let grid = TuneGrid::default();
        let out = tune_lambdas(&data, &psi, &phi, &grid, &cfg).unwrap();
        for c in &out.stage1_scores {
            assert!(out.best_l1_oos() <= c.oos_loss.unwrap());
        }
        let direct =
            crate::iv::fixed_feature_2sls(&data, psi, phi, out.lambda1, out.lambda2).unwrap();
        let (_, l2) = direct.oos_losses(data.holdout.as_ref().unwrap()).unwrap();
        assert_eq!(l2, out.best_l2_oos());
    }
}

//! Joint training of both networks on the stage-2 loss alone, kept as a
//! comparison point for the alternating schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iv::grad::grad_stage2_joint;
use crate::iv::stages::{stage1_loss, stage1_solve, stage2_loss, stage2_solve, Stage1Projection};
use crate::iv::train::{
    check_dims, check_loss, draw_batch, entries, final_fit, rows, Monitor, BATCH_STREAM,
};
use crate::iv::{DfivConfig, Features, IterationLog, IvDataset, StructuralModel};
use crate::linalg::RngStream;
use crate::neural::{adam_step, AdamState};

/// Per-iteration losses of a joint-training run. A run that blows up keeps
/// the records up to that point and notes where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCurves {
    pub log: Vec<IterationLog>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diverged: Option<String>,
}

impl AblationCurves {
    pub fn final_record(&self) -> Option<&IterationLog> {
        self.log.last()
    }
}

/// Trains `psi` and `phi` together by gradient steps on the stage-2 loss,
/// with `V̂` and `û` solved in closed form inside every step. The stage-1
/// loss is only monitored. Uses the same batches as [`crate::iv::train_dfiv`]
/// and `inner_stage2` joint steps per outer iteration; `test` scores the
/// full-data model after each iteration.
pub fn ablation_joint_training(
    data: &IvDataset,
    psi: Features,
    phi: Features,
    cfg: &DfivConfig,
    test: Option<Monitor<'_>>,
) -> Result<AblationCurves> {
    data.validate()?;
    check_dims(data, &psi, &phi)?;
    let (m, n) = (data.m(), data.n());
    cfg.validate(m, n)?;
    let (mut psi, mut phi) = (psi, phi);
    let (Some(fx), Some(fz)) = (psi.as_mlp(), phi.as_mlp()) else {
        return Err(Error::InvalidArgument(
            "joint training needs two trainable networks".into(),
        ));
    };
    let (mut adam_x, mut adam_z) = (AdamState::new(fx), AdamState::new(fz));
    let (bm, bn) = cfg.batch_sizes(m, n);
    let mut rng = RngStream::new(cfg.seed, BATCH_STREAM);
    let mut curves = AblationCurves {
        log: Vec::with_capacity(cfg.epochs),
        diverged: None,
    };

    for it in 0..cfg.epochs {
        let b1 = draw_batch(&mut rng, m, bm);
        let b2 = draw_batch(&mut rng, n, bn);
        let (x1, z1) = (rows(&data.stage1_x, &b1), rows(&data.stage1_z, &b1));
        let (y2, z2) = (entries(&data.stage2_y, &b2), rows(&data.stage2_z, &b2));
        let mut step = || -> Result<IterationLog> {
            for _ in 0..cfg.inner_stage2 {
                let (loss, gx, gz) =
                    grad_stage2_joint(&psi, &phi, &x1, &z1, &z2, &y2, cfg.lambda1, cfg.lambda2)?;
                check_loss(loss, it)?;
                adam_step(
                    psi.as_mlp_mut().expect("trainable"),
                    &gx,
                    &mut adam_x,
                    cfg.lr,
                )?;
                adam_step(
                    phi.as_mlp_mut().expect("trainable"),
                    &gz,
                    &mut adam_z,
                    cfg.lr,
                )?;
            }
            let (psi1, phi1, phi2) = (psi.eval(&x1)?, phi.eval(&z1)?, phi.eval(&z2)?);
            let s1 = stage1_solve(&psi1, &phi1, cfg.lambda1)?;
            let stage1 = stage1_loss(&psi1, &phi1, &s1, cfg.lambda1)?;
            let s1p = Stage1Projection::new(&phi1, cfg.lambda1)?.stage1(&psi1)?;
            let u = stage2_solve(&s1p, &phi2, &y2, cfg.lambda2)?;
            let stage2 = stage2_loss(&s1p, &phi2, &y2, &u, cfg.lambda2)?;
            check_loss(stage1, it)?;
            check_loss(stage2, it)?;
            let test_mse = match test {
                Some(score) => {
                    let (_, u) = final_fit(data, &psi, &phi, cfg.lambda1, cfg.lambda2)?;
                    Some(score(&StructuralModel::new(u, psi.clone())?)?)
                }
                None => None,
            };
            Ok(IterationLog {
                iteration: it,
                stage1_loss: stage1,
                stage2_loss: stage2,
                l1_oos: None,
                l2_oos: None,
                test_mse,
            })
        };
        match step() {
            Ok(rec) => curves.log.push(rec),
            Err(e) => {
                curves.diverged = Some(e.to_string());
                break;
            }
        }
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iv::grad::tests::tanh_net;
    use crate::linalg::Mat;

    fn toy(seed: u64) -> IvDataset {
        let mut rng = RngStream::new(seed, 0);
        let z1 = rng.gaussian_mat(50, 2, 1.0);
        let x1 = Mat::from_fn(50, 1, |i, _| z1[(i, 0)] + 0.3 * rng.gaussian());
        let z2 = rng.gaussian_mat(40, 2, 1.0);
        let y: Vec<f64> = (0..40)
            .map(|i| z2[(i, 0)].sin() + 0.1 * rng.gaussian())
            .collect();
        IvDataset::new(x1, z1, y, z2).unwrap()
    }

    fn cfg() -> DfivConfig {
        DfivConfig {
            epochs: 7,
            lr: 1e-2,
            batch_m: Some(30),
            batch_n: Some(30),
            ..DfivConfig::default()
        }
    }

    #[test]
    fn one_record_per_iteration() {
        let data = toy(1);
        let score = |m: &StructuralModel| -> Result<f64> { Ok(m.u.iter().map(|u| u * u).sum()) };
        let curves = ablation_joint_training(
            &data,
            tanh_net(&[1, 5, 3], 1),
            tanh_net(&[2, 5, 4], 2),
            &cfg(),
            Some(&score),
        )
        .unwrap();
        assert_eq!(curves.log.len(), 7);
        assert!(curves.diverged.is_none());
        assert!(curves.log.iter().all(|r| r.test_mse.is_some()));
        let again = ablation_joint_training(
            &data,
            tanh_net(&[1, 5, 3], 1),
            tanh_net(&[2, 5, 4], 2),
            &cfg(),
            Some(&score),
        )
        .unwrap();
        assert_eq!(curves, again);
    }

    #[test]
    fn divergence_is_recorded_not_raised() {
        let data = toy(2);
        let score = |_: &StructuralModel| -> Result<f64> { Ok(f64::NAN) };
        let bad = |_: &StructuralModel| -> Result<f64> {
            Err(Error::Diverged {
                iteration: 3,
                loss: f64::INFINITY,
            })
        };
        let curves = ablation_joint_training(
            &data,
            tanh_net(&[1, 5, 3], 1),
            tanh_net(&[2, 5, 4], 2),
            &cfg(),
            Some(&bad),
        )
        .unwrap();
        assert!(curves.log.is_empty());
        assert!(curves.diverged.is_some());
        let ok = ablation_joint_training(
            &data,
            tanh_net(&[1, 5, 3], 1),
            tanh_net(&[2, 5, 4], 2),
            &cfg(),
            Some(&score),
        );
        assert_eq!(ok.unwrap().log.len(), 7);
    }

    #[test]
    fn fixed_features_are_rejected() {
        let data = toy(3);
        let f = Features::identity(1).with_intercept();
        assert!(ablation_joint_training(&data, f, tanh_net(&[2, 5, 4], 2), &cfg(), None).is_err());
    }
}

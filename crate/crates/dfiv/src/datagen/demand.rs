//! Airline-ticket demand design: price `P` is confounded with sales `Y`
//! through a shared noise term, fuel cost `C` shifts price only, and time
//! of year `T` and customer type `S` are observed confounders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iv::{IvDataset, JointSample};
use crate::linalg::{Mat, RngStream};

const SAMPLE_STREAM: u64 = 0x6465_6d61;

/// Seasonal demand curve.
pub fn demand_h(t: f64) -> f64 {
    2.0 * ((t - 5.0).powi(4) / 600.0 + (-4.0 * (t - 5.0).powi(2)).exp() + t / 10.0 - 2.0)
}

/// True expected sales at price `p`, time `t` and customer type `s ∈ 1..=7`.
pub fn demand_fstruct(p: f64, t: f64, s: u32) -> Result<f64> {
    if !(1..=7).contains(&s) {
        return Err(Error::InvalidArgument(format!(
            "customer type must be in 1..=7, got {s}"
        )));
    }
    let s = f64::from(s);
    Ok(100.0 + (10.0 + p) * s * demand_h(t) - 2.0 * p)
}

fn fstruct_unchecked(p: f64, t: f64, s: f64) -> f64 {
    100.0 + (10.0 + p) * s * demand_h(t) - 2.0 * p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandConfig {
    /// Correlation between the price noise and the outcome noise.
    pub rho: f64,
    /// Training samples, split evenly between the two stages.
    pub n_total: usize,
    /// Extra joint samples kept for held-out stage losses.
    pub n_holdout: usize,
    pub seed: u64,
}

impl DemandConfig {
    pub fn new(rho: f64, n_total: usize, seed: u64) -> Self {
        Self {
            rho,
            n_total,
            n_holdout: 0,
            seed,
        }
    }
}

/// One draw of the demand process, including the hidden noise terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemandSample {
    pub y: f64,
    pub p: f64,
    pub t: f64,
    pub s: u32,
    pub c: f64,
    pub v_noise: f64,
    pub eps: f64,
}

impl DemandSample {
    pub fn fstruct(&self) -> f64 {
        fstruct_unchecked(self.p, self.t, f64::from(self.s))
    }
}

/// How the demand variables are arranged into treatment, instrument and
/// observable columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemandView {
    /// Treatment `(P, T, S)`, instrument `(C, T, S)`: the observed
    /// confounders are put on both sides.
    Augmented,
    /// Treatment `P`, instrument `C`, observables `(T, S)`.
    Observable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemandData {
    pub config: DemandConfig,
    pub stage1: Vec<DemandSample>,
    pub stage2: Vec<DemandSample>,
    pub holdout: Vec<DemandSample>,
}

fn cols(samples: &[DemandSample], f: impl Fn(&DemandSample) -> Vec<f64>) -> Mat {
    let width = samples.first().map_or(0, |s| f(s).len());
    let mut m = Mat::zeros(samples.len(), width);
    for (i, s) in samples.iter().enumerate() {
        m.row_mut(i).copy_from_slice(&f(s));
    }
    m
}

fn treatment(view: DemandView) -> impl Fn(&DemandSample) -> Vec<f64> {
    move |s| match view {
        DemandView::Augmented => vec![s.p, s.t, f64::from(s.s)],
        DemandView::Observable => vec![s.p],
    }
}

fn instrument(view: DemandView) -> impl Fn(&DemandSample) -> Vec<f64> {
    move |s| match view {
        DemandView::Augmented => vec![s.c, s.t, f64::from(s.s)],
        DemandView::Observable => vec![s.c],
    }
}

fn observables(s: &DemandSample) -> Vec<f64> {
    vec![s.t, f64::from(s.s)]
}

impl DemandData {
    /// The two-stage dataset in the given arrangement. Held-out samples, if
    /// any, become the dataset's held-out joint triples.
    pub fn dataset(&self, view: DemandView) -> Result<IvDataset> {
        let mut ds = IvDataset::new(
            cols(&self.stage1, treatment(view)),
            cols(&self.stage1, instrument(view)),
            self.stage2.iter().map(|s| s.y).collect(),
            cols(&self.stage2, instrument(view)),
        )?;
        if view == DemandView::Observable {
            ds = ds.with_observables(
                cols(&self.stage1, observables),
                cols(&self.stage2, observables),
            )?;
        }
        if !self.holdout.is_empty() {
            let h = &self.holdout;
            ds = ds.with_holdout(JointSample {
                x: cols(h, treatment(view)),
                y: h.iter().map(|s| s.y).collect(),
                z: cols(h, instrument(view)),
                o: (view == DemandView::Observable).then(|| cols(h, observables)),
            })?;
        }
        Ok(ds)
    }

    /// Every training sample as `(P, T, S)` rows with its outcome, for
    /// direct regression of `Y` on the treatment.
    pub fn joint_xy(&self) -> (Mat, Vec<f64>) {
        let all: Vec<DemandSample> = self.stage1.iter().chain(&self.stage2).copied().collect();
        (
            cols(&all, treatment(DemandView::Augmented)),
            all.iter().map(|s| s.y).collect(),
        )
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &DemandSample> {
        self.stage1.iter().chain(&self.stage2).chain(&self.holdout)
    }
}

fn draw(rng: &mut RngStream, rho: f64) -> DemandSample {
    let s = 1 + rng.below(7) as u32;
    let t = rng.uniform_range(0.0, 10.0);
    let c = rng.gaussian();
    let v_noise = rng.gaussian();
    let eps = rho * v_noise + (1.0 - rho * rho).sqrt() * rng.gaussian();
    let p = 25.0 + (c + 3.0) * demand_h(t) + v_noise;
    let y = fstruct_unchecked(p, t, f64::from(s)) + eps;
    DemandSample {
        y,
        p,
        t,
        s,
        c,
        v_noise,
        eps,
    }
}

/// Draws `n_total` training samples (first half stage 1, second half
/// stage 2) followed by `n_holdout` held-out samples.
pub fn demand_generate(cfg: &DemandConfig) -> Result<DemandData> {
    if !(0.0..=1.0).contains(&cfg.rho) {
        return Err(Error::InvalidArgument(format!(
            "rho must lie in [0, 1], got {}",
            cfg.rho
        )));
    }
    if cfg.n_total < 2 {
        return Err(Error::InvalidArgument(
            "need at least two training samples".into(),
        ));
    }
    let mut rng = RngStream::new(cfg.seed, SAMPLE_STREAM);
    let mut samples: Vec<DemandSample> = (0..cfg.n_total + cfg.n_holdout)
        .map(|_| draw(&mut rng, cfg.rho))
        .collect();
    let holdout = samples.split_off(cfg.n_total);
    let stage2 = samples.split_off(cfg.n_total / 2);
    Ok(DemandData {
        config: cfg.clone(),
        stage1: samples,
        stage2,
        holdout,
    })
}

/// Evaluation grid with the true structural values.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandGrid {
    /// Rows `(p, t, s)`.
    pub points: Mat,
    pub truth: Vec<f64>,
}

impl DemandGrid {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn price(&self) -> Mat {
        self.points.select_cols(&[0])
    }

    pub fn observables(&self) -> Mat {
        self.points.select_cols(&[1, 2])
    }

    pub fn mse(&self, pred: &[f64]) -> f64 {
        mse(pred, &self.truth)
    }
}

pub(crate) fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    pred.iter()
        .zip(truth)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / truth.len() as f64
}

fn linspace(lo: f64, hi: f64, k: usize) -> impl Iterator<Item = f64> {
    (0..k).map(move |i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
}

/// 20 prices in `[10, 25]` × 20 times in `[0, 10]` × customer types 1..=7,
/// price varying slowest.
pub fn demand_test_grid() -> DemandGrid {
    let mut rows = Vec::with_capacity(2800);
    let mut truth = Vec::with_capacity(2800);
    for p in linspace(10.0, 25.0, 20) {
        for t in linspace(0.0, 10.0, 20) {
            for s in 1..=7u32 {
                rows.push([p, t, f64::from(s)]);
                truth.push(fstruct_unchecked(p, t, f64::from(s)));
            }
        }
    }
    DemandGrid {
        points: Mat::from_rows(&rows),
        truth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn seasonal_curve_values() {
        assert!((demand_h(5.0) + 1.0).abs() < 1e-12);
        assert!((demand_h(0.0) + 1.916_666_666_666_667).abs() < 1e-9);
        assert!((demand_h(10.0) - 0.083_333_333_333_333).abs() < 1e-9);
    }

    #[test]
    fn structural_function_values() {
        assert!((demand_fstruct(25.0, 5.0, 2).unwrap() + 20.0).abs() < 1e-12);
        assert!((demand_fstruct(0.0, 5.0, 1).unwrap() - 90.0).abs() < 1e-12);
        let slope = demand_fstruct(11.0, 5.0, 2).unwrap() - demand_fstruct(10.0, 5.0, 2).unwrap();
        assert!((slope + 4.0).abs() < 1e-12);
        assert!(demand_fstruct(1.0, 1.0, 0).is_err());
        assert!(demand_fstruct(1.0, 1.0, 8).is_err());
    }

    #[test]
    fn noise_correlation_follows_rho() {
        for (rho, target, tol) in [(0.0, 0.0, 0.03), (0.9, 0.9, 0.05)] {
            let d = demand_generate(&DemandConfig::new(rho, 10_000, 3)).unwrap();
            let v: Vec<f64> = d.all_samples().map(|s| s.v_noise).collect();
            let e: Vec<f64> = d.all_samples().map(|s| s.eps).collect();
            assert!((corr(&v, &e) - target).abs() <= tol);
        }
    }

    #[test]
    fn instrument_is_exogenous_and_relevant() {
        let d = demand_generate(&DemandConfig::new(0.5, 10_000, 4)).unwrap();
        let c: Vec<f64> = d.all_samples().map(|s| s.c).collect();
        let e: Vec<f64> = d.all_samples().map(|s| s.eps).collect();
        let p: Vec<f64> = d.all_samples().map(|s| s.p).collect();
        let t: Vec<f64> = d.all_samples().map(|s| s.t).collect();
        assert!(corr(&c, &e).abs() <= 0.03);
        assert!(corr(&c, &p).abs() >= 0.1);
        let n = c.len() as f64;
        assert!((c.iter().sum::<f64>() / n).abs() <= 0.03);
        assert!((t.iter().sum::<f64>() / n - 5.0).abs() <= 0.1);
        assert!(d
            .all_samples()
            .all(|s| (0.0..=10.0).contains(&s.t) && (1..=7).contains(&s.s)));
    }

    #[test]
    fn generation_is_deterministic_and_split_evenly() {
        let cfg = DemandConfig {
            n_holdout: 10,
            ..DemandConfig::new(0.25, 100, 5)
        };
        let a = demand_generate(&cfg).unwrap();
        assert_eq!(a, demand_generate(&cfg).unwrap());
        assert_eq!(
            (a.stage1.len(), a.stage2.len(), a.holdout.len()),
            (50, 50, 10)
        );
        // held-out samples do not perturb the training samples
        let plain = demand_generate(&DemandConfig::new(0.25, 100, 5)).unwrap();
        assert_eq!(plain.stage1, a.stage1);
        assert_eq!(plain.stage2, a.stage2);

        let ds = a.dataset(DemandView::Observable).unwrap();
        assert_eq!((ds.stage1_x.cols(), ds.stage1_z.cols()), (1, 1));
        assert!(ds.has_observables() && ds.holdout.as_ref().unwrap().o.is_some());
        let ds = a.dataset(DemandView::Augmented).unwrap();
        assert_eq!((ds.stage1_x.cols(), ds.stage1_z.cols()), (3, 3));
        assert_eq!(ds.stage1_z[(0, 1)], a.stage1[0].t);
    }

    #[test]
    fn test_grid_layout() {
        let g = demand_test_grid();
        assert_eq!(g.len(), 2800);
        assert_eq!(g.points.row(0), &[10.0, 0.0, 1.0]);
        assert_eq!(g.points.row(1), &[10.0, 0.0, 2.0]);
        assert_eq!(g.points.row(2799), &[25.0, 10.0, 7.0]);
        // (p = 25, t = 5, s = 2) is absent from the t-grid, so check the
        // truth column against the formula instead
        for i in (0..2800).step_by(97) {
            let r = g.points.row(i);
            assert_eq!(g.truth[i], demand_fstruct(r[0], r[1], r[2] as u32).unwrap());
        }
    }
}

//! Fixed-feature estimators: linear 2SLS, polynomial sieve 2SLS,
//! random-Fourier-feature 2SLS, and direct (non-IV) ridge regression.

use crate::error::Result;
use crate::iv::dataset::IvDataset;
use crate::iv::features::{rff_map, Bandwidth, Features};
use crate::iv::model::StructuralModel;
use crate::iv::stages::solve_vector;
use crate::iv::train::{check_dims, final_fit, TwoStageFit};
use crate::linalg::{Mat, RngStream};

/// Two-stage least squares with the given fixed features: stage 1 on all
/// stage-1 rows, stage 2 on all stage-2 rows, no gradient steps.
pub fn fixed_feature_2sls(
    data: &IvDataset,
    psi: Features,
    phi: Features,
    lambda1: f64,
    lambda2: f64,
) -> Result<TwoStageFit> {
    data.validate()?;
    check_dims(data, &psi, &phi)?;
    let (stage1, u) = final_fit(data, &psi, &phi, lambda1, lambda2)?;
    Ok(TwoStageFit {
        model: StructuralModel::new(u, psi)?,
        phi,
        stage1,
        log: Vec::new(),
    })
}

/// Ridge regression of `y` on `features(x)`, ignoring the instrument. This
/// is the confounded estimator IV methods are compared against.
pub fn ridge_regression(
    x: &Mat,
    y: &[f64],
    features: Features,
    lambda: f64,
) -> Result<StructuralModel> {
    let design = features.eval(x)?;
    let u = solve_vector(&design, y, lambda)?;
    StructuralModel::new(u, features)
}

/// Identity features plus intercept, standardized on the training inputs.
pub fn linear_features(inputs: &Mat) -> Features {
    Features::identity(inputs.cols())
        .standardized_on(inputs)
        .with_intercept()
}

/// Monomials up to total `degree` plus intercept, standardized on the
/// training inputs.
pub fn sieve_features(inputs: &Mat, degree: u32) -> Result<Features> {
    Ok(Features::polynomial(inputs.cols(), degree)?
        .standardized_on(inputs)
        .with_intercept())
}

/// Random Fourier features with median-heuristic bandwidth on standardized
/// inputs, plus intercept.
pub fn rff_features(inputs: &Mat, count: usize, rng: &mut RngStream) -> Result<Features> {
    let unit = Features::identity(inputs.cols()).standardized_on(inputs);
    let scaled = unit.eval(inputs)?;
    let rff = rff_map(inputs.cols(), count, Bandwidth::Median, Some(&scaled), rng)?;
    let mut f = Features::fourier(rff).with_intercept();
    f.shift = unit.shift;
    f.scale = unit.scale;
    Ok(f)
}

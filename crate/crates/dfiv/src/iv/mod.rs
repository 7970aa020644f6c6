//! Two-stage instrumental-variable regression with learned features.

pub mod baselines;
pub mod confounded;
pub mod dataset;
pub mod features;
pub mod grad;
pub mod model;
pub mod stages;
pub mod train;

pub use baselines::{
    fixed_feature_2sls, linear_features, rff_features, ridge_regression, sieve_features,
};
pub use confounded::{
    fixed_feature_2sls_obs, instrument_inputs, row_tensor, stage1_solve_obs, stage2_loss_obs,
    stage2_solve_obs, tensor_product, train_dfiv_obs, ObsConfig,
};
pub use dataset::{IvDataset, JointSample};
pub use features::{
    median_heuristic, rff_map, Bandwidth, FeatureKind, Features, PolynomialBasis,
    RandomFourierFeatures,
};
pub use grad::{grad_stage1_theta_z, grad_stage2_theta_x, grad_stage2_theta_z, Stage1GradMode};
pub use model::StructuralModel;
pub use stages::{
    stage1_loss, stage1_solve, stage2_loss, stage2_solve, Stage1Projection, Stage1Sol,
};
pub use train::{
    log_to_jsonl, oos_stage_losses, train_dfiv, train_dfiv_monitored, DfivConfig, IterationLog,
    TwoStageFit, DIVERGENCE_LIMIT,
};

//! Seeded synthetic data with known structural functions.

mod csvio;
mod demand;
mod highdim;
mod linear;

pub use csvio::{write_dataset_csv, write_truth_csv};
pub use demand::{
    demand_fstruct, demand_generate, demand_h, demand_test_grid, DemandConfig, DemandData,
    DemandGrid, DemandSample, DemandView,
};
pub use highdim::{
    highdim_generate, highdim_generate_with, highdim_test_grid, HighDimConfig, HighDimData,
    HighDimEmbedding, Latents,
};
pub use linear::{linear_gaussian_generate, ols_slope, LinearGaussianConfig, LinearGaussianData};

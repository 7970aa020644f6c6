//! Dense linear algebra, ridge solves and seeded sampling.

mod mat;
mod rng;
mod solve;

pub use mat::{dot, norm2, Mat};
pub use rng::{sample_gaussian, RngStream};
pub use solve::{
    lu_solve, ridge_gram, ridge_solve, spd_solve, spd_solve_with_residual, Cholesky, JITTER_LADDER,
};

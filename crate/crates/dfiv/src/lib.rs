//! Deep feature instrumental variable regression: neural feature maps for
//! both stages of two-stage least squares, each stage solved in closed form.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod datagen;
pub mod error;
pub mod harness;
pub mod iv;
pub mod linalg;
pub mod neural;
pub mod ope;
mod textio;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    pub mod overview {}
    #[doc = include_str!("../../../book/src/two-stages.md")]
    pub mod two_stages {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/observables.md")]
    pub mod observables {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/ope.md")]
    pub mod ope {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod experiments {}
}

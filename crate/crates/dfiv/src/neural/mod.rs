//! MLP feature maps with reverse-mode parameter gradients and Adam.

mod adam;
mod grad;
mod io;
mod mlp;

pub use adam::{adam_step, AdamState};
pub use grad::GradBuffer;
pub use mlp::{Activation, FeatureMap, Layer};

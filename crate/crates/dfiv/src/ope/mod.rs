//! Off-policy evaluation on finite MDPs through the two-stage estimator.

mod data;
mod mdp;
mod train;

pub use data::{generate_transitions, one_hot, TransitionDataset};
pub use mdp::{
    bellman_residual_max, exact_q, mc_policy_value, msbe, policy_value, random_mdp, MdpSpec, Policy,
};
pub use train::{ope_residuals, ope_train, OpeFit};

//! Experiment plumbing: tuning, ablations, run specs and result files.

mod ablation;
mod fsio;
mod gen;
mod result;
mod run;
mod spec;
mod tune;

pub use crate::iv::oos_stage_losses;
pub use ablation::{ablation_joint_training, AblationCurves};
pub use fsio::write_atomic;
pub use gen::generate_files;
pub use result::{median, summary, RepeatResult, RunOutput, RunResult};
pub use run::{
    initial_features, iv_problem, run_experiment, run_tuning, task_test_grid, InitialFeatures,
    IvProblem, OutcomeScaling, TestGrid,
};
pub use spec::{parse_pairs, Estimator, RunSpec, Task, TuneMode};
pub use tune::{
    tune_by, tune_lambdas, tune_lambdas_obs, tuning_config, CandidateScore, TuneGrid, TuneOutcome,
    TUNING_BUDGET,
};

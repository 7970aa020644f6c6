//! Writing generated datasets to disk.

use std::path::{Path, PathBuf};

use crate::datagen::{
    demand_generate, highdim_generate, linear_gaussian_generate, write_dataset_csv,
    write_truth_csv, DemandConfig, HighDimConfig, LinearGaussianConfig,
};
use crate::error::Result;
use crate::harness::spec::{RunSpec, Task};
use crate::harness::write_atomic;
use crate::ope::{generate_transitions, random_mdp, Policy};

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Generates the data for `spec.task` at `spec.seed` with `spec.n` samples
/// (first sweep value of `rho`) and writes it to `out`, with hidden
/// quantities in a sibling `.truth.csv` (or the MDP in a sibling `.mdp`
/// file for policy evaluation). Returns the written paths.
pub fn generate_files(spec: &RunSpec, out: &Path) -> Result<Vec<PathBuf>> {
    let truth_path = sibling(out, ".truth.csv");
    match spec.task {
        Task::Demand | Task::DemandObs | Task::AblationJoint => {
            let d = demand_generate(&DemandConfig {
                rho: spec.rho[0],
                n_total: spec.n,
                n_holdout: spec.n_holdout,
                seed: spec.seed,
            })?;
            let tagged = d
                .stage1
                .iter()
                .map(|s| (1.0, s))
                .chain(d.stage2.iter().map(|s| (2.0, s)))
                .chain(d.holdout.iter().map(|s| (0.0, s)));
            let rows: Vec<[f64; 6]> = tagged
                .clone()
                .map(|(g, s)| [g, s.y, s.p, s.t, f64::from(s.s), s.c])
                .collect();
            write_dataset_csv(out, &header(&["stage", "y", "p", "t", "s", "c"]), rows)?;
            let truth: Vec<[f64; 3]> = tagged
                .map(|(_, s)| [s.fstruct(), s.v_noise, s.eps])
                .collect();
            write_truth_csv(&truth_path, &header(&["f", "v_noise", "eps"]), truth)?;
            Ok(vec![out.to_path_buf(), truth_path])
        }
        Task::HighDim => {
            let cfg = HighDimConfig::calibrated(spec.treatment_dim, spec.embed_seed)?;
            let d = highdim_generate(&cfg, spec.n, spec.seed)?;
            let m = spec.n / 2;
            let mut names = vec!["stage".to_string(), "y".to_string()];
            names.extend((0..cfg.treatment_dim).map(|j| format!("x{j}")));
            names.extend(["z_scale", "z_rotation", "z_pos_x"].map(String::from));
            let rows: Vec<Vec<f64>> = (0..spec.n)
                .map(|i| {
                    let l = &d.latents[i];
                    let mut r = vec![if i < m { 1.0 } else { 2.0 }, d.y_all[i]];
                    r.extend_from_slice(d.x_all.row(i));
                    r.extend([l.scale, l.rotation, l.pos_x]);
                    r
                })
                .collect();
            write_dataset_csv(out, &names, rows)?;
            let truth: Vec<[f64; 2]> = (0..spec.n)
                .map(|i| [d.fstruct_all[i], d.latents[i].pos_y])
                .collect();
            write_truth_csv(&truth_path, &header(&["f", "pos_y"]), truth)?;
            Ok(vec![out.to_path_buf(), truth_path])
        }
        Task::LinearGaussian => {
            let cfg = LinearGaussianConfig {
                slope: spec.slope,
                strength: spec.strength,
                confounding: spec.confounding,
            };
            let half = (spec.n / 2).max(1);
            let d = linear_gaussian_generate(cfg, half, spec.seed)?;
            let z: Vec<f64> = d
                .dataset
                .stage1_z
                .as_slice()
                .iter()
                .chain(d.dataset.stage2_z.as_slice())
                .copied()
                .collect();
            let rows: Vec<[f64; 4]> = (0..2 * half)
                .map(|i| {
                    [
                        if i < half { 1.0 } else { 2.0 },
                        d.y_all[i],
                        d.x_all[i],
                        z[i],
                    ]
                })
                .collect();
            write_dataset_csv(out, &header(&["stage", "y", "x", "z"]), rows)?;
            let truth: Vec<[f64; 1]> = d.x_all.iter().map(|x| [spec.slope * x]).collect();
            write_truth_csv(&truth_path, &header(&["f"]), truth)?;
            Ok(vec![out.to_path_buf(), truth_path])
        }
        Task::Ope => {
            let mut mdp = random_mdp(
                spec.n_states,
                spec.n_actions,
                spec.reward_sd,
                spec.gamma,
                spec.seed,
            )?;
            mdp.action_noise = spec.action_noise;
            let behavior = Policy::uniform(spec.n_states, spec.n_actions);
            let data = generate_transitions(&mdp, &behavior, spec.n, spec.seed, &mdp.initial)?;
            data.write_csv(out)?;
            let mdp_path = sibling(out, ".mdp");
            write_atomic(&mdp_path, mdp.to_text().as_bytes())?;
            Ok(vec![out.to_path_buf(), mdp_path])
        }
    }
}

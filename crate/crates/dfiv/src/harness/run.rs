//! Seeded experiment runs driven by a [`RunSpec`].

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::datagen::{
    demand_generate, demand_test_grid, highdim_generate, highdim_test_grid,
    linear_gaussian_generate, DemandConfig, DemandView, HighDimConfig, LinearGaussianConfig,
};
use crate::error::{Error, Result};
use crate::harness::result::{RepeatResult, RunOutput, RunResult};
use crate::harness::spec::{Estimator, RunSpec, Task, TuneMode};
use crate::harness::{
    ablation_joint_training, tune_lambdas, tune_lambdas_obs, TuneGrid, TuneOutcome,
};
use crate::iv::{
    fixed_feature_2sls, fixed_feature_2sls_obs, instrument_inputs, linear_features, rff_features,
    ridge_regression, sieve_features, train_dfiv, train_dfiv_monitored, train_dfiv_obs, DfivConfig,
    Features, IterationLog, IvDataset, JointSample, StructuralModel,
};
use crate::linalg::{Mat, RngStream};
use crate::neural::{Activation, FeatureMap};
use crate::ope::{
    exact_q, generate_transitions, msbe, ope_train, policy_value, random_mdp, Policy,
};

const INIT_STREAM: u64 = 0x696e_6974;
/// Seed offset for the independent draw that supplies held-out samples
/// when a generator has no held-out option of its own.
const HOLDOUT_SEED_OFFSET: u64 = 0x686f_6c64_0000;

/// Affine map between the raw outcome and the scale the estimators see.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeScaling {
    pub mean: f64,
    pub sd: f64,
}

impl OutcomeScaling {
    pub fn identity() -> Self {
        Self { mean: 0.0, sd: 1.0 }
    }

    /// Mean and population standard deviation of `y` (sd 1 for constant
    /// `y`).
    pub fn fit(y: &[f64]) -> Self {
        let n = y.len().max(1) as f64;
        let mean = y.iter().sum::<f64>() / n;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            mean,
            sd: if sd > 1e-12 { sd } else { 1.0 },
        }
    }

    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.mean) / self.sd).collect()
    }

    /// Stage-2 outcomes and held-out outcomes on the scaled axis.
    pub fn apply_dataset(&self, data: &IvDataset) -> IvDataset {
        let mut out = data.clone();
        out.stage2_y = self.apply(&data.stage2_y);
        if let Some(h) = out.holdout.as_mut() {
            h.y = self.apply(&h.y);
        }
        out
    }

    /// Turns a model fitted on the scaled outcome into one predicting the
    /// raw outcome. The trailing intercept column absorbs the mean.
    pub fn restore(&self, model: StructuralModel) -> Result<StructuralModel> {
        let intercept_last = model.psi.intercept && model.xi.as_ref().is_none_or(|xi| xi.intercept);
        if !intercept_last {
            return Err(Error::InvalidArgument(
                "restoring the outcome scale needs intercept features".into(),
            ));
        }
        let mut model = model;
        model.u.iter_mut().for_each(|u| *u *= self.sd);
        *model.u.last_mut().expect("intercept column") += self.mean;
        Ok(model)
    }
}

/// Noise-free evaluation points with true structural values.
#[derive(Debug, Clone, PartialEq)]
pub struct TestGrid {
    pub x: Mat,
    pub o: Option<Mat>,
    pub truth: Vec<f64>,
}

impl TestGrid {
    pub fn mse(&self, model: &StructuralModel) -> Result<f64> {
        let pred = model.predict(&self.x, self.o.as_ref())?;
        let v = pred
            .iter()
            .zip(&self.truth)
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
            / self.truth.len() as f64;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("test error"))
        }
    }
}

/// Training data for one seed of a structural-function task.
#[derive(Debug, Clone)]
pub struct IvProblem {
    pub data: IvDataset,
    /// All training treatments with their outcomes, for direct regression.
    pub joint_x: Mat,
    pub joint_y: Vec<f64>,
}

/// Per-run state shared by all repeats.
struct Context {
    grid: Option<TestGrid>,
    highdim: Option<HighDimConfig>,
}

impl Context {
    fn new(spec: &RunSpec) -> Result<Self> {
        let highdim = match spec.task {
            Task::HighDim => Some(HighDimConfig::calibrated(
                spec.treatment_dim,
                spec.embed_seed,
            )?),
            _ => None,
        };
        let grid = match spec.task {
            Task::Ope => None,
            _ => Some(test_grid(spec, highdim.as_ref())?),
        };
        Ok(Self { grid, highdim })
    }
}

fn test_grid(spec: &RunSpec, highdim: Option<&HighDimConfig>) -> Result<TestGrid> {
    Ok(match spec.task {
        Task::Demand | Task::AblationJoint => {
            let g = demand_test_grid();
            TestGrid {
                x: g.points.clone(),
                o: None,
                truth: g.truth,
            }
        }
        Task::DemandObs => {
            let g = demand_test_grid();
            TestGrid {
                x: g.price(),
                o: Some(g.observables()),
                truth: g.truth.clone(),
            }
        }
        Task::HighDim => {
            let (x, truth) = highdim_test_grid(highdim.expect("built with the context"))?;
            TestGrid { x, o: None, truth }
        }
        Task::LinearGaussian => {
            let xs: Vec<f64> = (0..61).map(|i| -3.0 + 0.1 * i as f64).collect();
            let truth = xs.iter().map(|x| spec.slope * x).collect();
            TestGrid {
                x: Mat::column(&xs),
                o: None,
                truth,
            }
        }
        Task::Ope => {
            return Err(Error::InvalidArgument(
                "policy evaluation has no test grid".into(),
            ))
        }
    })
}

/// The task's truth grid, as used for the reported test error.
pub fn task_test_grid(spec: &RunSpec) -> Result<TestGrid> {
    let ctx = Context::new(spec)?;
    ctx.grid
        .ok_or_else(|| Error::InvalidArgument("policy evaluation has no test grid".into()))
}

fn linear_config(spec: &RunSpec) -> LinearGaussianConfig {
    LinearGaussianConfig {
        slope: spec.slope,
        strength: spec.strength,
        confounding: spec.confounding,
    }
}

/// Draws the data for one seed of a structural-function task.
pub fn iv_problem(spec: &RunSpec, rho: f64, seed: u64) -> Result<IvProblem> {
    let ctx = Context::new(spec)?;
    build_problem(spec, &ctx, rho, seed)
}

fn build_problem(spec: &RunSpec, ctx: &Context, rho: f64, seed: u64) -> Result<IvProblem> {
    match spec.task {
        Task::Demand | Task::DemandObs | Task::AblationJoint => {
            let cfg = DemandConfig {
                rho,
                n_total: spec.n,
                n_holdout: spec.n_holdout,
                seed,
            };
            let d = demand_generate(&cfg)?;
            let view = if spec.task == Task::DemandObs {
                DemandView::Observable
            } else {
                DemandView::Augmented
            };
            let (joint_x, joint_y) = d.joint_xy();
            Ok(IvProblem {
                data: d.dataset(view)?,
                joint_x,
                joint_y,
            })
        }
        Task::HighDim => {
            let cfg = ctx.highdim.as_ref().expect("built with the context");
            let d = highdim_generate(cfg, spec.n, seed)?;
            let mut data = d.dataset;
            if spec.n_holdout > 0 {
                let h = highdim_generate(
                    cfg,
                    spec.n_holdout.max(2),
                    seed.wrapping_add(HOLDOUT_SEED_OFFSET),
                )?;
                let z = Mat::from_fn(h.latents.len(), 3, |i, j| {
                    let l = &h.latents[i];
                    [l.scale, l.rotation, l.pos_x][j]
                });
                data = data.with_holdout(JointSample {
                    x: h.x_all,
                    y: h.y_all,
                    z,
                    o: None,
                })?;
            }
            Ok(IvProblem {
                data,
                joint_x: d.x_all,
                joint_y: d.y_all,
            })
        }
        Task::LinearGaussian => {
            let cfg = linear_config(spec);
            let d = linear_gaussian_generate(cfg, (spec.n / 2).max(1), seed)?;
            let mut data = d.dataset;
            if spec.n_holdout > 0 {
                let k = spec.n_holdout;
                let h = linear_gaussian_generate(cfg, k, seed.wrapping_add(HOLDOUT_SEED_OFFSET))?;
                data = data.with_holdout(JointSample {
                    x: Mat::column(&h.x_all[..k]),
                    y: h.y_all[..k].to_vec(),
                    z: h.dataset.stage1_z,
                    o: None,
                })?;
            }
            Ok(IvProblem {
                data,
                joint_x: Mat::column(&d.x_all),
                joint_y: d.y_all,
            })
        }
        Task::Ope => Err(Error::InvalidArgument(
            "policy evaluation is not an IV regression task".into(),
        )),
    }
}

/// Initial feature maps for one seed: treatment, instrument and (for the
/// observable variant) observable features.
#[derive(Debug, Clone)]
pub struct InitialFeatures {
    pub psi: Features,
    pub phi: Features,
    pub xi: Option<Features>,
}

fn mlp(
    inputs: &Mat,
    layers: &[usize],
    output: Activation,
    rng: &mut RngStream,
) -> Result<Features> {
    let mut dims = vec![inputs.cols()];
    dims.extend_from_slice(layers);
    let fm = FeatureMap::relu_mlp(&dims, output, rng)?;
    Ok(Features::mlp(fm).standardized_on(inputs).with_intercept())
}

/// Builds the estimator's feature maps on the stage-1 inputs of `data`.
pub fn initial_features(spec: &RunSpec, data: &IvDataset, seed: u64) -> Result<InitialFeatures> {
    let root = RngStream::new(seed, INIT_STREAM);
    let (mut r_psi, mut r_phi, mut r_xi) = (root.split(0), root.split(1), root.split(2));
    let x = &data.stage1_x;
    let (z, o) = match &data.stage1_o {
        Some(o) => (instrument_inputs(&data.stage1_z, o)?, Some(o)),
        None => (data.stage1_z.clone(), None),
    };
    let both = |f: &dyn Fn(&Mat, &mut RngStream) -> Result<Features>| -> Result<InitialFeatures> {
        Ok(InitialFeatures {
            psi: f(x, &mut r_psi.clone())?,
            phi: f(&z, &mut r_phi.clone())?,
            xi: o.map(|o| f(o, &mut r_xi.clone())).transpose()?,
        })
    };
    match spec.estimator {
        Estimator::Dfiv | Estimator::DfivObs => Ok(InitialFeatures {
            psi: mlp(x, &spec.psi_layers, spec.psi_output, &mut r_psi)?,
            phi: mlp(&z, &spec.phi_layers, Activation::Relu, &mut r_phi)?,
            xi: o
                .map(|o| mlp(o, &spec.xi_layers, Activation::Relu, &mut r_xi))
                .transpose()?,
        }),
        Estimator::Linear2sls => both(&|m, _| Ok(linear_features(m))),
        Estimator::Sieve => both(&|m, _| sieve_features(m, spec.sieve_degree)),
        Estimator::KivRff => {
            // the observable map stays polynomial so the tensor design stays small
            let mut f = both(&|m, r| rff_features(m, spec.rff_count, r))?;
            f.xi = o
                .map(|o| sieve_features(o, spec.sieve_degree))
                .transpose()?;
            Ok(f)
        }
        Estimator::Ridge => Ok(InitialFeatures {
            psi: sieve_features(x, spec.sieve_degree)?,
            phi: linear_features(&z),
            xi: None,
        }),
    }
}

/// Fits the run spec's estimator on `prob` (outcome already on the fitting
/// scale) and returns the model with its training log.
fn fit_model(
    spec: &RunSpec,
    prob: &IvProblem,
    feats: InitialFeatures,
    scaled_joint_y: &[f64],
    cfg: &DfivConfig,
) -> Result<(StructuralModel, Vec<IterationLog>)> {
    let data = &prob.data;
    let InitialFeatures { psi, phi, xi } = feats;
    let fit = match (spec.estimator, xi) {
        (Estimator::Ridge, _) => {
            let f = sieve_features(&prob.joint_x, spec.sieve_degree)?;
            return Ok((
                ridge_regression(&prob.joint_x, scaled_joint_y, f, cfg.lambda2)?,
                Vec::new(),
            ));
        }
        (Estimator::Dfiv, _) => train_dfiv(data, psi, phi, cfg)?,
        (Estimator::DfivObs, Some(xi)) => {
            let obs = crate::iv::ObsConfig {
                base: cfg.clone(),
                ..spec.obs_config()
            };
            train_dfiv_obs(data, psi, phi, xi, &obs)?
        }
        (_, Some(xi)) => fixed_feature_2sls_obs(data, psi, phi, xi, cfg.lambda1, cfg.lambda2)?,
        (Estimator::DfivObs, None) => {
            return Err(Error::InvalidArgument(
                "the observable estimator needs observables".into(),
            ))
        }
        (_, None) => fixed_feature_2sls(data, psi, phi, cfg.lambda1, cfg.lambda2)?,
    };
    Ok((fit.model, fit.log))
}

fn tune(spec: &RunSpec, prob: &IvProblem, seed: u64) -> Result<TuneOutcome> {
    let grid = TuneGrid::symmetric(spec.grid.clone())?;
    let feats = initial_features(spec, &prob.data, seed)?;
    let scaling = scaling_for(spec, &prob.data);
    let data = scaling.apply_dataset(&prob.data);
    match feats.xi {
        Some(xi) => tune_lambdas_obs(
            &data,
            &feats.psi,
            &feats.phi,
            &xi,
            &grid,
            &spec.obs_config(),
        ),
        None => tune_lambdas(&data, &feats.psi, &feats.phi, &grid, &spec.dfiv),
    }
}

fn scaling_for(spec: &RunSpec, data: &IvDataset) -> OutcomeScaling {
    if spec.standardize_y {
        OutcomeScaling::fit(&data.stage2_y)
    } else {
        OutcomeScaling::identity()
    }
}

fn iv_repeat(
    spec: &RunSpec,
    ctx: &Context,
    rho: f64,
    seed: u64,
    lambdas: Option<(f64, f64)>,
) -> Result<RepeatResult> {
    let prob = build_problem(spec, ctx, rho, seed)?;
    let mut cfg = DfivConfig {
        seed,
        ..spec.dfiv.clone()
    };
    let lambdas = match (spec.tune, lambdas) {
        (TuneMode::PerRepeat, _) => {
            let t = tune(spec, &prob, seed)?;
            Some((t.lambda1, t.lambda2))
        }
        (_, l) => l,
    };
    if let Some((l1, l2)) = lambdas {
        cfg.lambda1 = l1;
        cfg.lambda2 = l2;
    }
    let scaling = scaling_for(spec, &prob.data);
    let scaled = IvProblem {
        data: scaling.apply_dataset(&prob.data),
        ..prob.clone()
    };
    let feats = initial_features(spec, &scaled.data, seed)?;
    let joint_y = scaling.apply(&prob.joint_y);
    let grid = ctx.grid.as_ref().expect("structural tasks have a grid");

    if spec.task == Task::AblationJoint {
        return ablation_repeat(&scaled.data, feats, &cfg, scaling, grid, seed);
    }
    let (model, log) = fit_model(spec, &scaled, feats, &joint_y, &cfg)?;
    let model = scaling.restore(model)?;
    Ok(RepeatResult {
        metric: Some(grid.mse(&model)?),
        error: None,
        log,
        ..RepeatResult::failed(seed, cfg.lambda1, cfg.lambda2, String::new())
    })
}

fn ablation_repeat(
    data: &IvDataset,
    feats: InitialFeatures,
    cfg: &DfivConfig,
    scaling: OutcomeScaling,
    grid: &TestGrid,
    seed: u64,
) -> Result<RepeatResult> {
    let score = |m: &StructuralModel| grid.mse(&scaling.restore(m.clone())?);
    let dfiv = train_dfiv_monitored(data, feats.psi.clone(), feats.phi.clone(), cfg, &score)?;
    let joint = ablation_joint_training(data, feats.psi, feats.phi, cfg, Some(&score))?;
    let mut extra = BTreeMap::new();
    extra.insert("dfiv_test_mse".to_string(), score(&dfiv.model)?);
    if let Some(last) = dfiv.log.last() {
        extra.insert("dfiv_stage1_final".to_string(), last.stage1_loss);
    }
    if let (Some(first), Some(last)) = (joint.log.first(), joint.log.last()) {
        extra.insert("joint_stage1_initial".to_string(), first.stage1_loss);
        extra.insert("joint_stage1_final".to_string(), last.stage1_loss);
        extra.insert(
            "joint_stage1_max".to_string(),
            joint.log.iter().map(|r| r.stage1_loss).fold(0.0, f64::max),
        );
    }
    let metric = joint.log.last().and_then(|r| r.test_mse);
    let error = match (&metric, &joint.diverged) {
        (None, Some(d)) => Some(format!(
            "joint training diverged before the first record: {d}"
        )),
        _ => None,
    };
    Ok(RepeatResult {
        seed,
        metric,
        error,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        extra,
        log: dfiv.log,
        joint: Some(joint),
    })
}

fn ope_repeat(spec: &RunSpec, seed: u64) -> Result<RepeatResult> {
    let (ns, na) = (spec.n_states, spec.n_actions);
    let mut mdp = random_mdp(ns, na, spec.reward_sd, spec.gamma, seed)?;
    mdp.action_noise = spec.action_noise;
    mdp.validate()?;
    let target = Policy::random(ns, na, seed);
    let behavior = Policy::uniform(ns, na);
    let data = generate_transitions(&mdp, &behavior, spec.n, seed, &mdp.initial)?;
    let k = ns * na;
    let mut cfg = DfivConfig {
        seed,
        ..spec.dfiv.clone()
    };
    let (psi, phi) = match spec.estimator {
        Estimator::Linear2sls => {
            cfg.epochs = 0;
            (Features::identity(k), Features::identity(k))
        }
        _ => {
            let root = RngStream::new(seed, INIT_STREAM);
            let mk = |layers: &[usize], act: Activation, child: u64| -> Result<Features> {
                let mut dims = vec![k];
                dims.extend_from_slice(layers);
                Ok(
                    Features::mlp(FeatureMap::relu_mlp(&dims, act, &mut root.split(child))?)
                        .with_intercept(),
                )
            };
            (
                mk(&spec.psi_layers, spec.psi_output, 0)?,
                mk(&spec.phi_layers, Activation::Relu, 1)?,
            )
        }
    };
    let fit = ope_train(&data, &target, spec.gamma, psi, phi, &cfg)?;
    let q_true = exact_q(&mdp, &target)?;
    let v_true = policy_value(&q_true, &mdp.initial, &target)?;
    let v_hat = policy_value(&fit.q, &mdp.initial, &target)?;
    let mut extra = BTreeMap::new();
    extra.insert("v_true".to_string(), v_true);
    extra.insert("v_hat".to_string(), v_hat);
    extra.insert(
        "msbe".to_string(),
        msbe(&fit.q, &mdp, &target, &mdp.initial, &behavior)?,
    );
    extra.insert("q_max_error".to_string(), fit.q.sub(&q_true)?.max_abs());
    Ok(RepeatResult {
        seed,
        metric: Some((v_hat - v_true).abs()),
        error: None,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        extra,
        log: fit.log,
        joint: None,
    })
}

/// Runs every repeat of every sweep value. Repeats use seeds
/// `seed, seed + 1, …` and may run on `spec.threads` workers; results do
/// not depend on the thread count. Failures are recorded per repeat. Writes
/// the output file when `spec.output` is set.
pub fn run_experiment(spec: &RunSpec) -> Result<RunOutput> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let ctx = Context::new(spec)?;
    let sweep: Vec<Option<f64>> = match spec.task {
        Task::Demand | Task::DemandObs | Task::AblationJoint => {
            spec.rho.iter().copied().map(Some).collect()
        }
        _ => vec![None],
    };
    let seeds: Vec<u64> = (0..spec.repeats as u64)
        .map(|r| spec.seed.wrapping_add(r))
        .collect();
    let mut shared_tuning: Option<TuneOutcome> = None;
    let mut records = Vec::with_capacity(sweep.len());
    for rho in sweep {
        let start = Instant::now();
        let rho_val = rho.unwrap_or(spec.rho[0]);
        if spec.tune == TuneMode::Once && shared_tuning.is_none() {
            let prob = build_problem(spec, &ctx, rho_val, spec.seed)?;
            shared_tuning = Some(tune(spec, &prob, spec.seed)?);
        }
        let lambdas = shared_tuning.as_ref().map(|t| (t.lambda1, t.lambda2));
        let repeats: Vec<RepeatResult> = pool.install(|| {
            seeds
                .par_iter()
                .map(|&seed| {
                    let out = match spec.task {
                        Task::Ope => ope_repeat(spec, seed),
                        _ => iv_repeat(spec, &ctx, rho_val, seed, lambdas),
                    };
                    out.unwrap_or_else(|e| {
                        let (l1, l2) = lambdas.unwrap_or((spec.dfiv.lambda1, spec.dfiv.lambda2));
                        RepeatResult::failed(seed, l1, l2, e.to_string())
                    })
                })
                .collect()
        });
        let mut rec = RunResult {
            task: spec.task.to_string(),
            estimator: spec.estimator.to_string(),
            metric_name: match spec.task {
                Task::Ope => "value_error",
                Task::AblationJoint => "joint_test_mse",
                _ => "test_mse",
            }
            .to_string(),
            rho,
            seeds: seeds.clone(),
            repeats,
            mean: None,
            std_error: None,
            median: None,
            failures: 0,
            tuning: shared_tuning.clone(),
            config: spec.echo(),
            wall_time_s: 0.0,
        };
        rec.summarize();
        rec.wall_time_s = start.elapsed().as_secs_f64();
        records.push(rec);
    }
    let out = RunOutput {
        threads: spec.threads,
        records,
    };
    if let Some(path) = &spec.output {
        out.save(path)?;
    }
    Ok(out)
}

/// Tunes `λ1`, `λ2` for the run spec's estimator on the data of `spec.seed`
/// (first sweep value).
pub fn run_tuning(spec: &RunSpec) -> Result<TuneOutcome> {
    if !matches!(spec.estimator, Estimator::Dfiv | Estimator::DfivObs)
        || matches!(spec.task, Task::Ope)
    {
        return Err(Error::InvalidArgument(
            "tuning applies to the dfiv estimators on IV tasks".into(),
        ));
    }
    if spec.n_holdout == 0 {
        return Err(Error::InvalidArgument("tuning needs n_holdout > 0".into()));
    }
    let ctx = Context::new(spec)?;
    let prob = build_problem(spec, &ctx, spec.rho[0], spec.seed)?;
    tune(spec, &prob, spec.seed)
}

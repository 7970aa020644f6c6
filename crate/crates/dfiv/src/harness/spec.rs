//! Flat `key = value` experiment specifications.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::iv::{DfivConfig, ObsConfig, Stage1GradMode};
use crate::neural::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Demand,
    DemandObs,
    HighDim,
    LinearGaussian,
    Ope,
    AblationJoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Dfiv,
    DfivObs,
    Linear2sls,
    Sieve,
    KivRff,
    /// Direct ridge regression of the outcome on the treatment.
    Ridge,
}

/// When regularization strengths are tuned from held-out losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuneMode {
    Off,
    /// Tune on the first repeat of each sweep value and reuse the result.
    Once,
    PerRepeat,
}

macro_rules! named_enum {
    ($ty:ident { $($var:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($ty::$var => $name),+ }
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$var),)+
                    other => Err(Error::Parse(format!(
                        "unknown {} `{other}`", stringify!($ty).to_lowercase()
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(Task {
    Demand => "demand",
    DemandObs => "demand_obs",
    HighDim => "highdim",
    LinearGaussian => "linear_gaussian",
    Ope => "ope",
    AblationJoint => "ablation_joint",
});

named_enum!(Estimator {
    Dfiv => "dfiv",
    DfivObs => "dfiv_obs",
    Linear2sls => "linear_2sls",
    Sieve => "sieve",
    KivRff => "kiv_rff",
    Ridge => "ridge",
});

named_enum!(TuneMode {
    Off => "off",
    Once => "once",
    PerRepeat => "per_repeat",
});

impl Task {
    pub fn supports(self, est: Estimator) -> bool {
        use Estimator::*;
        match self {
            Task::Demand | Task::HighDim | Task::LinearGaussian => {
                matches!(est, Dfiv | Linear2sls | Sieve | KivRff | Ridge)
            }
            Task::DemandObs => matches!(est, DfivObs | Linear2sls | Sieve | KivRff),
            Task::Ope => matches!(est, Dfiv | Linear2sls),
            Task::AblationJoint => est == Dfiv,
        }
    }

    fn default_estimator(self) -> Estimator {
        match self {
            Task::DemandObs => Estimator::DfivObs,
            _ => Estimator::Dfiv,
        }
    }
}

/// Everything needed to run one experiment. Built from `key = value` pairs
/// on top of per-task defaults; see [`RunSpec::keys`] for the accepted keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub task: Task,
    pub estimator: Estimator,
    pub seed: u64,
    pub repeats: usize,
    /// Training samples (transitions for the policy-evaluation task).
    pub n: usize,
    /// Extra joint samples for held-out losses and tuning.
    pub n_holdout: usize,
    /// Confounding strengths; one result record per value.
    pub rho: Vec<f64>,
    pub treatment_dim: usize,
    pub embed_seed: u64,
    pub slope: f64,
    pub strength: f64,
    pub confounding: f64,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub action_noise: f64,
    pub reward_sd: f64,
    /// Hidden and output widths of the treatment network.
    pub psi_layers: Vec<usize>,
    pub psi_output: Activation,
    pub phi_layers: Vec<usize>,
    pub xi_layers: Vec<usize>,
    pub sieve_degree: u32,
    pub rff_count: usize,
    /// Fit on the standardized outcome and map predictions back.
    pub standardize_y: bool,
    pub tune: TuneMode,
    pub grid: Vec<f64>,
    pub dfiv: DfivConfig,
    pub run_to_convergence: bool,
    pub stage1_cap: usize,
    pub stage1_tol: f64,
    pub threads: usize,
    pub output: Option<PathBuf>,
}

impl RunSpec {
    /// Defaults for `task` before any keys are applied.
    pub fn defaults(task: Task) -> Self {
        let mut s = Self {
            task,
            estimator: task.default_estimator(),
            seed: 0,
            repeats: 1,
            n: 5000,
            n_holdout: 0,
            rho: vec![0.5],
            treatment_dim: 64,
            embed_seed: 1,
            slope: 2.0,
            strength: 1.0,
            confounding: 0.8,
            n_states: 10,
            n_actions: 3,
            gamma: 0.7,
            action_noise: 0.3,
            reward_sd: 0.1,
            psi_layers: vec![32, 16, 1],
            psi_output: Activation::Identity,
            phi_layers: vec![64, 32, 16],
            xi_layers: vec![64, 32, 16],
            sieve_degree: 3,
            rff_count: 100,
            standardize_y: true,
            tune: TuneMode::Off,
            grid: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            dfiv: DfivConfig {
                lambda1: 1e-3,
                lambda2: 1e-3,
                batch_m: Some(1000),
                batch_n: Some(1000),
                inner_stage1: 5,
                inner_stage2: 1,
                lr: 0.01,
                epochs: 200,
                ..DfivConfig::default()
            },
            run_to_convergence: false,
            stage1_cap: 50,
            stage1_tol: 1e-4,
            threads: 1,
            output: None,
        };
        match task {
            Task::Demand | Task::AblationJoint => {}
            Task::DemandObs => s.psi_layers = vec![16, 1],
            Task::HighDim => {
                s.psi_layers = vec![64, 32, 1];
                s.dfiv.lambda1 = 1.0;
                s.dfiv.lambda2 = 1.0;
                s.dfiv.lr = 3e-3;
                s.dfiv.epochs = 40;
            }
            Task::LinearGaussian => {
                s.n = 20_000;
                s.psi_layers = vec![16, 1];
                s.phi_layers = vec![16, 8];
                s.dfiv.epochs = 100;
            }
            Task::Ope => {
                s.n = 100_000;
                s.psi_layers = vec![32, 16];
                s.phi_layers = vec![32, 16];
                s.psi_output = Activation::Relu;
                s.dfiv.lambda1 = 1e-8;
                s.dfiv.lambda2 = 1e-8;
                s.dfiv.epochs = 100;
                s.standardize_y = false;
            }
        }
        s
    }

    /// Accepted keys, in the order [`RunSpec::to_pairs`] writes them.
    pub fn keys() -> &'static [&'static str] {
        &[
            "task",
            "estimator",
            "seed",
            "repeats",
            "n",
            "n_holdout",
            "rho",
            "treatment_dim",
            "embed_seed",
            "slope",
            "strength",
            "confounding",
            "n_states",
            "n_actions",
            "gamma",
            "action_noise",
            "reward_sd",
            "psi_layers",
            "psi_output",
            "phi_layers",
            "xi_layers",
            "sieve_degree",
            "rff_count",
            "standardize_y",
            "tune",
            "grid",
            "lambda1",
            "lambda2",
            "batch_m",
            "batch_n",
            "inner_stage1",
            "inner_stage2",
            "lr",
            "epochs",
            "early_stop",
            "stage1_grad",
            "track_oos",
            "run_to_convergence",
            "stage1_cap",
            "stage1_tol",
            "threads",
            "output",
        ]
    }

    /// Builds a spec from pairs applied in order (later pairs win). The
    /// `task` key picks the defaults and is required.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let task: Task = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "task")
            .ok_or_else(|| Error::Parse("spec has no `task` key".into()))?
            .1
            .parse()?;
        let mut spec = Self::defaults(task);
        for (k, v) in pairs {
            spec.set(k, v)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Parses a spec file body, then applies `overrides`.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        pairs.extend_from_slice(overrides);
        Self::from_pairs(&pairs)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "task" => self.task = v.parse()?,
            "estimator" => self.estimator = v.parse()?,
            "seed" => self.seed = num(key, v)?,
            "repeats" => self.repeats = num(key, v)?,
            "n" => self.n = num(key, v)?,
            "n_holdout" => self.n_holdout = num(key, v)?,
            "rho" => self.rho = list(key, v)?,
            "treatment_dim" => self.treatment_dim = num(key, v)?,
            "embed_seed" => self.embed_seed = num(key, v)?,
            "slope" => self.slope = num(key, v)?,
            "strength" => self.strength = num(key, v)?,
            "confounding" => self.confounding = num(key, v)?,
            "n_states" => self.n_states = num(key, v)?,
            "n_actions" => self.n_actions = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "action_noise" => self.action_noise = num(key, v)?,
            "reward_sd" => self.reward_sd = num(key, v)?,
            "psi_layers" => self.psi_layers = list(key, v)?,
            "psi_output" => self.psi_output = Activation::parse(v)?,
            "phi_layers" => self.phi_layers = list(key, v)?,
            "xi_layers" => self.xi_layers = list(key, v)?,
            "sieve_degree" => self.sieve_degree = num(key, v)?,
            "rff_count" => self.rff_count = num(key, v)?,
            "standardize_y" => self.standardize_y = num(key, v)?,
            "tune" => self.tune = v.parse()?,
            "grid" => self.grid = list(key, v)?,
            "lambda1" => self.dfiv.lambda1 = num(key, v)?,
            "lambda2" => self.dfiv.lambda2 = num(key, v)?,
            "batch_m" => self.dfiv.batch_m = opt(key, v)?,
            "batch_n" => self.dfiv.batch_n = opt(key, v)?,
            "inner_stage1" => self.dfiv.inner_stage1 = num(key, v)?,
            "inner_stage2" => self.dfiv.inner_stage2 = num(key, v)?,
            "lr" => self.dfiv.lr = num(key, v)?,
            "epochs" => self.dfiv.epochs = num(key, v)?,
            "early_stop" => self.dfiv.early_stop = opt(key, v)?,
            "stage1_grad" => {
                self.dfiv.stage1_grad = match v {
                    "envelope" => Stage1GradMode::Envelope,
                    "full_solve" => Stage1GradMode::FullSolve,
                    other => return Err(Error::Parse(format!("unknown stage1_grad `{other}`"))),
                }
            }
            "track_oos" => self.dfiv.track_oos = num(key, v)?,
            "run_to_convergence" => self.run_to_convergence = num(key, v)?,
            "stage1_cap" => self.stage1_cap = num(key, v)?,
            "stage1_tol" => self.stage1_tol = num(key, v)?,
            "threads" => self.threads = num(key, v)?,
            "output" => self.output = (!v.is_empty()).then(|| PathBuf::from(v)),
            other => return Err(Error::Parse(format!("unknown spec key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !self.task.supports(self.estimator) {
            return bad(format!(
                "estimator {} does not apply to task {}",
                self.estimator, self.task
            ));
        }
        if self.repeats == 0 {
            return bad("repeats must be >= 1".into());
        }
        if self.threads == 0 {
            return bad("threads must be >= 1".into());
        }
        if self.rho.is_empty() || self.rho.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("rho values must lie in [0, 1]".into());
        }
        if self.tune != TuneMode::Off {
            if !matches!(self.estimator, Estimator::Dfiv | Estimator::DfivObs) {
                return bad("tuning applies to the dfiv estimators only".into());
            }
            if self.n_holdout == 0 {
                return bad("tuning needs n_holdout > 0".into());
            }
            if matches!(self.task, Task::Ope | Task::AblationJoint) {
                return bad(format!("tuning is not available for task {}", self.task));
            }
            crate::harness::TuneGrid::symmetric(self.grid.clone())?;
        }
        if self.psi_layers.is_empty() || self.phi_layers.is_empty() || self.xi_layers.is_empty() {
            return bad("network layer lists must be nonempty".into());
        }
        Ok(())
    }

    pub fn obs_config(&self) -> ObsConfig {
        ObsConfig {
            base: self.dfiv.clone(),
            run_to_convergence: self.run_to_convergence,
            stage1_cap: self.stage1_cap,
            stage1_tol: self.stage1_tol,
        }
    }

    /// Every key with its current value, in [`RunSpec::keys`] order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let d = &self.dfiv;
        let opt = |v: Option<usize>| v.map_or_else(|| "none".to_string(), |v| v.to_string());
        let vals: Vec<String> = vec![
            self.task.to_string(),
            self.estimator.to_string(),
            self.seed.to_string(),
            self.repeats.to_string(),
            self.n.to_string(),
            self.n_holdout.to_string(),
            join(&self.rho),
            self.treatment_dim.to_string(),
            self.embed_seed.to_string(),
            self.slope.to_string(),
            self.strength.to_string(),
            self.confounding.to_string(),
            self.n_states.to_string(),
            self.n_actions.to_string(),
            self.gamma.to_string(),
            self.action_noise.to_string(),
            self.reward_sd.to_string(),
            join(&self.psi_layers),
            self.psi_output.name().to_string(),
            join(&self.phi_layers),
            join(&self.xi_layers),
            self.sieve_degree.to_string(),
            self.rff_count.to_string(),
            self.standardize_y.to_string(),
            self.tune.to_string(),
            join(&self.grid),
            d.lambda1.to_string(),
            d.lambda2.to_string(),
            opt(d.batch_m),
            opt(d.batch_n),
            d.inner_stage1.to_string(),
            d.inner_stage2.to_string(),
            d.lr.to_string(),
            d.epochs.to_string(),
            opt(d.early_stop),
            match d.stage1_grad {
                Stage1GradMode::Envelope => "envelope",
                Stage1GradMode::FullSolve => "full_solve",
            }
            .to_string(),
            d.track_oos.to_string(),
            self.run_to_convergence.to_string(),
            self.stage1_cap.to_string(),
            self.stage1_tol.to_string(),
            self.threads.to_string(),
            self.output
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        ];
        Self::keys()
            .iter()
            .map(|k| k.to_string())
            .zip(vals)
            .collect()
    }

    /// The run spec as file text; parsing it back gives the same run spec.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Config echo for result files. Leaves out `output` and `threads`,
    /// which do not affect results.
    pub fn echo(&self) -> BTreeMap<String, String> {
        self.to_pairs()
            .into_iter()
            .filter(|(k, _)| k != "output" && k != "threads")
            .collect()
    }
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Parse(format!("bad value `{v}` for `{key}`")))
}

fn opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| num(key, s.trim()))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(s: &[(&str, &str)]) -> Vec<(String, String)> {
        s.iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    #[test]
    fn parses_file_with_overrides() {
        let text =
            "# demand sweep\ntask = demand\nrho = 0.1, 0.5,0.9\nepochs = 10\n\nlr = 0.5 # fast\n";
        let spec = RunSpec::parse(text, &pairs(&[("epochs", "3")])).unwrap();
        assert_eq!(spec.task, Task::Demand);
        assert_eq!(spec.rho, vec![0.1, 0.5, 0.9]);
        assert_eq!(spec.dfiv.epochs, 3);
        assert_eq!(spec.dfiv.lr, 0.5);
    }

    #[test]
    fn text_roundtrip() {
        let mut spec = RunSpec::defaults(Task::HighDim);
        spec.dfiv.early_stop = Some(4);
        spec.output = Some(PathBuf::from("out/x.json"));
        let back = RunSpec::parse(&spec.to_text(), &[]).unwrap();
        assert_eq!(back, spec);
        assert_eq!(spec.to_pairs().len(), RunSpec::keys().len());
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(RunSpec::parse("rho = 0.5", &[]).is_err());
        assert!(RunSpec::parse("task = demand\nbogus = 1", &[]).is_err());
        assert!(RunSpec::parse("task = demand\nestimator = dfiv_obs", &[]).is_err());
        assert!(RunSpec::parse("task = ope\nestimator = sieve", &[]).is_err());
        assert!(RunSpec::parse("task = demand\nrepeats = 0", &[]).is_err());
        assert!(RunSpec::parse("task = demand\nepochs = many", &[]).is_err());
        assert!(RunSpec::parse("task = demand\ntune = once", &[]).is_err());
        assert!(RunSpec::parse("task = demand\ntune = once\nn_holdout = 100", &[]).is_ok());
        assert!(RunSpec::parse("task demand", &[]).is_err());
    }

    #[test]
    fn echo_skips_run_plumbing() {
        let spec = RunSpec::parse("task = ope\nthreads = 4\noutput = a.json", &[]).unwrap();
        let echo = spec.echo();
        assert!(!echo.contains_key("threads") && !echo.contains_key("output"));
        assert_eq!(echo["task"], "ope");
    }
}

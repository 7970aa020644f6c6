//! Result records and their JSON files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::{write_atomic, AblationCurves, TuneOutcome};
use crate::iv::IterationLog;

/// Outcome of one seeded repeat. `metric` is `None` when the repeat failed,
/// with the reason in `error`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub seed: u64,
    pub metric: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Secondary numbers, such as the Bellman error or the comparison
    /// run of an ablation.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub extra: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub log: Vec<IterationLog>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub joint: Option<AblationCurves>,
}

impl RepeatResult {
    pub fn failed(seed: u64, lambda1: f64, lambda2: f64, error: String) -> Self {
        Self {
            seed,
            metric: None,
            error: Some(error),
            lambda1,
            lambda2,
            extra: BTreeMap::new(),
            log: Vec::new(),
            joint: None,
        }
    }
}

/// All repeats of one configuration (one sweep value).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub task: String,
    pub estimator: String,
    /// `test_mse` for structural-function tasks, `value_error` for policy
    /// evaluation.
    pub metric_name: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rho: Option<f64>,
    pub seeds: Vec<u64>,
    pub repeats: Vec<RepeatResult>,
    pub mean: Option<f64>,
    pub std_error: Option<f64>,
    pub median: Option<f64>,
    pub failures: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tuning: Option<TuneOutcome>,
    pub config: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

impl RunResult {
    /// Metrics of the successful repeats, in seed order.
    pub fn values(&self) -> Vec<f64> {
        self.repeats.iter().filter_map(|r| r.metric).collect()
    }

    /// Fills `mean`, `std_error`, `median` and `failures` from the repeats.
    pub fn summarize(&mut self) {
        let v = self.values();
        self.failures = self.repeats.len() - v.len();
        let (mean, se, median) = summary(&v);
        self.mean = mean;
        self.std_error = se;
        self.median = median;
    }

    pub fn all_failed(&self) -> bool {
        self.repeats.iter().all(|r| r.metric.is_none())
    }
}

/// Mean, standard error of the mean (0 for a single value) and median.
pub fn summary(v: &[f64]) -> (Option<f64>, Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None, None);
    }
    let k = v.len() as f64;
    let mean = v.iter().sum::<f64>() / k;
    let se = if v.len() < 2 {
        0.0
    } else {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
    };
    (Some(mean), Some(se), Some(median(v)))
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

/// One JSON document per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    /// Worker threads used for repeats. Does not affect the numbers.
    pub threads: usize,
    pub records: Vec<RunResult>,
}

impl RunOutput {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The same output with wall times zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.records.iter_mut().for_each(|r| r.wall_time_s = 0.0);
        out
    }
}

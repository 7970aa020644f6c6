//! Offline transition datasets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::harness::write_atomic;
use crate::linalg::{Mat, RngStream};
use crate::ope::mdp::{MdpSpec, Policy};

const TRANSITION_STREAM: u64 = 0x7472_616e;

/// Transitions `(s, a, r, s')`. `a` is the action the behavior policy
/// chose; with action noise the executed action may differ.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    pub n_states: usize,
    pub n_actions: usize,
    pub s: Vec<usize>,
    pub a: Vec<usize>,
    pub r: Vec<f64>,
    pub s_next: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    s: usize,
    a: usize,
    r: f64,
    s_next: usize,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.s.len();
        if self.a.len() != n || self.r.len() != n || self.s_next.len() != n {
            return Err(dim_err(
                "transition columns",
                n,
                self.a.len().min(self.r.len()).min(self.s_next.len()),
            ));
        }
        let ns = self.n_states;
        if self.s.iter().chain(&self.s_next).any(|&s| s >= ns)
            || self.a.iter().any(|&a| a >= self.n_actions)
        {
            return Err(Error::InvalidArgument(
                "transition index out of range".into(),
            ));
        }
        if self.r.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("transition rewards"));
        }
        Ok(())
    }

    /// Visit counts per `(s, a)`, indexed `s * n_actions + a`.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_states * self.n_actions];
        for (&s, &a) in self.s.iter().zip(&self.a) {
            c[s * self.n_actions + a] += 1;
        }
        c
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            n_states: self.n_states,
            n_actions: self.n_actions,
            s: idx.iter().map(|&i| self.s[i]).collect(),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            r: idx.iter().map(|&i| self.r[i]).collect(),
            s_next: idx.iter().map(|&i| self.s_next[i]).collect(),
        }
    }

    /// Even-indexed rows and odd-indexed rows.
    pub fn split_parity(&self) -> (Self, Self) {
        let even: Vec<usize> = (0..self.len()).step_by(2).collect();
        let odd: Vec<usize> = (1..self.len()).step_by(2).collect();
        (self.select(&even), self.select(&odd))
    }

    /// One-hot rows over the joint `(s, a)` index.
    pub fn sa_one_hot(&self) -> Mat {
        one_hot(&self.s, &self.a, self.n_states, self.n_actions)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for i in 0..self.len() {
            w.serialize(Row {
                s: self.s[i],
                a: self.a[i],
                r: self.r[i],
                s_next: self.s_next[i],
            })?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        write_atomic(path, &bytes)
    }

    pub fn read_csv(path: &Path, n_states: usize, n_actions: usize) -> Result<Self> {
        let mut data = Self {
            n_states,
            n_actions,
            s: Vec::new(),
            a: Vec::new(),
            r: Vec::new(),
            s_next: Vec::new(),
        };
        for row in csv::Reader::from_path(path)?.deserialize() {
            let row: Row = row?;
            data.s.push(row.s);
            data.a.push(row.a);
            data.r.push(row.r);
            data.s_next.push(row.s_next);
        }
        data.validate()?;
        Ok(data)
    }
}

/// One-hot rows for the pairs `(states[i], actions[i])`.
pub fn one_hot(states: &[usize], actions: &[usize], n_states: usize, n_actions: usize) -> Mat {
    let mut m = Mat::zeros(states.len(), n_states * n_actions);
    for (i, (&s, &a)) in states.iter().zip(actions).enumerate() {
        m[(i, s * n_actions + a)] = 1.0;
    }
    m
}

/// Draws `n` i.i.d. transitions: `s ~ μ`, `a ~ π_b(·|s)`, then one
/// environment step (with the MDP's action noise).
pub fn generate_transitions(
    mdp: &MdpSpec,
    behavior: &Policy,
    n: usize,
    seed: u64,
    state_dist: &[f64],
) -> Result<TransitionDataset> {
    mdp.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "need at least one transition".into(),
        ));
    }
    if state_dist.len() != mdp.n_states || behavior.probs.shape() != (mdp.n_states, mdp.n_actions) {
        return Err(dim_err(
            "transition sampler shapes",
            mdp.n_states,
            state_dist.len(),
        ));
    }
    let mut rng = RngStream::new(seed, TRANSITION_STREAM);
    let mut data = TransitionDataset {
        n_states: mdp.n_states,
        n_actions: mdp.n_actions,
        s: Vec::with_capacity(n),
        a: Vec::with_capacity(n),
        r: Vec::with_capacity(n),
        s_next: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let s = rng.categorical(state_dist);
        let a = rng.categorical(behavior.row(s));
        let (_, s2, r) = mdp.step(s, a, &mut rng);
        data.s.push(s);
        data.a.push(a);
        data.r.push(r);
        data.s_next.push(s2);
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ope::mdp::random_mdp;

    #[test]
    fn frequencies_follow_state_and_behavior() {
        let mdp = random_mdp(3, 2, 0.5, 0.9, 1).unwrap();
        let beh = Policy::new(Mat::from_rows(&[[0.2, 0.8], [0.5, 0.5], [0.9, 0.1]])).unwrap();
        let mu = [0.5, 0.3, 0.2];
        let data = generate_transitions(&mdp, &beh, 100_000, 2, &mu).unwrap();
        for (k, c) in data.counts().iter().enumerate() {
            let expect = mu[k / 2] * beh.prob(k / 2, k % 2);
            assert!((*c as f64 / 1e5 - expect).abs() <= 0.02);
        }
    }

    #[test]
    fn noiseless_rewards_are_exact_means() {
        let mdp = random_mdp(4, 3, 0.0, 0.9, 3).unwrap();
        let data =
            generate_transitions(&mdp, &Policy::uniform(4, 3), 500, 4, &mdp.initial).unwrap();
        for i in 0..data.len() {
            assert_eq!(
                data.r[i],
                mdp.rewards[mdp.idx(data.s[i], data.a[i], data.s_next[i])]
            );
        }
    }

    #[test]
    fn deterministic_per_seed_and_csv_roundtrip() {
        let mdp = random_mdp(4, 2, 0.3, 0.9, 5).unwrap();
        let pi = Policy::uniform(4, 2);
        let a = generate_transitions(&mdp, &pi, 200, 6, &mdp.initial).unwrap();
        assert_eq!(
            a,
            generate_transitions(&mdp, &pi, 200, 6, &mdp.initial).unwrap()
        );
        assert_ne!(
            a,
            generate_transitions(&mdp, &pi, 200, 7, &mdp.initial).unwrap()
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        a.write_csv(&path).unwrap();
        assert_eq!(TransitionDataset::read_csv(&path, 4, 2).unwrap(), a);
        assert!(
            TransitionDataset::read_csv(&path, 3, 2).is_err()
                || a.s.iter().chain(&a.s_next).all(|&s| s < 3)
        );
    }

    #[test]
    fn parity_split_and_one_hot() {
        let mdp = random_mdp(2, 2, 0.0, 0.5, 8).unwrap();
        let data = generate_transitions(&mdp, &Policy::uniform(2, 2), 5, 9, &mdp.initial).unwrap();
        let (even, odd) = data.split_parity();
        assert_eq!((even.len(), odd.len()), (3, 2));
        assert_eq!(odd.s[1], data.s[3]);
        let oh = data.sa_one_hot();
        for i in 0..5 {
            assert_eq!(oh.row(i).iter().sum::<f64>(), 1.0);
            assert_eq!(oh[(i, data.s[i] * 2 + data.a[i])], 1.0);
        }
    }
}

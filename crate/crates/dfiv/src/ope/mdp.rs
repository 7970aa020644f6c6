//! Finite MDPs with exact policy evaluation.
//!
//! With action noise `p`, the environment replaces the chosen action by a
//! uniformly random one with probability `p`. Everything here is stated in
//! terms of the chosen (recorded) action, so the noise is folded into
//! effective transition and reward models.

use std::fmt::Write as _;

use crate::error::{dim_err, Error, Result};
use crate::linalg::{lu_solve, Mat, RngStream};
use crate::textio::Tokens;

const MDP_STREAM: u64 = 0x6d64_7073;
const POLICY_STREAM: u64 = 0x706f_6c69;

#[derive(Debug, Clone, PartialEq)]
pub struct MdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    /// `P[s][a][s']`, flattened row-major.
    pub transitions: Vec<f64>,
    /// Mean rewards `r̄[s][a][s']`, same layout as `transitions`.
    pub rewards: Vec<f64>,
    pub reward_sd: f64,
    pub initial: Vec<f64>,
    pub gamma: f64,
    pub action_noise: f64,
}

/// Action probabilities `π[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub probs: Mat,
}

const SUM_TOL: f64 = 1e-12;

impl Policy {
    pub fn new(probs: Mat) -> Result<Self> {
        for s in 0..probs.rows() {
            let row = probs.row(s);
            if row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "policy row {s} is not a distribution"
                )));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: Mat::filled(n_states, n_actions, 1.0 / n_actions as f64),
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        Self {
            probs: Mat::from_fn(actions.len(), n_actions, |s, a| {
                f64::from(u8::from(actions[s] == a))
            }),
        }
    }

    /// Rows drawn as normalized uniforms.
    pub fn random(n_states: usize, n_actions: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, POLICY_STREAM);
        let mut probs = Mat::from_fn(n_states, n_actions, |_, _| rng.uniform() + 1e-3);
        for s in 0..n_states {
            let total: f64 = probs.row(s).iter().sum();
            probs.row_mut(s).iter_mut().for_each(|p| *p /= total);
        }
        Self { probs }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        self.probs.row(s)
    }
}

fn normalized(values: Vec<f64>) -> Vec<f64> {
    let total: f64 = values.iter().sum();
    values.into_iter().map(|v| v / total).collect()
}

impl MdpSpec {
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(Error::InvalidArgument(
                "need at least one state and action".into(),
            ));
        }
        if self.transitions.len() != ns * na * ns || self.rewards.len() != ns * na * ns {
            return Err(dim_err(
                "MdpSpec tables",
                ns * na * ns,
                self.transitions.len(),
            ));
        }
        if self.initial.len() != ns {
            return Err(dim_err(
                "MdpSpec initial distribution",
                ns,
                self.initial.len(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) && self.gamma != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "discount must lie in [0, 1), got {}",
                self.gamma
            )));
        }
        if !(0.0..=0.5).contains(&self.action_noise) {
            return Err(Error::InvalidArgument(
                "action noise must lie in [0, 0.5]".into(),
            ));
        }
        if !(self.reward_sd >= 0.0) || self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidArgument(
                "rewards must be finite with sd >= 0".into(),
            ));
        }
        for s in 0..ns {
            for a in 0..na {
                let row = self.next_row(s, a);
                if row.iter().any(|&p| p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > SUM_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "P[{s}][{a}] is not a distribution"
                    )));
                }
            }
        }
        if (self.initial.iter().sum::<f64>() - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidArgument(
                "initial distribution does not sum to 1".into(),
            ));
        }
        Ok(())
    }

    pub fn sa_count(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub(crate) fn idx(&self, s: usize, a: usize, s2: usize) -> usize {
        (s * self.n_actions + a) * self.n_states + s2
    }

    /// `P(·|s, a)` for the executed action.
    pub fn next_row(&self, s: usize, a: usize) -> &[f64] {
        let start = self.idx(s, a, 0);
        &self.transitions[start..start + self.n_states]
    }

    /// Next-state distribution after choosing `a` in `s`, including action
    /// noise.
    pub fn effective_next(&self, s: usize, a: usize) -> Vec<f64> {
        let (p, na) = (self.action_noise, self.n_actions as f64);
        (0..self.n_states)
            .map(|s2| {
                let avg = (0..self.n_actions)
                    .map(|b| self.transitions[self.idx(s, b, s2)])
                    .sum::<f64>()
                    / na;
                (1.0 - p) * self.transitions[self.idx(s, a, s2)] + p * avg
            })
            .collect()
    }

    /// Expected immediate reward after choosing `a` in `s`.
    pub fn effective_reward(&self, s: usize, a: usize) -> f64 {
        let (p, na) = (self.action_noise, self.n_actions as f64);
        let exec = |b: usize| -> f64 {
            (0..self.n_states)
                .map(|s2| self.transitions[self.idx(s, b, s2)] * self.rewards[self.idx(s, b, s2)])
                .sum()
        };
        let avg = (0..self.n_actions).map(exec).sum::<f64>() / na;
        (1.0 - p) * exec(a) + p * avg
    }

    /// Samples `(executed action, next state, reward)` after choosing `a`.
    pub(crate) fn step(&self, s: usize, a: usize, rng: &mut RngStream) -> (usize, usize, f64) {
        let exec = if self.action_noise > 0.0 && rng.uniform() < self.action_noise {
            rng.below(self.n_actions)
        } else {
            a
        };
        let s2 = rng.categorical(self.next_row(s, exec));
        let r = self.rewards[self.idx(s, exec, s2)] + self.reward_sd * rng.gaussian();
        (exec, s2, r)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("mdp 1\n");
        let _ = writeln!(out, "states {} actions {}", self.n_states, self.n_actions);
        let _ = writeln!(out, "gamma {:e}", self.gamma);
        let _ = writeln!(out, "action_noise {:e}", self.action_noise);
        let _ = writeln!(out, "reward_sd {:e}", self.reward_sd);
        crate::textio::push_floats(&mut out, "initial", &self.initial);
        out.push_str("# s a next prob mean_reward\n");
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                for s2 in 0..self.n_states {
                    let i = self.idx(s, a, s2);
                    let _ = writeln!(
                        out,
                        "{s} {a} {s2} {:e} {:e}",
                        self.transitions[i], self.rewards[i]
                    );
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let body: String = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .collect::<Vec<_>>()
            .join("\n");
        let mut tok = Tokens::new(&body);
        tok.expect("mdp")?;
        tok.expect("1")?;
        tok.expect("states")?;
        let ns: usize = tok.parse()?;
        tok.expect("actions")?;
        let na: usize = tok.parse()?;
        tok.expect("gamma")?;
        let gamma = tok.parse()?;
        tok.expect("action_noise")?;
        let action_noise = tok.parse()?;
        tok.expect("reward_sd")?;
        let reward_sd = tok.parse()?;
        tok.expect("initial")?;
        let initial = tok.floats(ns)?;
        let mut mdp = Self {
            n_states: ns,
            n_actions: na,
            transitions: vec![0.0; ns * na * ns],
            rewards: vec![0.0; ns * na * ns],
            reward_sd,
            initial,
            gamma,
            action_noise,
        };
        for _ in 0..ns * na * ns {
            let (s, a, s2): (usize, usize, usize) = (tok.parse()?, tok.parse()?, tok.parse()?);
            if s >= ns || a >= na || s2 >= ns {
                return Err(Error::Parse(format!("row ({s}, {a}, {s2}) out of range")));
            }
            let i = mdp.idx(s, a, s2);
            mdp.transitions[i] = tok.parse()?;
            mdp.rewards[i] = tok.parse()?;
        }
        tok.finish()?;
        mdp.validate()?;
        Ok(mdp)
    }
}

/// Random MDP: transition rows are normalized uniform draws, mean rewards
/// uniform on `[0, 1)`, uniform initial distribution, no action noise.
pub fn random_mdp(
    n_states: usize,
    n_actions: usize,
    reward_sd: f64,
    gamma: f64,
    seed: u64,
) -> Result<MdpSpec> {
    let mut rng = RngStream::new(seed, MDP_STREAM);
    let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        transitions.extend(normalized(
            (0..n_states).map(|_| rng.uniform() + 1e-6).collect(),
        ));
    }
    let rewards = (0..n_states * n_actions * n_states)
        .map(|_| rng.uniform())
        .collect();
    let mdp = MdpSpec {
        n_states,
        n_actions,
        transitions,
        rewards,
        reward_sd,
        initial: vec![1.0 / n_states as f64; n_states],
        gamma,
        action_noise: 0.0,
    };
    mdp.validate()?;
    Ok(mdp)
}

/// Effective one-step model over `(s, a)` pairs: expected rewards and
/// `T[(s,a), (s',a')] = P_eff(s'|s,a) π(a'|s')`.
fn bellman_operator(mdp: &MdpSpec, pi: &Policy) -> (Vec<f64>, Mat) {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let k = ns * na;
    let mut reward = vec![0.0; k];
    let mut t = Mat::zeros(k, k);
    for s in 0..ns {
        for a in 0..na {
            let i = s * na + a;
            reward[i] = mdp.effective_reward(s, a);
            let next = mdp.effective_next(s, a);
            for (s2, p) in next.iter().enumerate() {
                for a2 in 0..na {
                    t[(i, s2 * na + a2)] = p * pi.prob(s2, a2);
                }
            }
        }
    }
    (reward, t)
}

fn check_policy(mdp: &MdpSpec, pi: &Policy) -> Result<()> {
    if pi.probs.shape() != (mdp.n_states, mdp.n_actions) {
        return Err(dim_err(
            "policy shape",
            format!("{}x{}", mdp.n_states, mdp.n_actions),
            format!("{:?}", pi.probs.shape()),
        ));
    }
    Ok(())
}

/// `Q^π` from the linear system `(I − γ T) q = r̄`.
pub fn exact_q(mdp: &MdpSpec, pi: &Policy) -> Result<Mat> {
    mdp.validate()?;
    check_policy(mdp, pi)?;
    let (reward, t) = bellman_operator(mdp, pi);
    let k = reward.len();
    let mut a = t.scale(-mdp.gamma);
    a.add_diagonal(1.0);
    let q = lu_solve(&a, &Mat::column(&reward))?;
    Mat::from_vec(mdp.n_states, mdp.n_actions, q.into_vec()).inspect(|m| {
        debug_assert_eq!(m.rows() * m.cols(), k);
    })
}

/// `max |(I − γT) q − r̄|` for a state-action value table.
pub fn bellman_residual_max(mdp: &MdpSpec, pi: &Policy, q: &Mat) -> Result<f64> {
    Ok(bellman_residuals(mdp, pi, q)?
        .iter()
        .fold(0.0f64, |m, r| m.max(r.abs())))
}

fn bellman_residuals(mdp: &MdpSpec, pi: &Policy, q: &Mat) -> Result<Vec<f64>> {
    check_policy(mdp, pi)?;
    if q.shape() != (mdp.n_states, mdp.n_actions) {
        return Err(dim_err("Q shape", mdp.sa_count(), q.rows() * q.cols()));
    }
    let (reward, t) = bellman_operator(mdp, pi);
    let qv = q.as_slice();
    let tq = t.mul_vec(qv)?;
    Ok((0..reward.len())
        .map(|i| reward[i] + mdp.gamma * tq[i] - qv[i])
        .collect())
}

/// `Σ_s ρ0(s) Σ_a π(a|s) Q(s, a)`.
pub fn policy_value(q: &Mat, initial: &[f64], pi: &Policy) -> Result<f64> {
    if q.shape() != pi.probs.shape() || initial.len() != q.rows() {
        return Err(dim_err(
            "policy_value shapes",
            format!("{:?}", q.shape()),
            format!("{:?}", pi.probs.shape()),
        ));
    }
    Ok((0..q.rows())
        .map(|s| {
            initial[s]
                * (0..q.cols())
                    .map(|a| pi.prob(s, a) * q[(s, a)])
                    .sum::<f64>()
        })
        .sum())
}

/// Mean squared Bellman error of `q` under the data distribution
/// `μ(s) π_b(a|s)`, computed from the known model.
pub fn msbe(
    q: &Mat,
    mdp: &MdpSpec,
    pi: &Policy,
    state_dist: &[f64],
    behavior: &Policy,
) -> Result<f64> {
    check_policy(mdp, behavior)?;
    if state_dist.len() != mdp.n_states {
        return Err(dim_err(
            "msbe state distribution",
            mdp.n_states,
            state_dist.len(),
        ));
    }
    let res = bellman_residuals(mdp, pi, q)?;
    let na = mdp.n_actions;
    Ok((0..res.len())
        .map(|i| state_dist[i / na] * behavior.prob(i / na, i % na) * res[i] * res[i])
        .sum())
}

/// Monte-Carlo estimate of the policy value: mean and standard error of
/// discounted returns, each episode run until `γᵗ < 1e-6`.
pub fn mc_policy_value(
    mdp: &MdpSpec,
    pi: &Policy,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    mdp.validate()?;
    check_policy(mdp, pi)?;
    if episodes < 2 {
        return Err(Error::InvalidArgument("need at least two episodes".into()));
    }
    let root = RngStream::new(seed, 0);
    let returns: Vec<f64> = (0..episodes)
        .map(|e| {
            let mut rng = root.split(e as u64);
            let mut s = rng.categorical(&mdp.initial);
            let (mut total, mut disc) = (0.0, 1.0);
            while disc >= 1e-6 {
                let a = rng.categorical(pi.row(s));
                let (_, s2, r) = mdp.step(s, a, &mut rng);
                total += disc * r;
                disc *= mdp.gamma;
                s = s2;
            }
            total
        })
        .collect();
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_state(reward: f64, gamma: f64) -> MdpSpec {
        MdpSpec {
            n_states: 1,
            n_actions: 1,
            transitions: vec![1.0],
            rewards: vec![reward],
            reward_sd: 0.0,
            initial: vec![1.0],
            gamma,
            action_noise: 0.0,
        }
    }

    fn chain() -> MdpSpec {
        // state 0 -> state 1 with reward 1; state 1 absorbing with reward 0
        MdpSpec {
            n_states: 2,
            n_actions: 1,
            transitions: vec![0.0, 1.0, 0.0, 1.0],
            rewards: vec![0.0, 1.0, 0.0, 0.0],
            reward_sd: 0.0,
            initial: vec![1.0, 0.0],
            gamma: 0.9,
            action_noise: 0.0,
        }
    }

    #[test]
    fn exact_q_hand_cases() {
        let pi = Policy::uniform(1, 1);
        let q = exact_q(&single_state(1.0, 0.5), &pi).unwrap();
        assert!((q[(0, 0)] - 2.0).abs() < 1e-12);

        let q = exact_q(&chain(), &Policy::uniform(2, 1)).unwrap();
        assert!((q[(0, 0)] - 1.0).abs() < 1e-12 && q[(1, 0)].abs() < 1e-12);

        let mut mdp = random_mdp(4, 2, 0.0, 0.5, 1).unwrap();
        mdp.gamma = 0.0;
        let q = exact_q(&mdp, &Policy::random(4, 2, 2)).unwrap();
        for s in 0..4 {
            for a in 0..2 {
                assert!((q[(s, a)] - mdp.effective_reward(s, a)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn exact_q_residual_is_tiny() {
        let mut mdp = random_mdp(10, 3, 0.1, 0.95, 3).unwrap();
        mdp.action_noise = 0.3;
        let pi = Policy::random(10, 3, 4);
        let q = exact_q(&mdp, &pi).unwrap();
        assert!(bellman_residual_max(&mdp, &pi, &q).unwrap() <= 1e-10);
    }

    #[test]
    fn random_mdp_rows_and_seeds() {
        let a = random_mdp(5, 3, 0.0, 0.9, 7).unwrap();
        for s in 0..5 {
            for act in 0..3 {
                assert!((a.next_row(s, act).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
        assert_eq!(a, random_mdp(5, 3, 0.0, 0.9, 7).unwrap());
        assert_ne!(
            a.transitions,
            random_mdp(5, 3, 0.0, 0.9, 8).unwrap().transitions
        );
    }

    #[test]
    fn policy_value_cases() {
        let pi = Policy::random(3, 2, 1);
        assert!(
            (policy_value(&Mat::filled(3, 2, 4.5), &[0.2, 0.3, 0.5], &pi).unwrap() - 4.5).abs()
                < 1e-12
        );
        let q = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let det = Policy::deterministic(&[0, 1, 0], 2);
        assert_eq!(policy_value(&q, &[0.0, 1.0, 0.0], &det).unwrap(), 4.0);
    }

    #[test]
    fn policy_value_matches_rollouts() {
        let mut mdp = random_mdp(4, 2, 0.2, 0.8, 11).unwrap();
        mdp.action_noise = 0.2;
        let pi = Policy::random(4, 2, 12);
        let v = policy_value(&exact_q(&mdp, &pi).unwrap(), &mdp.initial, &pi).unwrap();
        let (mean, se) = mc_policy_value(&mdp, &pi, 10_000, 13).unwrap();
        assert!((mean - v).abs() <= 3.0 * se, "{mean} vs {v} (se {se})");
    }

    #[test]
    fn msbe_cases() {
        let mdp = random_mdp(3, 2, 0.0, 0.7, 5).unwrap();
        let pi = Policy::random(3, 2, 6);
        let beh = Policy::uniform(3, 2);
        let mu = [0.5, 0.25, 0.25];
        let q = exact_q(&mdp, &pi).unwrap();
        assert!(msbe(&q, &mdp, &pi, &mu, &beh).unwrap() <= 1e-20);
        let c = 1.7;
        let shifted = q.map(|v| v + c);
        let expect = (1.0 - 0.7f64).powi(2) * c * c;
        assert!((msbe(&shifted, &mdp, &pi, &mu, &beh).unwrap() - expect).abs() < 1e-12);

        let one = single_state(1.0, 0.5);
        let pi1 = Policy::uniform(1, 1);
        assert!((msbe(&Mat::zeros(1, 1), &one, &pi1, &[1.0], &pi1).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn text_roundtrip_and_validation() {
        let mut mdp = random_mdp(3, 2, 0.1, 0.9, 9).unwrap();
        mdp.action_noise = 0.25;
        assert_eq!(MdpSpec::from_text(&mdp.to_text()).unwrap(), mdp);
        let mut bad = mdp.clone();
        bad.transitions[0] += 0.1;
        assert!(bad.validate().is_err());
        let mut bad = mdp;
        bad.gamma = 1.0;
        assert!(bad.validate().is_err());
    }
}

//! Policy evaluation as instrumental-variable regression.
//!
//! Stage 1 regresses next-pair features `ψ(s', a')`, `a' ~ π(·|s')`, on
//! current-pair features `φ(s, a)`. Stage 2 fits rewards on the design
//! `ψ(s, a) − γ V̂ φ(s, a)`, and `Q̂(s, a) = ûᵀψ(s, a)`.

use crate::error::{dim_err, Error, Result};
use crate::iv::train::{check_loss, draw_batch, entries, rows, BATCH_STREAM};
use crate::iv::{grad::stage2_eval, stages::ridge_vector_loss, stages::solve_vector};
use crate::iv::{
    grad_stage1_theta_z, stage1_loss, stage1_solve, DfivConfig, Features, IterationLog,
    Stage1Projection, Stage1Sol, StructuralModel,
};
use crate::linalg::{Mat, RngStream};
use crate::neural::{adam_step, AdamState, GradBuffer};
use crate::ope::data::{one_hot, TransitionDataset};
use crate::ope::mdp::Policy;

const NEXT_ACTION_STREAM: u64 = 0x6e78_7461;

#[derive(Debug, Clone)]
pub struct OpeFit {
    /// `Q̂` as an `n_states × n_actions` table.
    pub q: Mat,
    pub model: StructuralModel,
    pub phi: Features,
    pub stage1: Stage1Sol,
    pub log: Vec<IterationLog>,
}

/// Transitions for one stage, encoded as one-hot pair rows.
struct Encoded {
    current: Mat,
    reward: Vec<f64>,
    s_next: Vec<usize>,
}

impl Encoded {
    fn new(data: &TransitionDataset) -> Self {
        Self {
            current: data.sa_one_hot(),
            reward: data.r.clone(),
            s_next: data.s_next.clone(),
        }
    }
}

fn next_pairs(
    s_next: &[usize],
    pi: &Policy,
    n_actions: usize,
    n_states: usize,
    rng: &mut RngStream,
) -> Mat {
    let a: Vec<usize> = s_next.iter().map(|&s| rng.categorical(pi.row(s))).collect();
    one_hot(s_next, &a, n_states, n_actions)
}

/// Stage-2 design `ψ(x2) − γ Φ2 V̂ᵀ`.
fn stage2_design(psi2: &Mat, phi2: &Mat, stage1: &Stage1Sol, gamma: f64) -> Result<Mat> {
    let mut d = psi2.clone();
    d.add_assign_scaled(&stage1.predict(phi2)?, -gamma)?;
    Ok(d)
}

/// Stage-2 loss and its gradient in the treatment-network parameters. The
/// network enters twice: directly through `ψ(x2)` and through `V̂` via the
/// stage-1 targets `ψ(x_next)`.
pub(crate) fn grad_ope_stage2(
    psi: &Features,
    x_next: &Mat,
    proj: &Stage1Projection,
    x2: &Mat,
    phi2: &Mat,
    r: &[f64],
    gamma: f64,
    lambda2: f64,
) -> Result<(f64, GradBuffer)> {
    let mut grads = psi
        .grad_buffer()
        .ok_or_else(|| Error::InvalidArgument("treatment features are not trainable".into()))?;
    let stage1 = proj.stage1(&psi.eval(x_next)?)?;
    let design = stage2_design(&psi.eval(x2)?, phi2, &stage1, gamma)?;
    let ev = stage2_eval(&design, r, lambda2)?;
    psi.backward_into(x2, &ev.g_design, &mut grads)?;
    let g_v = ev.g_design.t_matmul(phi2)?.scale(-gamma);
    psi.backward_into(x_next, &proj.m.matmul_t(&g_v)?, &mut grads)?;
    Ok((ev.loss, grads))
}

/// Estimates `Q^π` from offline transitions. The two stages use the even
/// and odd rows of `data`. Feature maps take one-hot `(s, a)` rows of
/// width `n_states * n_actions`; `Features::identity` gives the tabular
/// estimator. Next actions are redrawn from `π` every outer iteration and
/// once more for the final solve.
pub fn ope_train(
    data: &TransitionDataset,
    target: &Policy,
    gamma: f64,
    psi: Features,
    phi: Features,
    cfg: &DfivConfig,
) -> Result<OpeFit> {
    data.validate()?;
    let (ns, na) = (data.n_states, data.n_actions);
    if target.probs.shape() != (ns, na) {
        return Err(dim_err(
            "target policy shape",
            format!("{ns}x{na}"),
            format!("{:?}", target.probs.shape()),
        ));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "discount must lie in [0, 1), got {gamma}"
        )));
    }
    for f in [&psi, &phi] {
        if f.input_dim() != ns * na {
            return Err(dim_err("OPE feature input", ns * na, f.input_dim()));
        }
    }
    if data.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two transitions".into(),
        ));
    }
    let (d1, d2) = data.split_parity();
    let (e1, e2) = (Encoded::new(&d1), Encoded::new(&d2));
    let (m, n) = (d1.len(), d2.len());
    cfg.validate(m, n)?;
    let (bm, bn) = cfg.batch_sizes(m, n);

    let (mut psi, mut phi) = (psi, phi);
    let mut adam_x = psi.as_mlp().map(AdamState::new);
    let mut adam_z = phi.as_mlp().map(AdamState::new);
    let mut rng = RngStream::new(cfg.seed, BATCH_STREAM);
    let mut next_rng = RngStream::new(cfg.seed, NEXT_ACTION_STREAM);
    let mut log = Vec::with_capacity(cfg.epochs);

    for it in 0..cfg.epochs {
        let x_next_all = next_pairs(&e1.s_next, target, na, ns, &mut next_rng);
        let b1 = draw_batch(&mut rng, m, bm);
        let b2 = draw_batch(&mut rng, n, bn);
        let (x1, x_next) = (rows(&e1.current, &b1), rows(&x_next_all, &b1));
        let (x2, r2) = (rows(&e2.current, &b2), entries(&e2.reward, &b2));

        if let Some(state) = adam_z.as_mut() {
            let targets = psi.eval(&x_next)?;
            for _ in 0..cfg.inner_stage1 {
                let (loss, g) =
                    grad_stage1_theta_z(&targets, &phi, &x1, cfg.lambda1, cfg.stage1_grad)?;
                check_loss(loss, it)?;
                adam_step(phi.as_mlp_mut().expect("trainable"), &g, state, cfg.lr)?;
            }
        }

        let proj = Stage1Projection::new(&phi.eval(&x1)?, cfg.lambda1)?;
        let phi2 = phi.eval(&x2)?;
        if let Some(state) = adam_x.as_mut() {
            for _ in 0..cfg.inner_stage2 {
                let (loss, g) =
                    grad_ope_stage2(&psi, &x_next, &proj, &x2, &phi2, &r2, gamma, cfg.lambda2)?;
                check_loss(loss, it)?;
                adam_step(psi.as_mlp_mut().expect("trainable"), &g, state, cfg.lr)?;
            }
        }

        let targets = psi.eval(&x_next)?;
        let phi1 = phi.eval(&x1)?;
        let s1 = stage1_solve(&targets, &phi1, cfg.lambda1)?;
        let stage1 = stage1_loss(&targets, &phi1, &s1, cfg.lambda1)?;
        let design = stage2_design(&psi.eval(&x2)?, &phi2, &proj.stage1(&targets)?, gamma)?;
        let u = solve_vector(&design, &r2, cfg.lambda2)?;
        let stage2 = ridge_vector_loss(&design, &r2, &u, cfg.lambda2)?;
        check_loss(stage1, it)?;
        check_loss(stage2, it)?;
        log.push(IterationLog {
            iteration: it,
            stage1_loss: stage1,
            stage2_loss: stage2,
            l1_oos: None,
            l2_oos: None,
            test_mse: None,
        });
    }

    let x_next = next_pairs(&e1.s_next, target, na, ns, &mut next_rng);
    let stage1 = stage1_solve(&psi.eval(&x_next)?, &phi.eval(&e1.current)?, cfg.lambda1)?;
    let design = stage2_design(
        &psi.eval(&e2.current)?,
        &phi.eval(&e2.current)?,
        &stage1,
        gamma,
    )?;
    let u = solve_vector(&design, &e2.reward, cfg.lambda2)?;
    let model = StructuralModel::new(u, psi)?;
    let all_pairs = Mat::identity(ns * na);
    let q = Mat::from_vec(ns, na, model.predict(&all_pairs, None)?)?;
    Ok(OpeFit {
        q,
        model,
        phi,
        stage1,
        log,
    })
}

/// Residuals `r − (Q̂(s, a) − γ Q̂(s', a'))` with `a' ~ π(·|s')`.
pub fn ope_residuals(
    data: &TransitionDataset,
    q: &Mat,
    target: &Policy,
    gamma: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    data.validate()?;
    if q.shape() != (data.n_states, data.n_actions) {
        return Err(dim_err(
            "Q shape",
            data.n_states * data.n_actions,
            q.rows() * q.cols(),
        ));
    }
    let mut rng = RngStream::new(seed, NEXT_ACTION_STREAM);
    Ok((0..data.len())
        .map(|i| {
            let a2 = rng.categorical(target.row(data.s_next[i]));
            data.r[i] - (q[(data.s[i], data.a[i])] - gamma * q[(data.s_next[i], a2)])
        })
        .collect())
}

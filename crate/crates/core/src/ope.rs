//! Fitted Q-Evaluation of fixed softmax policies on held-out trajectories,
//! and ranking of candidate policies by their initial-value score.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::{encode_input, AbstractTrajectory};
use crate::nn::{Adam, Mlp};
use crate::rl::{
    intern, transitions, QForm, QFormKind, QFunction, QPolicy, QTable, RlError, TrainConfig,
};
use crate::seed::{derive_seed, rng};

/// Stop once the largest value change between iterations drops below this.
pub const FQE_TOL: f64 = 1e-5;
pub const FQE_MAX_ITER: usize = 500;

#[derive(Debug, Error)]
pub enum OpeError {
    #[error("no evaluation data")]
    EmptyData,
    #[error("no candidate policies")]
    NoCandidates,
    #[error("k must be at least 1")]
    InvalidK,
    #[error(transparent)]
    Rl(#[from] RlError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FqeEstimate {
    pub qhat: QFunction,
    pub target_policy_id: String,
    pub initial_value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Expected-next-value data: for each transition, the target policy's
/// probabilities over the next step's candidates.
struct Bootstrap {
    probs: Vec<Option<Vec<f64>>>,
    init_probs: Vec<Vec<f64>>,
}

/// Estimates `Q^pi` for the softmax policy `policy` from `eval_trajs`.
///
/// Only `gamma`, `form` and (for networks) the optimizer fields of `cfg` are
/// used. A tabular estimate keeps one row per visited state; actions never
/// logged in a state keep value 0.
pub fn fqe(
    policy: &QPolicy,
    id: &str,
    eval_trajs: &[AbstractTrajectory],
    cfg: &TrainConfig,
) -> Result<FqeEstimate, OpeError> {
    cfg.validate()?;
    let space = policy.q.action_space;
    let (trans, state_dim, action_dim) = match transitions(eval_trajs, space) {
        Err(RlError::EmptyData) => return Err(OpeError::EmptyData),
        r => r?,
    };
    if trans.is_empty() {
        return Err(OpeError::EmptyData);
    }
    let mut boot = Bootstrap {
        probs: Vec::with_capacity(trans.len()),
        init_probs: Vec::new(),
    };
    for t in &trans {
        boot.probs.push(match &t.next {
            Some((s, c)) => Some(policy.probs(s, c)?),
            None => None,
        });
    }
    let inits: Vec<usize> = first_steps(eval_trajs);
    for &i in &inits {
        boot.init_probs
            .push(policy.probs(&trans[i].state, &trans[i].candidates)?);
    }

    let (form, iterations, converged) = match cfg.form {
        QFormKind::Tabular => fqe_tabular(&trans, &boot, cfg.gamma, action_dim)?,
        QFormKind::Network => fqe_network(&trans, &boot, cfg, state_dim, action_dim),
    };
    let qhat = QFunction {
        form,
        gamma: cfg.gamma,
        action_space: space,
        state_dim,
        action_dim,
    };
    let mut total = 0.0;
    for (&i, p) in inits.iter().zip(&boot.init_probs) {
        let t = &trans[i];
        total += t
            .candidates
            .iter()
            .zip(p)
            .map(|(a, pa)| pa * qhat.value_unchecked(&t.state, a))
            .sum::<f64>();
    }
    Ok(FqeEstimate {
        qhat,
        target_policy_id: id.to_string(),
        initial_value: total / inits.len() as f64,
        iterations,
        converged,
    })
}

/// Transition indices of each non-empty trajectory's first step, matching
/// the flattening order of `transitions`.
fn first_steps(trajs: &[AbstractTrajectory]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut offset = 0;
    for t in trajs {
        if !t.is_empty() {
            out.push(offset);
        }
        offset += t.len();
    }
    out
}

fn fqe_tabular(
    trans: &[crate::rl::Transition],
    boot: &Bootstrap,
    gamma: f64,
    n_actions: usize,
) -> Result<(QForm, usize, bool), OpeError> {
    let d = intern(trans)?;
    // Per (state, action) cell: the transitions landing in it.
    let mut cells: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
    for t in 0..trans.len() {
        cells.entry((d.sid[t], d.action[t])).or_default().push(t);
    }
    let mut q = vec![vec![0.0; n_actions]; d.states.len()];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < FQE_MAX_ITER {
        let mut next = q.clone();
        let mut delta: f64 = 0.0;
        for (&(s, a), ts) in &cells {
            let mut sum = 0.0;
            for &t in ts {
                sum += trans[t].reward;
                if let (Some((s2, c2)), Some(p)) = (&d.next[t], &boot.probs[t]) {
                    sum += gamma * c2.iter().zip(p).map(|(&c, pc)| pc * q[*s2][c]).sum::<f64>();
                }
            }
            let v = sum / ts.len() as f64;
            delta = delta.max((v - q[s][a]).abs());
            next[s][a] = v;
        }
        q = next;
        iterations += 1;
        if delta < FQE_TOL {
            converged = true;
            break;
        }
    }
    let mut table = QTable::default();
    for (s, row) in d.states.iter().zip(q) {
        table.insert(s, row);
    }
    Ok((QForm::Tabular(table), iterations, converged))
}

fn fqe_network(
    trans: &[crate::rl::Transition],
    boot: &Bootstrap,
    cfg: &TrainConfig,
    state_dim: usize,
    action_dim: usize,
) -> (QForm, usize, bool) {
    let xs: Vec<Vec<f64>> = trans
        .iter()
        .map(|t| encode_input(&t.state, &t.action, action_dim))
        .collect();
    let next_xs: Vec<Option<Vec<Vec<f64>>>> = trans
        .iter()
        .map(|t| {
            t.next
                .as_ref()
                .map(|(s, cs)| cs.iter().map(|c| encode_input(s, c, action_dim)).collect())
        })
        .collect();
    let mut net = Mlp::three_layer(
        state_dim + action_dim,
        cfg.hidden_units,
        derive_seed(cfg.seed, "fqe-init"),
    );
    let mut opt = Adam::new(net.num_params(), cfg.step_size);
    let mut r = rng(derive_seed(cfg.seed, "fqe-batches"));
    let inner = cfg.target_update_interval;
    let outer = (cfg.iterations / inner).clamp(1, FQE_MAX_ITER);
    let mut prev: Vec<f64> = xs.iter().map(|x| net.forward(x)).collect();
    let mut grad = vec![0.0; net.num_params()];
    let scale = 1.0 / cfg.batch_size as f64;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..outer {
        let y: Vec<f64> = trans
            .iter()
            .enumerate()
            .map(|(t, tr)| {
                tr.reward
                    + match (&next_xs[t], &boot.probs[t]) {
                        (Some(nx), Some(p)) => {
                            cfg.gamma
                                * nx.iter()
                                    .zip(p)
                                    .map(|(x, pc)| pc * net.forward(x))
                                    .sum::<f64>()
                        }
                        _ => 0.0,
                    }
            })
            .collect();
        for _ in 0..inner {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for _ in 0..cfg.batch_size {
                let t = r.random_range(0..xs.len());
                let q = net.forward(&xs[t]);
                net.accumulate_grad(&xs[t], scale * 2.0 * (q - y[t]), &mut grad);
            }
            opt.step(net.params_mut(), &grad);
        }
        iterations += 1;
        let now: Vec<f64> = xs.iter().map(|x| net.forward(x)).collect();
        let delta = now
            .iter()
            .zip(&prev)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        prev = now;
        if delta < FQE_TOL {
            converged = true;
            break;
        }
    }
    (QForm::Network(net), iterations, converged)
}

pub fn initial_value_score(est: &FqeEstimate) -> f64 {
    est.initial_value
}

#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub id: &'a str,
    pub policy: &'a QPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPolicy {
    pub id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Orders scored candidates by score descending, ties by id.
pub fn rank_scores(
    mut scored: Vec<(String, f64)>,
    k: usize,
) -> Result<Vec<RankedPolicy>, OpeError> {
    if k == 0 {
        return Err(OpeError::InvalidK);
    }
    if scored.is_empty() {
        return Err(OpeError::NoCandidates);
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (id, score))| RankedPolicy {
            id,
            score,
            rank: i + 1,
        })
        .collect())
}

/// Runs FQE for every candidate and returns the top `k`.
pub fn rank_policies(
    candidates: &[Candidate<'_>],
    eval_trajs: &[AbstractTrajectory],
    cfg: &TrainConfig,
    k: usize,
) -> Result<Vec<RankedPolicy>, OpeError> {
    if k == 0 {
        return Err(OpeError::InvalidK);
    }
    if candidates.is_empty() {
        return Err(OpeError::NoCandidates);
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for c in candidates {
        let est = fqe(c.policy, c.id, eval_trajs, cfg)?;
        scored.push((c.id.to_string(), est.initial_value));
    }
    rank_scores(scored, k)
}

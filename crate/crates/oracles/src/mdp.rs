//! Small finite MDPs with exact solutions.

use dtmdp_core::abstraction::{AbstractStep, AbstractTrajectory, ActionRepr, SchemeKind};
use dtmdp_core::data::JudgeScores;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `p[s][a][s']`, the distribution of the next state if the episode
    /// continues.
    pub p: Vec<Vec<Vec<f64>>>,
    /// Probability that the episode ends after `(s, a)`.
    pub terminate: Vec<Vec<f64>>,
    pub reward: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
}

fn simplex(n: usize, r: &mut impl Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| r.random::<f64>() + 0.05).collect();
    let z: f64 = v.iter().sum();
    v.into_iter().map(|x| x / z).collect()
}

/// Deterministic transitions; each `(s, a)` either moves to one state or
/// ends the episode, and every state has at least one ending action.
pub fn random_deterministic_mdp(n_states: usize, n_actions: usize, r: &mut impl Rng) -> FiniteMdp {
    let mut p = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
    let mut terminate = vec![vec![0.0; n_actions]; n_states];
    for s in 0..n_states {
        let forced = r.random_range(0..n_actions);
        for a in 0..n_actions {
            if a == forced || r.random::<f64>() < 0.2 {
                terminate[s][a] = 1.0;
            } else {
                p[s][a][r.random_range(0..n_states)] = 1.0;
            }
        }
    }
    let reward = (0..n_states)
        .map(|_| (0..n_actions).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    FiniteMdp {
        n_states,
        n_actions,
        p,
        terminate,
        reward,
        initial: simplex(n_states, r),
    }
}

/// Stochastic transitions with ending probabilities in `[term_lo, term_hi]`
/// and rewards in `[0.5, 1.5]`.
pub fn random_mdp(
    n_states: usize,
    n_actions: usize,
    term_lo: f64,
    term_hi: f64,
    r: &mut impl Rng,
) -> FiniteMdp {
    let p = (0..n_states)
        .map(|_| (0..n_actions).map(|_| simplex(n_states, r)).collect())
        .collect();
    let terminate = (0..n_states)
        .map(|_| {
            (0..n_actions)
                .map(|_| r.random_range(term_lo..=term_hi))
                .collect()
        })
        .collect();
    let reward = (0..n_states)
        .map(|_| (0..n_actions).map(|_| r.random_range(0.5..1.5)).collect())
        .collect();
    FiniteMdp {
        n_states,
        n_actions,
        p,
        terminate,
        reward,
        initial: simplex(n_states, r),
    }
}

/// Optimal `Q*` by value iteration to `tol`.
pub fn value_iteration(m: &FiniteMdp, gamma: f64, tol: f64) -> Vec<Vec<f64>> {
    let mut q = vec![vec![0.0; m.n_actions]; m.n_states];
    loop {
        let v: Vec<f64> = q
            .iter()
            .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut delta: f64 = 0.0;
        for s in 0..m.n_states {
            for a in 0..m.n_actions {
                let cont: f64 = (0..m.n_states).map(|t| m.p[s][a][t] * v[t]).sum();
                let new = m.reward[s][a] + gamma * (1.0 - m.terminate[s][a]) * cont;
                delta = delta.max((new - q[s][a]).abs());
                q[s][a] = new;
            }
        }
        if delta < tol {
            return q;
        }
    }
}

/// Exact `V^pi` from `(I - gamma P_pi) v = r_pi`.
pub fn policy_value(m: &FiniteMdp, pi: &[Vec<f64>], gamma: f64) -> Vec<f64> {
    let n = m.n_states;
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for s in 0..n {
        for act in 0..m.n_actions {
            let w = pi[s][act];
            b[s] += w * m.reward[s][act];
            for t in 0..n {
                a[(s, t)] -= gamma * w * (1.0 - m.terminate[s][act]) * m.p[s][act][t];
            }
        }
    }
    let v = a
        .lu()
        .solve(&b)
        .expect("I - gamma P is invertible for gamma < 1");
    v.iter().copied().collect()
}

/// `Q^pi(s, a)` from `V^pi`.
pub fn policy_q(m: &FiniteMdp, v: &[f64], gamma: f64) -> Vec<Vec<f64>> {
    (0..m.n_states)
        .map(|s| {
            (0..m.n_actions)
                .map(|a| {
                    let cont: f64 = (0..m.n_states).map(|t| m.p[s][a][t] * v[t]).sum();
                    m.reward[s][a] + gamma * (1.0 - m.terminate[s][a]) * cont
                })
                .collect()
        })
        .collect()
}

fn draw(weights: &[f64], r: &mut impl Rng) -> usize {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// One episode of `(state, action, reward)` under `behavior`, optionally
/// forcing the start state and first action.
pub fn sample_episode(
    m: &FiniteMdp,
    behavior: &[Vec<f64>],
    start: Option<(usize, usize)>,
    max_len: usize,
    r: &mut impl Rng,
) -> Vec<(usize, usize, f64)> {
    let (mut s, mut forced) = match start {
        Some((s, a)) => (s, Some(a)),
        None => (draw(&m.initial, r), None),
    };
    let mut out = Vec::new();
    while out.len() < max_len {
        let a = forced.take().unwrap_or_else(|| draw(&behavior[s], r));
        out.push((s, a, m.reward[s][a]));
        if r.random::<f64>() < m.terminate[s][a] {
            break;
        }
        s = draw(&m.p[s][a], r);
    }
    out
}

pub fn uniform_policy(m: &FiniteMdp) -> Vec<Vec<f64>> {
    vec![vec![1.0 / m.n_actions as f64; m.n_actions]; m.n_states]
}

/// One-hot state vector.
pub fn state_vec(s: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[s] = 1.0;
    v
}

/// Episodes as abstract trajectories with one-hot states and index actions
/// over the full action set.
pub fn to_abstract(
    m: &FiniteMdp,
    episodes: &[Vec<(usize, usize, f64)>],
) -> Vec<AbstractTrajectory> {
    episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| AbstractTrajectory {
            trajectory_id: format!("ep{i}"),
            scenario_id: "mdp".into(),
            scheme: SchemeKind::Name,
            action_dim: m.n_actions,
            hmm_states: 0,
            scores: JudgeScores {
                fpc_accuracy: 0.0,
                rce_identification: 0.0,
            },
            steps: ep
                .iter()
                .map(|&(s, a, rew)| AbstractStep {
                    state: state_vec(s, m.n_states),
                    action: ActionRepr::Index(a),
                    reward: rew,
                    candidates: (0..m.n_actions).map(ActionRepr::Index).collect(),
                })
                .collect(),
        })
        .collect()
}

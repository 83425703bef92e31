//! Offline policy induction: discrete conservative Q-learning and behavior
//! cloning over abstract trajectories.
//!
//! The CQL objective per transition is
//! `(Q(s,a) - y)^2 + alpha * (logsumexp_c Q(s,c) - Q(s,a))` with
//! `y = r + gamma * max_c' Q_target(s',c')` (0 after the last step). The
//! candidate sets `c`, `c'` come from the action space: the whole
//! vocabulary, or the candidates recorded at each turn. `alpha = 0` is plain
//! (deep) Q-learning.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::{encode_input, AbstractStep, AbstractTrajectory, ActionRepr, SchemeKind};
use crate::nn::{softmax, Adam, Mlp};
use crate::seed::{derive_seed, rng};

pub const POLICY_FORMAT_VERSION: u32 = 1;
/// Logit given by tabular behavior cloning to actions never taken in a
/// visited state.
pub const UNSEEN_LOGIT: f64 = -50.0;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("no training data")]
    EmptyData,
    #[error("trajectory {0} lacks per-turn candidate sets")]
    MissingCandidateSets(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty candidate list")]
    EmptyCandidates,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported policy format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt policy file: {0}")]
    Corrupt(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ActionSpace {
    FullVocabulary { size: usize },
    CandidateSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QFormKind {
    Tabular,
    #[default]
    Network,
}

/// Tabular values keyed by the exact state vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QTable {
    rows: BTreeMap<Vec<u64>, Vec<f64>>,
}

pub(crate) fn state_key(state: &[f64]) -> Vec<u64> {
    // +0.0 and -0.0 share a key.
    state.iter().map(|x| (x + 0.0).to_bits()).collect()
}

#[derive(Serialize, Deserialize)]
struct QRow {
    state: Vec<f64>,
    values: Vec<f64>,
}

impl Serialize for QTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<QRow> = self
            .rows
            .iter()
            .map(|(k, v)| QRow {
                state: k.iter().map(|b| f64::from_bits(*b)).collect(),
                values: v.clone(),
            })
            .collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for QTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<QRow>::deserialize(d)?;
        Ok(QTable {
            rows: rows
                .into_iter()
                .map(|r| (state_key(&r.state), r.values))
                .collect(),
        })
    }
}

impl QTable {
    pub fn get(&self, state: &[f64]) -> Option<&Vec<f64>> {
        self.rows.get(&state_key(state))
    }

    pub fn insert(&mut self, state: &[f64], values: Vec<f64>) {
        self.rows.insert(state_key(state), values);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QForm {
    /// Unvisited states score 0 for every action.
    Tabular(QTable),
    Network(Mlp),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFunction {
    pub form: QForm,
    pub gamma: f64,
    pub action_space: ActionSpace,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl QFunction {
    pub fn tabular(table: QTable, gamma: f64, state_dim: usize, n_actions: usize) -> Self {
        Self {
            form: QForm::Tabular(table),
            gamma,
            action_space: ActionSpace::FullVocabulary { size: n_actions },
            state_dim,
            action_dim: n_actions,
        }
    }

    fn check(&self, state: &[f64], action: &ActionRepr) -> Result<(), RlError> {
        if state.len() != self.state_dim {
            return Err(RlError::DimensionMismatch {
                expected: self.state_dim,
                found: state.len(),
            });
        }
        match action {
            ActionRepr::Index(i) if *i >= self.action_dim => Err(RlError::DimensionMismatch {
                expected: self.action_dim,
                found: *i + 1,
            }),
            ActionRepr::Features(f) if f.len() != self.action_dim => {
                Err(RlError::DimensionMismatch {
                    expected: self.action_dim,
                    found: f.len(),
                })
            }
            ActionRepr::Features(_) if matches!(self.form, QForm::Tabular(_)) => Err(
                RlError::InvalidConfig("tabular Q needs index actions".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn value(&self, state: &[f64], action: &ActionRepr) -> Result<f64, RlError> {
        self.check(state, action)?;
        Ok(self.value_unchecked(state, action))
    }

    pub(crate) fn value_unchecked(&self, state: &[f64], action: &ActionRepr) -> f64 {
        match (&self.form, action) {
            (QForm::Tabular(t), ActionRepr::Index(i)) => t.get(state).map_or(0.0, |row| row[*i]),
            (QForm::Network(net), a) => net.forward(&encode_input(state, a, self.action_dim)),
            (QForm::Tabular(_), ActionRepr::Features(_)) => unreachable!("checked"),
        }
    }

    pub fn values(&self, state: &[f64], candidates: &[ActionRepr]) -> Result<Vec<f64>, RlError> {
        candidates.iter().map(|c| self.value(state, c)).collect()
    }

    /// Candidates to consider at a logged step under this action space.
    pub fn candidates_for(&self, step: &AbstractStep) -> Vec<ActionRepr> {
        candidates_for(self.action_space, step)
    }
}

pub(crate) fn candidates_for(space: ActionSpace, step: &AbstractStep) -> Vec<ActionRepr> {
    match space {
        ActionSpace::FullVocabulary { size } => (0..size).map(ActionRepr::Index).collect(),
        ActionSpace::CandidateSet => step.candidates.clone(),
    }
}

/// Softmax policy over a Q-function (or learned logits).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QPolicy {
    pub q: QFunction,
    pub temperature: f64,
}

impl QPolicy {
    pub fn new(q: QFunction, temperature: f64) -> Self {
        Self { q, temperature }
    }

    pub fn probs(&self, state: &[f64], candidates: &[ActionRepr]) -> Result<Vec<f64>, RlError> {
        policy_probs(self, state, candidates)
    }
}

/// `softmax(Q(state, c) / temperature)` over the candidates.
pub fn policy_probs(
    p: &QPolicy,
    state: &[f64],
    candidates: &[ActionRepr],
) -> Result<Vec<f64>, RlError> {
    if candidates.is_empty() {
        return Err(RlError::EmptyCandidates);
    }
    let q = p.q.values(state, candidates)?;
    Ok(softmax(&q, p.temperature))
}

/// Index of the first maximal value.
pub fn greedy_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Conservatism weight; 0 disables the penalty.
    pub alpha: f64,
    pub gamma: f64,
    /// Gradient updates (network) or full-batch sweeps (tabular).
    pub iterations: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_units: usize,
    pub target_update_interval: usize,
    pub form: QFormKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 0.99,
            iterations: 5000,
            step_size: 1e-3,
            batch_size: 32,
            seed: 0,
            hidden_units: 256,
            target_update_interval: 200,
            form: QFormKind::Network,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::InvalidConfig(m.into()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if self.alpha < 0.0 {
            return bad("alpha must be non-negative");
        }
        if self.batch_size == 0 || self.hidden_units == 0 || self.target_update_interval == 0 {
            return bad("batch_size, hidden_units and target_update_interval must be positive");
        }
        if !(self.step_size > 0.0) {
            return bad("step_size must be positive");
        }
        Ok(())
    }
}

/// One logged transition in index form.
pub(crate) struct Transition {
    pub state: Vec<f64>,
    pub action: ActionRepr,
    pub reward: f64,
    pub candidates: Vec<ActionRepr>,
    /// Next state with its candidates; `None` after the last step.
    pub next: Option<(Vec<f64>, Vec<ActionRepr>)>,
    pub traj: usize,
}

/// Flattens trajectories into transitions and validates their shape.
pub(crate) fn transitions(
    trajs: &[AbstractTrajectory],
    space: ActionSpace,
) -> Result<(Vec<Transition>, usize, usize), RlError> {
    let first = trajs
        .iter()
        .find(|t| !t.is_empty())
        .ok_or(RlError::EmptyData)?;
    let (state_dim, action_dim) = (first.state_dim(), first.action_dim);
    if let ActionSpace::FullVocabulary { size } = space {
        if size != action_dim {
            return Err(RlError::DimensionMismatch {
                expected: size,
                found: action_dim,
            });
        }
    }
    let mut out = Vec::new();
    for (ti, t) in trajs.iter().enumerate() {
        if t.action_dim != action_dim {
            return Err(RlError::DimensionMismatch {
                expected: action_dim,
                found: t.action_dim,
            });
        }
        if space == ActionSpace::CandidateSet && !t.has_candidates() {
            return Err(RlError::MissingCandidateSets(t.trajectory_id.clone()));
        }
        for (i, s) in t.steps.iter().enumerate() {
            if s.state.len() != state_dim {
                return Err(RlError::DimensionMismatch {
                    expected: state_dim,
                    found: s.state.len(),
                });
            }
            let next = t
                .steps
                .get(i + 1)
                .map(|n| (n.state.clone(), candidates_for(space, n)));
            out.push(Transition {
                state: s.state.clone(),
                action: s.action.clone(),
                reward: s.reward,
                candidates: candidates_for(space, s),
                next,
                traj: ti,
            });
        }
    }
    Ok((out, state_dim, action_dim))
}

fn index_of(a: &ActionRepr) -> Result<usize, RlError> {
    match a {
        ActionRepr::Index(i) => Ok(*i),
        ActionRepr::Features(_) => Err(RlError::InvalidConfig(
            "tabular form needs index actions (name or name-type scheme)".into(),
        )),
    }
}

/// Tabular problem: states interned to dense ids.
pub(crate) struct TabularData {
    pub states: Vec<Vec<f64>>,
    pub sid: Vec<usize>,
    pub action: Vec<usize>,
    pub cands: Vec<Vec<usize>>,
    pub next: Vec<Option<(usize, Vec<usize>)>>,
}

pub(crate) fn intern(trans: &[Transition]) -> Result<TabularData, RlError> {
    let mut ids: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut states = Vec::new();
    let mut id = |s: &Vec<f64>, states: &mut Vec<Vec<f64>>| {
        *ids.entry(state_key(s)).or_insert_with(|| {
            states.push(s.clone());
            states.len() - 1
        })
    };
    let mut d = TabularData {
        states: Vec::new(),
        sid: Vec::new(),
        action: Vec::new(),
        cands: Vec::new(),
        next: Vec::new(),
    };
    for t in trans {
        d.sid.push(id(&t.state, &mut states));
        d.action.push(index_of(&t.action)?);
        d.cands.push(
            t.candidates
                .iter()
                .map(index_of)
                .collect::<Result<_, _>>()?,
        );
        d.next.push(match &t.next {
            Some((s, c)) => Some((
                id(s, &mut states),
                c.iter().map(index_of).collect::<Result<_, _>>()?,
            )),
            None => None,
        });
    }
    d.states = states;
    Ok(d)
}

fn table_from(states: &[Vec<f64>], q: &[Vec<f64>]) -> QTable {
    let mut t = QTable::default();
    for (s, v) in states.iter().zip(q) {
        t.insert(s, v.clone());
    }
    t
}

fn cql_tabular(
    trans: &[Transition],
    cfg: &TrainConfig,
    n_actions: usize,
) -> Result<QTable, RlError> {
    let d = intern(trans)?;
    let ns = d.states.len();
    let mut by_state: Vec<Vec<usize>> = vec![Vec::new(); ns];
    for (t, &s) in d.sid.iter().enumerate() {
        by_state[s].push(t);
    }
    let mut q = vec![vec![0.0; n_actions]; ns];
    let mut y = vec![0.0; trans.len()];
    let interval = cfg.target_update_interval;
    let mut u = 0;
    while u < cfg.iterations {
        if u % interval == 0 {
            for (t, tr) in trans.iter().enumerate() {
                y[t] = tr.reward
                    + match &d.next[t] {
                        Some((s2, c2)) => {
                            cfg.gamma
                                * c2.iter()
                                    .map(|&c| q[*s2][c])
                                    .fold(f64::NEG_INFINITY, f64::max)
                        }
                        None => 0.0,
                    };
            }
        }
        // Diagonally preconditioned full-batch step on each state's loss
        // (mean over that state's transitions). With alpha = 0 one step lands
        // exactly on the regression target.
        let mut max_delta: f64 = 0.0;
        for (s, ts) in by_state.iter().enumerate() {
            if ts.is_empty() {
                continue;
            }
            let inv = 1.0 / ts.len() as f64;
            let mut grad = vec![0.0; n_actions];
            let mut weight = vec![0.0; n_actions];
            for &t in ts {
                let a = d.action[t];
                grad[a] += 2.0 * (q[s][a] - y[t]) * inv;
                weight[a] += inv;
                if cfg.alpha > 0.0 {
                    let vals: Vec<f64> = d.cands[t].iter().map(|&c| q[s][c]).collect();
                    let pi = softmax(&vals, 1.0);
                    for (&c, p) in d.cands[t].iter().zip(pi) {
                        grad[c] += cfg.alpha * p * inv;
                    }
                    grad[a] -= cfg.alpha * inv;
                }
            }
            for b in 0..n_actions {
                let curvature = 2.0 * weight[b] + cfg.alpha / 2.0;
                if curvature > 0.0 && grad[b] != 0.0 {
                    let delta = grad[b] / curvature;
                    q[s][b] -= delta;
                    max_delta = max_delta.max(delta.abs());
                }
            }
        }
        u += 1;
        if max_delta < 1e-12 {
            if u % interval == 1 || interval == 1 {
                // Converged right after a target refresh: a fixed point.
                break;
            }
            u = u.div_ceil(interval) * interval;
        }
    }
    Ok(table_from(&d.states, &q))
}

/// Precomputed network inputs for one transition.
struct NetTransition {
    x: Vec<f64>,
    cand_x: Vec<Vec<f64>>,
    next_x: Option<Vec<Vec<f64>>>,
    reward: f64,
}

fn encode_transitions(trans: &[Transition], action_dim: usize) -> Vec<NetTransition> {
    trans
        .iter()
        .map(|t| NetTransition {
            x: encode_input(&t.state, &t.action, action_dim),
            cand_x: t
                .candidates
                .iter()
                .map(|c| encode_input(&t.state, c, action_dim))
                .collect(),
            next_x: t
                .next
                .as_ref()
                .map(|(s, cs)| cs.iter().map(|c| encode_input(s, c, action_dim)).collect()),
            reward: t.reward,
        })
        .collect()
}

fn cql_network(
    trans: &[Transition],
    cfg: &TrainConfig,
    state_dim: usize,
    action_dim: usize,
) -> Mlp {
    let data = encode_transitions(trans, action_dim);
    let mut net = Mlp::three_layer(
        state_dim + action_dim,
        cfg.hidden_units,
        derive_seed(cfg.seed, "cql-init"),
    );
    net.fit_input_scaling(data.iter().flat_map(|t| t.cand_x.iter().map(Vec::as_slice)));
    let mut opt = Adam::new(net.num_params(), cfg.step_size);
    let mut r = rng(derive_seed(cfg.seed, "cql-batches"));
    let mut y = vec![0.0; data.len()];
    let mut grad = vec![0.0; net.num_params()];
    for u in 0..cfg.iterations {
        if u % cfg.target_update_interval == 0 {
            let target = net.clone();
            for (t, tr) in data.iter().enumerate() {
                y[t] = tr.reward
                    + tr.next_x.as_ref().map_or(0.0, |xs| {
                        cfg.gamma
                            * xs.iter()
                                .map(|x| target.forward(x))
                                .fold(f64::NEG_INFINITY, f64::max)
                    });
            }
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let t = r.random_range(0..data.len());
            let tr = &data[t];
            let q = net.forward(&tr.x);
            net.accumulate_grad(&tr.x, scale * (2.0 * (q - y[t]) - cfg.alpha), &mut grad);
            if cfg.alpha > 0.0 {
                let vals: Vec<f64> = tr.cand_x.iter().map(|x| net.forward(x)).collect();
                for (x, p) in tr.cand_x.iter().zip(softmax(&vals, 1.0)) {
                    net.accumulate_grad(x, scale * cfg.alpha * p, &mut grad);
                }
            }
        }
        opt.step(net.params_mut(), &grad);
    }
    net
}

/// Conservative Q-learning on relabeled trajectories.
pub fn cql_train(
    trajs: &[AbstractTrajectory],
    cfg: &TrainConfig,
    actions: ActionSpace,
) -> Result<QFunction, RlError> {
    cfg.validate()?;
    let (trans, state_dim, action_dim) = transitions(trajs, actions)?;
    if trans.is_empty() {
        return Err(RlError::EmptyData);
    }
    let form = match cfg.form {
        QFormKind::Tabular => {
            if matches!(trans[0].action, ActionRepr::Features(_)) {
                return Err(RlError::InvalidConfig(
                    "tabular Q is only available for name and name-type schemes".into(),
                ));
            }
            QForm::Tabular(cql_tabular(&trans, cfg, action_dim)?)
        }
        QFormKind::Network => QForm::Network(cql_network(&trans, cfg, state_dim, action_dim)),
    };
    Ok(QFunction {
        form,
        gamma: cfg.gamma,
        action_space: actions,
        state_dim,
        action_dim,
    })
}

fn bc_tabular(trans: &[Transition], n_actions: usize) -> Result<QTable, RlError> {
    let d = intern(trans)?;
    let mut counts = vec![vec![0usize; n_actions]; d.states.len()];
    for (t, &s) in d.sid.iter().enumerate() {
        counts[s][d.action[t]] += 1;
    }
    let logits: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| {
            row.iter()
                .map(|&c| if c > 0 { (c as f64).ln() } else { UNSEEN_LOGIT })
                .collect()
        })
        .collect();
    Ok(table_from(&d.states, &logits))
}

fn bc_network(trans: &[Transition], cfg: &TrainConfig, state_dim: usize, action_dim: usize) -> Mlp {
    let data = encode_transitions(trans, action_dim);
    // Position of the taken action within its candidate list.
    let taken: Vec<usize> = trans
        .iter()
        .map(|t| {
            t.candidates
                .iter()
                .position(|c| *c == t.action)
                .unwrap_or(0)
        })
        .collect();
    let mut net = Mlp::three_layer(
        state_dim + action_dim,
        cfg.hidden_units,
        derive_seed(cfg.seed, "bc-init"),
    );
    net.fit_input_scaling(data.iter().flat_map(|t| t.cand_x.iter().map(Vec::as_slice)));
    let mut opt = Adam::new(net.num_params(), cfg.step_size);
    let mut r = rng(derive_seed(cfg.seed, "bc-batches"));
    let mut grad = vec![0.0; net.num_params()];
    let scale = 1.0 / cfg.batch_size as f64;
    for _ in 0..cfg.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for _ in 0..cfg.batch_size {
            let t = r.random_range(0..data.len());
            let tr = &data[t];
            let vals: Vec<f64> = tr.cand_x.iter().map(|x| net.forward(x)).collect();
            for (k, (x, p)) in tr.cand_x.iter().zip(softmax(&vals, 1.0)).enumerate() {
                let target = if k == taken[t] { 1.0 } else { 0.0 };
                net.accumulate_grad(x, scale * (p - target), &mut grad);
            }
        }
        opt.step(net.params_mut(), &grad);
    }
    net
}

/// Behavior cloning: a softmax-over-candidates classifier of the logged
/// actions. The returned policy's "Q" values are its logits.
pub fn bc_train(
    trajs: &[AbstractTrajectory],
    cfg: &TrainConfig,
    actions: ActionSpace,
    temperature: f64,
) -> Result<QPolicy, RlError> {
    cfg.validate()?;
    let (trans, state_dim, action_dim) = transitions(trajs, actions)?;
    if trans.is_empty() {
        return Err(RlError::EmptyData);
    }
    if let Some(t) = trans.iter().find(|t| !t.candidates.contains(&t.action)) {
        return Err(RlError::InvalidConfig(format!(
            "logged action missing from its candidate set in trajectory #{}",
            t.traj
        )));
    }
    let form = match cfg.form {
        QFormKind::Tabular => {
            if matches!(trans[0].action, ActionRepr::Features(_)) {
                return Err(RlError::InvalidConfig(
                    "tabular form is only available for name and name-type schemes".into(),
                ));
            }
            QForm::Tabular(bc_tabular(&trans, action_dim)?)
        }
        QFormKind::Network => QForm::Network(bc_network(&trans, cfg, state_dim, action_dim)),
    };
    Ok(QPolicy::new(
        QFunction {
            form,
            gamma: cfg.gamma,
            action_space: actions,
            state_dim,
            action_dim,
        },
        temperature,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    Cql,
    Bc,
}

/// Persisted policy, loadable by evaluation and intervention code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyArtifact {
    pub format_version: u32,
    pub id: String,
    pub scheme: SchemeKind,
    pub learner: Learner,
    pub policy: QPolicy,
}

impl PolicyArtifact {
    pub fn new(
        id: impl Into<String>,
        scheme: SchemeKind,
        learner: Learner,
        policy: QPolicy,
    ) -> Self {
        Self {
            format_version: POLICY_FORMAT_VERSION,
            id: id.into(),
            scheme,
            learner,
            policy,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RlError> {
        std::fs::write(path, serde_json::to_string(self).expect("serializable"))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RlError> {
        let text = std::fs::read_to_string(path)?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| RlError::Corrupt(e.to_string()))?;
        let version = v
            .get("format_version")
            .and_then(|x| x.as_u64())
            .unwrap_or(0) as u32;
        if version != POLICY_FORMAT_VERSION {
            return Err(RlError::UnsupportedVersion(version));
        }
        serde_json::from_value(v).map_err(|e| RlError::Corrupt(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::JudgeScores;

    fn step(state: &[f64], a: usize, r: f64, cands: &[usize]) -> AbstractStep {
        AbstractStep {
            state: state.to_vec(),
            action: ActionRepr::Index(a),
            reward: r,
            candidates: cands.iter().map(|&c| ActionRepr::Index(c)).collect(),
        }
    }

    fn traj(id: &str, n_actions: usize, steps: Vec<AbstractStep>) -> AbstractTrajectory {
        AbstractTrajectory {
            trajectory_id: id.into(),
            scenario_id: "s".into(),
            scheme: SchemeKind::Name,
            action_dim: n_actions,
            hmm_states: 0,
            scores: JudgeScores {
                fpc_accuracy: 0.0,
                rce_identification: 0.0,
            },
            steps,
        }
    }

    fn tabular_cfg(alpha: f64, gamma: f64) -> TrainConfig {
        TrainConfig {
            alpha,
            gamma,
            iterations: 2000,
            form: QFormKind::Tabular,
            target_update_interval: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_gamma_zero_alpha_gives_mean_reward() {
        let trajs = vec![
            traj("a", 2, vec![step(&[0.0], 0, 1.0, &[0, 1])]),
            traj("b", 2, vec![step(&[0.0], 0, 3.0, &[0, 1])]),
            traj("c", 2, vec![step(&[0.0], 1, -2.0, &[0, 1])]),
        ];
        let q = cql_train(
            &trajs,
            &tabular_cfg(0.0, 0.0),
            ActionSpace::FullVocabulary { size: 2 },
        )
        .unwrap();
        assert!((q.value(&[0.0], &ActionRepr::Index(0)).unwrap() - 2.0).abs() < 1e-12);
        assert!((q.value(&[0.0], &ActionRepr::Index(1)).unwrap() + 2.0).abs() < 1e-12);
        // Unvisited states score zero.
        assert_eq!(q.value(&[1.0], &ActionRepr::Index(1)).unwrap(), 0.0);
    }

    #[test]
    fn conservatism_lowers_unlogged_actions() {
        let trajs = vec![traj("a", 3, vec![step(&[0.0], 0, 1.0, &[0, 1, 2])])];
        let plain = cql_train(
            &trajs,
            &tabular_cfg(0.0, 0.0),
            ActionSpace::FullVocabulary { size: 3 },
        )
        .unwrap();
        let cons = cql_train(
            &trajs,
            &tabular_cfg(1.0, 0.0),
            ActionSpace::FullVocabulary { size: 3 },
        )
        .unwrap();
        let s = [0.0];
        let gap = |q: &QFunction| {
            q.value(&s, &ActionRepr::Index(0)).unwrap()
                - q.value(&s, &ActionRepr::Index(1)).unwrap()
        };
        assert!(gap(&cons) > gap(&plain));
    }

    #[test]
    fn bc_tabular_matches_counts() {
        let mut trajs = Vec::new();
        for (i, a) in [0, 0, 0, 1].iter().enumerate() {
            trajs.push(traj(
                &i.to_string(),
                3,
                vec![step(&[5.0], *a, 0.0, &[0, 1])],
            ));
        }
        let cfg = TrainConfig {
            form: QFormKind::Tabular,
            ..TrainConfig::default()
        };
        let p = bc_train(&trajs, &cfg, ActionSpace::CandidateSet, 1.0).unwrap();
        let probs = p
            .probs(&[5.0], &[ActionRepr::Index(0), ActionRepr::Index(1)])
            .unwrap();
        assert!((probs[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_policy_example() {
        let mut table = QTable::default();
        table.insert(&[0.0], vec![2.0, 1.0, 0.0]);
        let p = QPolicy::new(QFunction::tabular(table, 0.9, 1, 3), 1.0);
        let c: Vec<_> = (0..3).map(ActionRepr::Index).collect();
        let probs = policy_probs(&p, &[0.0], &c).unwrap();
        for (got, want) in probs.iter().zip([0.6652, 0.2447, 0.0900]) {
            assert!((got - want).abs() < 1e-4);
        }
        assert_eq!(policy_probs(&p, &[0.0], &c[1..2]).unwrap(), vec![1.0]);
        assert!(matches!(
            policy_probs(&p, &[0.0], &[]),
            Err(RlError::EmptyCandidates)
        ));
        assert!(matches!(
            policy_probs(&p, &[0.0, 1.0], &c),
            Err(RlError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn greedy_ties_pick_first() {
        assert_eq!(greedy_index(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn candidate_space_requires_candidates() {
        let mut t = traj("x", 2, vec![step(&[0.0], 0, 0.0, &[0])]);
        t.steps[0].candidates.clear();
        let err = cql_train(&[t], &tabular_cfg(0.0, 0.0), ActionSpace::CandidateSet).unwrap_err();
        assert!(matches!(err, RlError::MissingCandidateSets(id) if id == "x"));
        assert!(matches!(
            cql_train(&[], &tabular_cfg(0.0, 0.0), ActionSpace::CandidateSet),
            Err(RlError::EmptyData)
        ));
    }

    #[test]
    fn network_bc_learns_deterministic_expert() {
        let mut trajs = Vec::new();
        for i in 0..20 {
            trajs.push(traj(
                &i.to_string(),
                3,
                vec![
                    step(&[1.0, 0.0], 2, 0.0, &[0, 1, 2]),
                    step(&[0.0, 1.0], 0, 0.0, &[0, 1, 2]),
                ],
            ));
        }
        let cfg = TrainConfig {
            iterations: 400,
            hidden_units: 16,
            step_size: 1e-2,
            ..TrainConfig::default()
        };
        let p = bc_train(&trajs, &cfg, ActionSpace::CandidateSet, 1.0).unwrap();
        let c: Vec<_> = (0..3).map(ActionRepr::Index).collect();
        assert!(p.probs(&[1.0, 0.0], &c).unwrap()[2] >= 0.99);
        assert!(p.probs(&[0.0, 1.0], &c).unwrap()[0] >= 0.99);
    }

    #[test]
    fn artifact_round_trip() {
        let trajs = vec![traj("a", 2, vec![step(&[0.0], 0, 1.0, &[0, 1])])];
        let cfg = TrainConfig {
            iterations: 5,
            hidden_units: 4,
            ..TrainConfig::default()
        };
        let q = cql_train(&trajs, &cfg, ActionSpace::CandidateSet).unwrap();
        let art = PolicyArtifact::new("p", SchemeKind::Name, Learner::Cql, QPolicy::new(q, 1.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        art.save(&path).unwrap();
        assert_eq!(PolicyArtifact::load(&path).unwrap(), art);
        std::fs::write(&path, r#"{"format_version": 9}"#).unwrap();
        assert!(matches!(
            PolicyArtifact::load(&path),
            Err(RlError::UnsupportedVersion(9))
        ));
    }
}

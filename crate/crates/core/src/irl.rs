//! Contrastive reward learning from ranked trajectories.
//!
//! A reward network `r(s, a)` is trained so that, for every preference pair
//! `lower < higher`, the predicted return of `higher` beats that of `lower`
//! under a two-way softmax (Bradley-Terry) likelihood. The per-pair loss is
//! `-ln( e^{G_hi} / (e^{G_lo} + e^{G_hi}) ) = softplus(G_lo - G_hi)`, where
//! `G` is the (optionally discounted) sum of predicted rewards.

use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::{encode_input, AbstractTrajectory, ActionRepr};
use crate::data::JudgeScores;
use crate::nn::{sigmoid, softplus, Adam, Mlp};
use crate::seed::{derive_seed, rng};

pub const REWARD_NET_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_MARGIN: f64 = 5.0;

#[derive(Debug, Error)]
pub enum IrlError {
    #[error("dimension mismatch: network expects {expected} inputs, trajectory provides {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no preference pairs to train on")]
    EmptyPairSet,
    #[error("empty batch")]
    EmptyBatch,
    #[error("pair references trajectory {0}, which does not exist")]
    MissingTrajectory(usize),
    #[error("relabel mode needs a reward network")]
    MissingRewardNet,
    #[error("unsupported reward-net format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt reward-net file: {0}")]
    Corrupt(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingSignal {
    /// Fault propagation chain accuracy alone.
    FpcOnly,
    /// Mean of chain accuracy and root-cause identification.
    MeanFpcRce,
}

impl RankingSignal {
    pub fn score(self, s: &JudgeScores) -> f64 {
        match self {
            RankingSignal::FpcOnly => s.fpc_accuracy,
            RankingSignal::MeanFpcRce => 0.5 * (s.fpc_accuracy + s.rce_identification),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub lower: usize,
    pub higher: usize,
    pub score_gap: f64,
}

/// All pairs `(i, j)` with `value[j] - value[i] > margin`, in row-major
/// order; a seeded uniform subsample (order kept) when more than `max_pairs`.
pub fn pairs_from_values(
    values: &[f64],
    margin: f64,
    max_pairs: usize,
    seed: u64,
) -> Vec<PreferencePair> {
    let mut pairs = Vec::new();
    for (i, vi) in values.iter().enumerate() {
        for (j, vj) in values.iter().enumerate() {
            let gap = vj - vi;
            if i != j && gap > margin {
                pairs.push(PreferencePair {
                    lower: i,
                    higher: j,
                    score_gap: gap,
                });
            }
        }
    }
    if pairs.len() > max_pairs {
        let mut keep = sample(&mut rng(seed), pairs.len(), max_pairs).into_vec();
        keep.sort_unstable();
        pairs = keep.into_iter().map(|k| pairs[k]).collect();
    }
    pairs
}

pub fn build_pairs(
    scores: &[JudgeScores],
    signal: RankingSignal,
    margin: f64,
    max_pairs: usize,
    seed: u64,
) -> Vec<PreferencePair> {
    let values: Vec<f64> = scores.iter().map(|s| signal.score(s)).collect();
    pairs_from_values(&values, margin, max_pairs, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardNet {
    net: Mlp,
    action_dim: usize,
    /// Discount applied inside trajectory returns.
    gamma: f64,
}

#[derive(Serialize, Deserialize)]
struct RewardNetFile {
    format_version: u32,
    layer_dims: Vec<usize>,
    action_dim: usize,
    gamma: f64,
    params: Vec<f64>,
}

impl RewardNet {
    pub fn new(state_dim: usize, action_dim: usize, hidden: usize, gamma: f64, seed: u64) -> Self {
        Self {
            net: Mlp::three_layer(state_dim + action_dim, hidden, seed),
            action_dim,
            gamma,
        }
    }

    pub fn from_mlp(net: Mlp, action_dim: usize, gamma: f64) -> Self {
        Self {
            net,
            action_dim,
            gamma,
        }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn reward(&self, state: &[f64], action: &ActionRepr) -> f64 {
        self.net
            .forward(&encode_input(state, action, self.action_dim))
    }

    fn check(&self, traj: &AbstractTrajectory) -> Result<(), IrlError> {
        if traj.input_dim() != self.input_dim() || traj.action_dim != self.action_dim {
            return Err(IrlError::DimensionMismatch {
                expected: self.input_dim(),
                found: traj.input_dim(),
            });
        }
        Ok(())
    }

    /// Discounted predicted return of a trajectory.
    pub fn trajectory_return(&self, traj: &AbstractTrajectory) -> Result<f64, IrlError> {
        self.check(traj)?;
        let mut g = 0.0;
        let mut disc = 1.0;
        for s in &traj.steps {
            g += disc * self.reward(&s.state, &s.action);
            disc *= self.gamma;
        }
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IrlError> {
        let f = RewardNetFile {
            format_version: REWARD_NET_FORMAT_VERSION,
            layer_dims: self.net.layer_dims().to_vec(),
            action_dim: self.action_dim,
            gamma: self.gamma,
            params: self.net.params().to_vec(),
        };
        std::fs::write(path, serde_json::to_string(&f).expect("serializable"))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IrlError> {
        let text = std::fs::read_to_string(path)?;
        let f: RewardNetFile =
            serde_json::from_str(&text).map_err(|e| IrlError::Corrupt(e.to_string()))?;
        if f.format_version != REWARD_NET_FORMAT_VERSION {
            return Err(IrlError::UnsupportedVersion(f.format_version));
        }
        let net = Mlp::from_parts(f.layer_dims, f.params)
            .ok_or_else(|| IrlError::Corrupt("parameter count does not match layer_dims".into()))?;
        Ok(Self::from_mlp(net, f.action_dim, f.gamma))
    }
}

fn get<'a>(trajs: &'a [AbstractTrajectory], i: usize) -> Result<&'a AbstractTrajectory, IrlError> {
    trajs.get(i).ok_or(IrlError::MissingTrajectory(i))
}

/// Contrastive loss of a single preference pair.
pub fn trex_loss(
    net: &RewardNet,
    pair: &PreferencePair,
    trajs: &[AbstractTrajectory],
) -> Result<f64, IrlError> {
    let lo = net.trajectory_return(get(trajs, pair.lower)?)?;
    let hi = net.trajectory_return(get(trajs, pair.higher)?)?;
    Ok(softplus(lo - hi))
}

/// Mean loss over a batch of pairs.
pub fn trex_batch_loss(
    net: &RewardNet,
    batch: &[PreferencePair],
    trajs: &[AbstractTrajectory],
) -> Result<f64, IrlError> {
    if batch.is_empty() {
        return Err(IrlError::EmptyBatch);
    }
    let mut total = 0.0;
    for p in batch {
        total += trex_loss(net, p, trajs)?;
    }
    Ok(total / batch.len() as f64)
}

/// Cached network inputs per trajectory step.
struct Encoded {
    inputs: Vec<Vec<Vec<f64>>>,
}

impl Encoded {
    fn new(net: &RewardNet, trajs: &[AbstractTrajectory]) -> Result<Self, IrlError> {
        let mut inputs = Vec::with_capacity(trajs.len());
        for t in trajs {
            net.check(t)?;
            inputs.push(
                t.steps
                    .iter()
                    .map(|s| encode_input(&s.state, &s.action, net.action_dim))
                    .collect(),
            );
        }
        Ok(Self { inputs })
    }

    fn ret(&self, net: &RewardNet, i: usize) -> f64 {
        let mut g = 0.0;
        let mut disc = 1.0;
        for x in &self.inputs[i] {
            g += disc * net.net.forward(x);
            disc *= net.gamma;
        }
        g
    }

    fn add_return_grad(&self, net: &RewardNet, i: usize, scale: f64, grad: &mut [f64]) {
        let mut disc = 1.0;
        for x in &self.inputs[i] {
            net.net.accumulate_grad(x, scale * disc, grad);
            disc *= net.gamma;
        }
    }

    /// Mean-batch gradient, accumulated into a fresh vector.
    fn grad(&self, net: &RewardNet, batch: &[PreferencePair]) -> Vec<f64> {
        let mut g = vec![0.0; net.net.num_params()];
        let inv = 1.0 / batch.len() as f64;
        for p in batch {
            let d = self.ret(net, p.lower) - self.ret(net, p.higher);
            let w = sigmoid(d) * inv;
            if w == 0.0 {
                continue;
            }
            self.add_return_grad(net, p.lower, w, &mut g);
            self.add_return_grad(net, p.higher, -w, &mut g);
        }
        g
    }
}

fn check_pairs(pairs: &[PreferencePair], n: usize) -> Result<(), IrlError> {
    for p in pairs {
        for i in [p.lower, p.higher] {
            if i >= n {
                return Err(IrlError::MissingTrajectory(i));
            }
        }
    }
    Ok(())
}

/// Exact gradient of the mean batch loss, flattened like the network
/// parameters.
pub fn trex_grad(
    net: &RewardNet,
    batch: &[PreferencePair],
    trajs: &[AbstractTrajectory],
) -> Result<Vec<f64>, IrlError> {
    if batch.is_empty() {
        return Err(IrlError::EmptyBatch);
    }
    check_pairs(batch, trajs.len())?;
    let enc = Encoded::new(net, trajs)?;
    Ok(enc.grad(net, batch))
}

/// Fraction of pairs whose higher trajectory gets the strictly larger return.
pub fn pair_accuracy(
    net: &RewardNet,
    pairs: &[PreferencePair],
    trajs: &[AbstractTrajectory],
) -> Result<f64, IrlError> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut hit = 0usize;
    for p in pairs {
        let lo = net.trajectory_return(get(trajs, p.lower)?)?;
        let hi = net.trajectory_return(get(trajs, p.higher)?)?;
        if hi > lo {
            hit += 1;
        }
    }
    Ok(hit as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardTrainConfig {
    pub hidden_units: usize,
    pub epochs: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub holdout_fraction: f64,
    /// Discount inside trajectory returns.
    pub gamma: f64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            hidden_units: 256,
            epochs: 100,
            step_size: 1e-3,
            batch_size: 32,
            seed: 0,
            holdout_fraction: 0.1,
            gamma: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RewardTraining {
    pub net: RewardNet,
    pub holdout_accuracy: f64,
    pub holdout_pairs: usize,
    pub best_epoch: usize,
}

/// Mini-batch Adam on the mean contrastive loss. Returns the snapshot with
/// the best held-out pair accuracy (lower held-out loss breaks ties).
pub fn train_reward(
    pairs: &[PreferencePair],
    trajs: &[AbstractTrajectory],
    cfg: &RewardTrainConfig,
) -> Result<RewardTraining, IrlError> {
    if pairs.is_empty() {
        return Err(IrlError::EmptyPairSet);
    }
    check_pairs(pairs, trajs.len())?;
    let first = &trajs[pairs[0].lower];
    let mut net = RewardNet::new(
        first.state_dim(),
        first.action_dim,
        cfg.hidden_units,
        cfg.gamma,
        derive_seed(cfg.seed, "reward-init"),
    );
    let enc = Encoded::new(&net, trajs)?;

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng(derive_seed(cfg.seed, "reward-holdout")));
    let n_hold = (pairs.len() as f64 * cfg.holdout_fraction).floor() as usize;
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let holdout: Vec<PreferencePair> = hold_idx.iter().map(|&i| pairs[i]).collect();
    let mut train: Vec<PreferencePair> = train_idx.iter().map(|&i| pairs[i]).collect();
    // With too few pairs for a holdout, select on the training pairs.
    let select: Vec<PreferencePair> = if holdout.is_empty() {
        train.clone()
    } else {
        holdout.clone()
    };

    let evaluate = |net: &RewardNet| -> (f64, f64) {
        let mut hits = 0usize;
        let mut loss = 0.0;
        for p in &select {
            let d = enc.ret(net, p.lower) - enc.ret(net, p.higher);
            if d < 0.0 {
                hits += 1;
            }
            loss += softplus(d);
        }
        let n = select.len() as f64;
        (hits as f64 / n, loss / n)
    };

    let mut opt = Adam::new(net.net.num_params(), cfg.step_size);
    let mut shuffle_rng = rng(derive_seed(cfg.seed, "reward-batches"));
    let mut best = (evaluate(&net), net.clone(), 0usize);
    let batch = cfg.batch_size.max(1);
    for epoch in 1..=cfg.epochs {
        train.shuffle(&mut shuffle_rng);
        for chunk in train.chunks(batch) {
            let g = enc.grad(&net, chunk);
            opt.step(net.net.params_mut(), &g);
        }
        let (acc, loss) = evaluate(&net);
        let (best_acc, best_loss) = best.0;
        if acc > best_acc || (acc == best_acc && loss < best_loss) {
            best = ((acc, loss), net.clone(), epoch);
        }
    }
    Ok(RewardTraining {
        net: best.1,
        holdout_accuracy: best.0 .0,
        holdout_pairs: holdout.len(),
        best_epoch: best.2,
    })
}

/// How per-step rewards are assigned before policy learning. Outcomes are
/// judge scores on the 0..=100 scale and enter rewards divided by 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelabelMode {
    IrlPerTurn,
    SparseFinal { outcome: f64 },
    Combined { outcome: f64, lambda: f64 },
}

pub fn relabel(
    traj: &AbstractTrajectory,
    net: Option<&RewardNet>,
    mode: RelabelMode,
) -> Result<AbstractTrajectory, IrlError> {
    let mut out = traj.clone();
    let last = out.steps.len().saturating_sub(1);
    let predicted = |out: &mut AbstractTrajectory| -> Result<(), IrlError> {
        let net = net.ok_or(IrlError::MissingRewardNet)?;
        net.check(traj)?;
        for s in &mut out.steps {
            s.reward = net.reward(&s.state, &s.action);
        }
        Ok(())
    };
    match mode {
        RelabelMode::IrlPerTurn => predicted(&mut out)?,
        RelabelMode::SparseFinal { outcome } => {
            for (t, s) in out.steps.iter_mut().enumerate() {
                s.reward = if t == last { outcome / 100.0 } else { 0.0 };
            }
        }
        RelabelMode::Combined { outcome, lambda } => {
            predicted(&mut out)?;
            if let Some(s) = out.steps.last_mut() {
                s.reward += lambda * outcome / 100.0;
            }
        }
    }
    Ok(out)
}

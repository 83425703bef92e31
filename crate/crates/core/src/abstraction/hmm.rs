//! Gaussian-emission hidden Markov model over abstract observation
//! sequences: Baum-Welch fitting, Viterbi decoding and state augmentation.
//!
//! Emissions are diagonal Gaussians. Fitting starts from seeded k-means
//! means, pooled variances and uniform transitions; variances are floored
//! at [`VARIANCE_FLOOR`].

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AbstractTrajectory, AbstractionError, ActionRepr, SchemeKind};
use crate::seed::rng;

pub const VARIANCE_FLOOR: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HmmError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("degenerate data: all observations identical with {0} states")]
    DegenerateData(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hmm {
    pub n_states: usize,
    pub initial: Vec<f64>,
    /// Row-stochastic `K x K`.
    pub transition: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct HmmFit {
    pub hmm: Hmm,
    /// Total log-likelihood of the model at each iteration, the last entry
    /// belonging to the returned parameters.
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
}

impl Hmm {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn log_emission(&self, state: usize, x: &[f64]) -> f64 {
        let (m, v) = (&self.means[state], &self.variances[state]);
        let mut s = 0.0;
        for i in 0..x.len() {
            let d = x[i] - m[i];
            s += LN_2PI + v[i].ln() + d * d / v[i];
        }
        -0.5 * s
    }

    fn check_seq(&self, seq: &[Vec<f64>]) -> Result<(), HmmError> {
        if seq.is_empty() {
            return Err(HmmError::InvalidInput("empty sequence".into()));
        }
        for x in seq {
            if x.len() != self.dim() {
                return Err(HmmError::DimensionMismatch {
                    expected: self.dim(),
                    found: x.len(),
                });
            }
        }
        Ok(())
    }

    /// Scaled forward-backward. Returns (log-likelihood, gamma, xi-sum).
    fn forward_backward(&self, seq: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let k = self.n_states;
        let t_len = seq.len();
        // Emission likelihoods rescaled by their per-step maximum.
        let mut b = vec![vec![0.0; k]; t_len];
        let mut shift = vec![0.0; t_len];
        for (t, x) in seq.iter().enumerate() {
            let logs: Vec<f64> = (0..k).map(|j| self.log_emission(j, x)).collect();
            let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            shift[t] = m;
            for j in 0..k {
                b[t][j] = (logs[j] - m).exp();
            }
        }
        let mut alpha = vec![vec![0.0; k]; t_len];
        let mut scale = vec![0.0; t_len];
        for j in 0..k {
            alpha[0][j] = self.initial[j] * b[0][j];
        }
        scale[0] = alpha[0].iter().sum();
        alpha[0].iter_mut().for_each(|a| *a /= scale[0]);
        for t in 1..t_len {
            for j in 0..k {
                let s: f64 = (0..k)
                    .map(|i| alpha[t - 1][i] * self.transition[i][j])
                    .sum();
                alpha[t][j] = s * b[t][j];
            }
            scale[t] = alpha[t].iter().sum();
            let c = scale[t];
            alpha[t].iter_mut().for_each(|a| *a /= c);
        }
        let mut beta = vec![vec![1.0; k]; t_len];
        for t in (0..t_len - 1).rev() {
            for i in 0..k {
                beta[t][i] = (0..k)
                    .map(|j| self.transition[i][j] * b[t + 1][j] * beta[t + 1][j])
                    .sum::<f64>()
                    / scale[t + 1];
            }
        }
        let ll: f64 = scale.iter().map(|c| c.ln()).sum::<f64>() + shift.iter().sum::<f64>();
        let gamma: Vec<Vec<f64>> = (0..t_len)
            .map(|t| {
                let row: Vec<f64> = (0..k).map(|j| alpha[t][j] * beta[t][j]).collect();
                let z: f64 = row.iter().sum();
                row.into_iter().map(|g| g / z).collect()
            })
            .collect();
        let mut xi = vec![vec![0.0; k]; k];
        for t in 0..t_len - 1 {
            for i in 0..k {
                for j in 0..k {
                    xi[i][j] += alpha[t][i] * self.transition[i][j] * b[t + 1][j] * beta[t + 1][j]
                        / scale[t + 1];
                }
            }
        }
        (ll, gamma, xi)
    }

    /// Total log-likelihood of a set of sequences.
    pub fn log_likelihood(&self, seqs: &[Vec<Vec<f64>>]) -> Result<f64, HmmError> {
        let mut total = 0.0;
        for s in seqs {
            self.check_seq(s)?;
            total += self.forward_backward(s).0;
        }
        Ok(total)
    }

    fn log_initial(&self) -> Vec<f64> {
        self.initial.iter().map(|p| p.ln()).collect()
    }

    fn log_transition(&self) -> Vec<Vec<f64>> {
        self.transition
            .iter()
            .map(|r| r.iter().map(|p| p.ln()).collect())
            .collect()
    }

    /// Viterbi scores of the final step, or the prior when `seq` is empty.
    fn viterbi_forward(&self, seq: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<usize>>) {
        let k = self.n_states;
        let la = self.log_transition();
        let mut delta = self.log_initial();
        let mut back = Vec::with_capacity(seq.len());
        for (t, x) in seq.iter().enumerate() {
            if t > 0 {
                let mut next = vec![f64::NEG_INFINITY; k];
                let mut ptr = vec![0; k];
                for j in 0..k {
                    for i in 0..k {
                        let v = delta[i] + la[i][j];
                        if v > next[j] {
                            next[j] = v;
                            ptr[j] = i;
                        }
                    }
                }
                back.push(ptr);
                delta = next;
            }
            for (j, d) in delta.iter_mut().enumerate() {
                *d += self.log_emission(j, x);
            }
        }
        (delta, back)
    }

    /// Most likely hidden state for the step after `prefix`, before its
    /// observation is seen. With an empty prefix this is the argmax prior.
    pub fn predict_next_state(&self, prefix: &[Vec<f64>]) -> Result<usize, HmmError> {
        if !prefix.is_empty() {
            self.check_seq(prefix)?;
        }
        let (delta, _) = self.viterbi_forward(prefix);
        if prefix.is_empty() {
            return Ok(argmax_first(&delta));
        }
        let la = self.log_transition();
        let scores: Vec<f64> = (0..self.n_states)
            .map(|j| {
                (0..self.n_states)
                    .map(|i| delta[i] + la[i][j])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        Ok(argmax_first(&scores))
    }
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Maximum a posteriori hidden-state path; ties go to the lower index.
pub fn viterbi_decode(hmm: &Hmm, seq: &[Vec<f64>]) -> Result<Vec<usize>, HmmError> {
    hmm.check_seq(seq)?;
    let (delta, back) = hmm.viterbi_forward(seq);
    let mut path = vec![argmax_first(&delta)];
    for ptr in back.iter().rev() {
        let cur = *path.last().unwrap();
        path.push(ptr[cur]);
    }
    path.reverse();
    Ok(path)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded k-means++ followed by Lloyd iterations.
fn kmeans(points: &[&Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mut centers: Vec<Vec<f64>> = vec![points[r.random_range(0..points.len())].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, di) in d.iter().enumerate() {
                if u < *di {
                    idx = i;
                    break;
                }
                u -= di;
            }
            idx
        } else {
            r.random_range(0..points.len())
        };
        centers.push(points[pick].clone());
    }
    let dim = points[0].len();
    for _ in 0..50 {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let c = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .unwrap();
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        let mut moved = false;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            if next != centers[c] {
                moved = true;
                centers[c] = next;
            }
        }
        if !moved {
            break;
        }
    }
    centers
}

/// Baum-Welch estimation with `k` hidden states.
pub fn fit_hmm(
    seqs: &[Vec<Vec<f64>>],
    k: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<HmmFit, HmmError> {
    if k == 0 {
        return Err(HmmError::InvalidInput(
            "need at least one hidden state".into(),
        ));
    }
    if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
        return Err(HmmError::InvalidInput("sequences must be non-empty".into()));
    }
    let dim = seqs[0][0].len();
    for x in seqs.iter().flatten() {
        if x.len() != dim {
            return Err(HmmError::DimensionMismatch {
                expected: dim,
                found: x.len(),
            });
        }
    }
    let pooled: Vec<&Vec<f64>> = seqs.iter().flatten().collect();
    if k > 1 && pooled.iter().all(|x| *x == pooled[0]) {
        return Err(HmmError::DegenerateData(k));
    }
    let n = pooled.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|i| pooled.iter().map(|x| x[i]).sum::<f64>() / n)
        .collect();
    let var: Vec<f64> = (0..dim)
        .map(|i| {
            let v = pooled.iter().map(|x| (x[i] - mean[i]).powi(2)).sum::<f64>() / n;
            v.max(VARIANCE_FLOOR)
        })
        .collect();
    let mut hmm = Hmm {
        n_states: k,
        initial: vec![1.0 / k as f64; k],
        transition: vec![vec![1.0 / k as f64; k]; k],
        means: kmeans(&pooled, k, seed),
        variances: vec![var; k],
    };

    let mut lls = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let mut ll = 0.0;
        let mut init_acc = vec![0.0; k];
        let mut trans_acc = vec![vec![0.0; k]; k];
        let mut occ = vec![0.0; k];
        let mut occ_trans = vec![0.0; k];
        let mut sum_x = vec![vec![0.0; dim]; k];
        let mut gammas = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let (l, gamma, xi) = hmm.forward_backward(seq);
            ll += l;
            for i in 0..k {
                init_acc[i] += gamma[0][i];
                for j in 0..k {
                    trans_acc[i][j] += xi[i][j];
                }
            }
            for (t, (g, x)) in gamma.iter().zip(seq).enumerate() {
                for j in 0..k {
                    occ[j] += g[j];
                    if t + 1 < seq.len() {
                        occ_trans[j] += g[j];
                    }
                    for d in 0..dim {
                        sum_x[j][d] += g[j] * x[d];
                    }
                }
            }
            gammas.push(gamma);
        }
        let improvement = lls.last().map(|prev: &f64| ll - prev);
        lls.push(ll);
        if matches!(improvement, Some(d) if d < tol) {
            converged = true;
            break;
        }
        // M-step. States without expected mass keep their parameters.
        let ns = seqs.len() as f64;
        hmm.initial = init_acc.iter().map(|a| a / ns).collect();
        for j in 0..k {
            if occ_trans[j] > 1e-300 {
                let row: Vec<f64> = trans_acc[j].iter().map(|a| a / occ_trans[j]).collect();
                let z: f64 = row.iter().sum();
                hmm.transition[j] = row.into_iter().map(|a| a / z).collect();
            }
            if occ[j] > 1e-300 {
                hmm.means[j] = sum_x[j].iter().map(|s| s / occ[j]).collect();
            }
        }
        let mut sum_sq = vec![vec![0.0; dim]; k];
        for (gamma, seq) in gammas.iter().zip(seqs) {
            for (g, x) in gamma.iter().zip(seq) {
                for j in 0..k {
                    for d in 0..dim {
                        sum_sq[j][d] += g[j] * (x[d] - hmm.means[j][d]).powi(2);
                    }
                }
            }
        }
        for j in 0..k {
            if occ[j] > 1e-300 {
                hmm.variances[j] = sum_sq[j]
                    .iter()
                    .map(|s| (s / occ[j]).max(VARIANCE_FLOOR))
                    .collect();
            }
        }
    }
    if !converged {
        lls.push(hmm.log_likelihood(seqs)?);
    }
    Ok(HmmFit {
        hmm,
        log_likelihoods: lls,
        converged,
    })
}

/// HMM observations of a topology trajectory: each step's state features
/// followed by its action features.
pub fn observations(traj: &AbstractTrajectory) -> Result<Vec<Vec<f64>>, AbstractionError> {
    if traj.scheme != SchemeKind::Topology {
        return Err(AbstractionError::SchemeMismatch {
            expected: SchemeKind::Topology,
            found: traj.scheme,
        });
    }
    let base = traj.state_dim() - traj.hmm_states;
    traj.steps
        .iter()
        .map(|s| match &s.action {
            ActionRepr::Features(f) => Ok(s.state[..base].iter().chain(f).copied().collect()),
            ActionRepr::Index(_) => Err(AbstractionError::InvalidScheme(
                "topology trajectory with an index action".into(),
            )),
        })
        .collect()
}

/// Indicator vector of length `k` with a one at `state`.
pub fn one_hot(state: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[state] = 1.0;
    v
}

/// Appends the one-hot Viterbi state to every step's state vector.
pub fn augment_with_hmm(
    traj: &AbstractTrajectory,
    hmm: &Hmm,
) -> Result<AbstractTrajectory, AugmentError> {
    if traj.hmm_states > 0 {
        return Err(AugmentError::AlreadyAugmented);
    }
    let obs = observations(traj)?;
    let path = viterbi_decode(hmm, &obs)?;
    let mut out = traj.clone();
    for (step, s) in out.steps.iter_mut().zip(path) {
        step.state.extend(one_hot(s, hmm.n_states));
    }
    out.hmm_states = hmm.n_states;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AugmentError {
    #[error(transparent)]
    Scheme(#[from] AbstractionError),
    #[error(transparent)]
    Hmm(#[from] HmmError),
    #[error("trajectory already carries hidden-state features")]
    AlreadyAugmented,
}

//! Evaluation statistics: bootstrap Pass@3, Bonferroni-corrected paired
//! t-tests and Nemenyi critical differences.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::seed::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("scenario #{scenario} has {found} trials; at least 3 are needed")]
    TooFewTrials { scenario: usize, found: usize },
    #[error("no scenarios")]
    Empty,
    #[error("length mismatch: baseline has {expected} scenarios, method #{method} has {found}")]
    LengthMismatch {
        method: usize,
        expected: usize,
        found: usize,
    },
    #[error("need at least 2 scenarios, found {0}")]
    TooFewScenarios(usize),
    #[error("critical-difference tables cover 2..=10 methods, got {0}")]
    UnsupportedK(usize),
    #[error("unsupported significance level {0}; use 0.05 or 0.10")]
    UnsupportedAlpha(f64),
    #[error("invalid ranks in scenario #{scenario}: {message}")]
    BadRanks { scenario: usize, message: String },
}

/// One diagnosis trial of one method on one scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub success: bool,
    /// Chain F1 in [0, 1].
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAt3 {
    pub recall_mean: f64,
    pub recall_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    /// Per-scenario means over replicates, aligned with the input.
    pub scenario_recall: Vec<f64>,
    pub scenario_f1: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Bootstrap Pass@3 for one method: each replicate draws 3 trials with
/// replacement per scenario and scores the best of them. Standard
/// deviations are over replicates (population form).
///
/// The resampled indices depend only on `seed` and the trial counts, so two
/// tables of the same shape are resampled identically.
pub fn pass_at_3_bootstrap(
    scenarios: &[Vec<TrialRecord>],
    n_boot: usize,
    seed: u64,
) -> Result<PassAt3, StatsError> {
    if scenarios.is_empty() || n_boot == 0 {
        return Err(StatsError::Empty);
    }
    if let Some((i, s)) = scenarios.iter().enumerate().find(|(_, s)| s.len() < 3) {
        return Err(StatsError::TooFewTrials {
            scenario: i,
            found: s.len(),
        });
    }
    let ns = scenarios.len();
    let mut r = rng(seed);
    let mut recall = Vec::with_capacity(n_boot);
    let mut f1 = Vec::with_capacity(n_boot);
    let mut scn_recall = vec![0.0; ns];
    let mut scn_f1 = vec![0.0; ns];
    for _ in 0..n_boot {
        let (mut rs, mut fs) = (0.0, 0.0);
        for (i, trials) in scenarios.iter().enumerate() {
            let (mut hit, mut best) = (false, 0.0f64);
            for _ in 0..3 {
                let t = &trials[r.random_range(0..trials.len())];
                hit |= t.success;
                best = best.max(t.f1);
            }
            let h = if hit { 1.0 } else { 0.0 };
            rs += h;
            fs += best;
            scn_recall[i] += h;
            scn_f1[i] += best;
        }
        recall.push(rs / ns as f64);
        f1.push(fs / ns as f64);
    }
    let (recall_mean, recall_std) = mean_std(&recall);
    let (f1_mean, f1_std) = mean_std(&f1);
    let b = n_boot as f64;
    Ok(PassAt3 {
        recall_mean,
        recall_std,
        f1_mean,
        f1_std,
        scenario_recall: scn_recall.into_iter().map(|x| x / b).collect(),
        scenario_f1: scn_f1.into_iter().map(|x| x / b).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    /// Infinite when the differences are a nonzero constant.
    pub t_stat: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub significant: bool,
}

/// Two-sided paired t-test; `(t, p)`.
///
/// All-zero differences give `p = 1`; a nonzero constant difference gives
/// `p = 0`.
pub fn paired_t(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len(), "paired samples must align");
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        };
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("n >= 2");
    (t, (2.0 * dist.sf(t.abs())).min(1.0))
}

/// Paired t-test of each method against the baseline with Bonferroni
/// correction over the number of methods.
pub fn paired_t_bonferroni(
    baseline: &[f64],
    methods: &[Vec<f64>],
    alpha: f64,
) -> Result<Vec<TTestResult>, StatsError> {
    if baseline.len() < 2 {
        return Err(StatsError::TooFewScenarios(baseline.len()));
    }
    for (i, m) in methods.iter().enumerate() {
        if m.len() != baseline.len() {
            return Err(StatsError::LengthMismatch {
                method: i,
                expected: baseline.len(),
                found: m.len(),
            });
        }
    }
    let m = methods.len() as f64;
    Ok(methods
        .iter()
        .map(|x| {
            let (t_stat, p_raw) = paired_t(x, baseline);
            let p_adjusted = (m * p_raw).min(1.0);
            TTestResult {
                t_stat,
                p_raw,
                p_adjusted,
                significant: p_adjusted < alpha,
            }
        })
        .collect())
}

/// Two-tailed Nemenyi critical values `q_alpha` for k = 2..=10 (studentized
/// range quantile divided by sqrt 2).
const Q_05: [f64; 9] = [
    1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164,
];
const Q_10: [f64; 9] = [
    1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920,
];

pub fn nemenyi_q(k: usize, alpha: f64) -> Result<f64, StatsError> {
    if !(2..=10).contains(&k) {
        return Err(StatsError::UnsupportedK(k));
    }
    let table = if (alpha - 0.05).abs() < 1e-12 {
        &Q_05
    } else if (alpha - 0.10).abs() < 1e-12 {
        &Q_10
    } else {
        return Err(StatsError::UnsupportedAlpha(alpha));
    };
    Ok(table[k - 2])
}

/// Ranks of `scores` (1 = best), ties sharing their mid-rank.
pub fn mid_ranks(scores: &[f64], higher_is_better: bool) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let o = scores[a].total_cmp(&scores[b]);
        if higher_is_better {
            o.reverse()
        } else {
            o
        }
    });
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Methods x scenarios rank matrix from a methods x scenarios score matrix.
pub fn rank_matrix(scores: &[Vec<f64>], higher_is_better: bool) -> Vec<Vec<f64>> {
    let k = scores.len();
    let n = scores.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; n]; k];
    for s in 0..n {
        let col: Vec<f64> = scores.iter().map(|m| m[s]).collect();
        for (m, r) in mid_ranks(&col, higher_is_better).into_iter().enumerate() {
            out[m][s] = r;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NemenyiResult {
    pub avg_ranks: Vec<f64>,
    pub cd: f64,
    /// Maximal sets of methods (indices, best first) whose average ranks all
    /// lie within `cd` of each other.
    pub groups: Vec<Vec<usize>>,
    pub alpha: f64,
    pub n_scenarios: usize,
}

pub fn critical_difference(k: usize, n: usize, alpha: f64) -> Result<f64, StatsError> {
    Ok(nemenyi_q(k, alpha)? * ((k * (k + 1)) as f64 / (6.0 * n as f64)).sqrt())
}

/// Nemenyi analysis of a methods x scenarios rank matrix (lower is better).
pub fn nemenyi_cd(ranks: &[Vec<f64>], alpha: f64) -> Result<NemenyiResult, StatsError> {
    let k = ranks.len();
    if !(2..=10).contains(&k) {
        return Err(StatsError::UnsupportedK(k));
    }
    let n = ranks[0].len();
    if n < 2 {
        return Err(StatsError::TooFewScenarios(n));
    }
    let expected = (k * (k + 1)) as f64 / 2.0;
    for s in 0..n {
        if let Some(m) = ranks.iter().position(|row| row.len() != n) {
            return Err(StatsError::BadRanks {
                scenario: s,
                message: format!("method #{m} has {} entries, expected {n}", ranks[m].len()),
            });
        }
        let col: Vec<f64> = ranks.iter().map(|row| row[s]).collect();
        if col.iter().any(|r| !(1.0..=k as f64).contains(r)) {
            return Err(StatsError::BadRanks {
                scenario: s,
                message: format!("ranks must lie in [1, {k}]"),
            });
        }
        let sum: f64 = col.iter().sum();
        if (sum - expected).abs() > 1e-9 {
            return Err(StatsError::BadRanks {
                scenario: s,
                message: format!("ranks sum to {sum}, expected {expected}"),
            });
        }
    }
    let avg_ranks: Vec<f64> = ranks
        .iter()
        .map(|row| row.iter().sum::<f64>() / n as f64)
        .collect();
    let cd = critical_difference(k, n, alpha)?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| avg_ranks[a].total_cmp(&avg_ranks[b]).then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut last_end = None;
    for i in 0..k {
        let mut end = i;
        while end + 1 < k && avg_ranks[order[end + 1]] - avg_ranks[order[i]] < cd {
            end += 1;
        }
        // Runs ending where an earlier run ended are contained in it.
        if last_end.is_none_or(|e| end > e) {
            groups.push(order[i..=end].to_vec());
            last_end = Some(end);
        }
    }
    Ok(NemenyiResult {
        avg_ranks,
        cd,
        groups,
        alpha,
        n_scenarios: n,
    })
}

/// Plain-text critical-difference diagram: methods by average rank with one
/// bar column per group.
pub fn render_cd(names: &[String], res: &NemenyiResult) -> String {
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by(|&a, &b| {
        res.avg_ranks[a]
            .total_cmp(&res.avg_ranks[b])
            .then(a.cmp(&b))
    });
    let width = names.iter().map(String::len).max().unwrap_or(0);
    let mut out = format!(
        "CD = {:.3} (alpha = {}, k = {}, N = {})\n",
        res.cd,
        res.alpha,
        names.len(),
        res.n_scenarios
    );
    for &m in &order {
        let bars: String = res
            .groups
            .iter()
            .map(|g| if g.contains(&m) { '|' } else { ' ' })
            .collect();
        out.push_str(&format!(
            "{:>6.3}  {:<width$}  {}\n",
            res.avg_ranks[m],
            names[m],
            bars.trim_end()
        ));
    }
    out
}

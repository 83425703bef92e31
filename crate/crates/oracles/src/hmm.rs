//! Exhaustive decoding and sampling for Gaussian HMMs.

use dtmdp_core::abstraction::Hmm;
use rand::Rng;

fn log_normal(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m).powi(2) / v))
        .sum()
}

/// Log joint probability of a hidden path and the observations.
pub fn log_joint(h: &Hmm, path: &[usize], seq: &[Vec<f64>]) -> f64 {
    let mut lp = h.initial[path[0]].ln();
    for t in 0..seq.len() {
        if t > 0 {
            lp += h.transition[path[t - 1]][path[t]].ln();
        }
        lp += log_normal(&seq[t], &h.means[path[t]], &h.variances[path[t]]);
    }
    lp
}

/// Best path over all `K^T` candidates; the lexicographically first wins ties.
pub fn brute_force_viterbi(h: &Hmm, seq: &[Vec<f64>]) -> Vec<usize> {
    let (k, t) = (h.n_states, seq.len());
    let mut path = vec![0; t];
    let mut best = (f64::NEG_INFINITY, path.clone());
    loop {
        let lp = log_joint(h, &path, seq);
        if lp > best.0 {
            best = (lp, path.clone());
        }
        let mut i = t;
        loop {
            if i == 0 {
                return best.1;
            }
            i -= 1;
            path[i] += 1;
            if path[i] < k {
                break;
            }
            path[i] = 0;
        }
    }
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

/// Hidden path and observations of length `len`.
pub fn sample(h: &Hmm, len: usize, r: &mut impl Rng) -> (Vec<usize>, Vec<Vec<f64>>) {
    let mut z = draw(&h.initial, r);
    let (mut path, mut obs) = (Vec::new(), Vec::new());
    for t in 0..len {
        if t > 0 {
            z = draw(&h.transition[z], r);
        }
        path.push(z);
        obs.push(
            h.means[z]
                .iter()
                .zip(&h.variances[z])
                .map(|(m, v)| m + v.sqrt() * std_normal(r))
                .collect(),
        );
    }
    (path, obs)
}

/// Box-Muller.
fn std_normal(r: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - r.random::<f64>();
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Random HMM with well-separated means when `spread` is large.
pub fn random_hmm(k: usize, dim: usize, spread: f64, r: &mut impl Rng) -> Hmm {
    let stoch = |n: usize, r: &mut dyn rand::RngCore| {
        let v: Vec<f64> = (0..n).map(|_| r.random::<f64>() + 0.1).collect();
        let z: f64 = v.iter().sum();
        v.into_iter().map(|x| x / z).collect::<Vec<_>>()
    };
    let initial = stoch(k, r);
    let transition = (0..k).map(|_| stoch(k, r)).collect();
    Hmm {
        n_states: k,
        initial,
        transition,
        means: (0..k)
            .map(|_| (0..dim).map(|_| r.random_range(-spread..spread)).collect())
            .collect(),
        variances: (0..k)
            .map(|_| (0..dim).map(|_| r.random_range(0.3..1.5)).collect())
            .collect(),
    }
}

//! Evaluation statistics against closed forms and quadrature.

use dtmdp_core::seed::rng;
use dtmdp_core::stats::{
    critical_difference, nemenyi_cd, nemenyi_q, paired_t_bonferroni, pass_at_3_bootstrap,
    rank_matrix, TrialRecord,
};
use dtmdp_oracles::quad;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn bootstrap_recall_matches_closed_form() {
    let mut r = rng(12);
    let p: f64 = 0.4;
    let trials: Vec<TrialRecord> = (0..10_000)
        .map(|_| TrialRecord {
            success: r.random::<f64>() < p,
            f1: 0.0,
        })
        .collect();
    let res = pass_at_3_bootstrap(&[trials], 2000, 1).unwrap();
    assert!((res.recall_mean - (1.0 - (1.0 - p).powi(3))).abs() < 0.02);
}

#[test]
fn t_test_p_values_match_quadrature() {
    let mut r = rng(13);
    let noise = Normal::new(0.0, 1.0).unwrap();
    for case in 0..20 {
        let base: Vec<f64> = (0..10).map(|_| noise.sample(&mut r)).collect();
        let shift = 0.1 * case as f64;
        let m: Vec<f64> = base
            .iter()
            .map(|b| b + shift + noise.sample(&mut r))
            .collect();
        let res = paired_t_bonferroni(&base, &[m], 0.05).unwrap()[0];
        let want = quad::t_two_sided_p(res.t_stat, 9.0);
        assert!(
            (res.p_raw - want).abs() < 1e-6,
            "case {case}: {} vs {want}",
            res.p_raw
        );
    }
}

#[test]
fn q_table_matches_range_distribution() {
    for alpha in [0.05, 0.10] {
        for k in 2..=10 {
            let want = quad::nemenyi_q(k, alpha);
            let got = nemenyi_q(k, alpha).unwrap();
            assert!(
                (got - want).abs() < 1e-3,
                "k={k} alpha={alpha}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn cd_scales_with_inverse_sqrt_n() {
    for k in 2..=10 {
        let a = critical_difference(k, 6, 0.05).unwrap();
        let b = critical_difference(k, 12, 0.05).unwrap();
        assert!((a / b - 2f64.sqrt()).abs() < 1e-12);
    }
    assert!((critical_difference(2, 20, 0.05).unwrap() - 0.438_269).abs() < 1e-6);
    assert!(
        (critical_difference(4, 6, 0.05).unwrap() - 2.569 * (20.0f64 / 36.0).sqrt()).abs() < 1e-12
    );
}

proptest! {
    #[test]
    fn rank_rows_sum_to_triangular(scores in prop::collection::vec(prop::collection::vec(0u8..4, 5), 2..7)) {
        let k = scores.len();
        let s: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
        let ranks = rank_matrix(&s, true);
        for j in 0..5 {
            let sum: f64 = ranks.iter().map(|r| r[j]).sum();
            prop_assert!((sum - (k * (k + 1)) as f64 / 2.0).abs() < 1e-12);
        }
        prop_assert!(nemenyi_cd(&ranks, 0.05).is_ok());
    }

    #[test]
    fn recall_is_monotone_in_successes(bits in prop::collection::vec(any::<bool>(), 12), flip in 0usize..12) {
        let table = |b: &[bool]| -> Vec<Vec<TrialRecord>> {
            b.chunks(4)
                .map(|c| c.iter().map(|&s| TrialRecord { success: s, f1: 0.0 }).collect())
                .collect()
        };
        let before = pass_at_3_bootstrap(&table(&bits), 100, 3).unwrap();
        let mut better = bits.clone();
        better[flip] = true;
        let after = pass_at_3_bootstrap(&table(&better), 100, 3).unwrap();
        prop_assert!(after.recall_mean >= before.recall_mean);
    }
}

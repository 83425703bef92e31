//! Simulator contracts.

use dtmdp_core::sim::{generate_scenario, run_episode, EpisodeConfig, ScenarioConfig};

#[test]
fn generated_chains_are_directed_paths() {
    let cfg = ScenarioConfig::default();
    for seed in 0..100 {
        let s = generate_scenario(&cfg, seed).unwrap();
        assert_eq!(s.chain.first(), Some(&s.root_cause));
        assert_eq!(s.chain.last(), Some(&s.symptom));
        for w in s.chain.windows(2) {
            assert_eq!(s.graph.shortest_distance(&w[0], &w[1]).unwrap(), Some(1));
        }
    }
}

#[test]
fn noiseless_greedy_solves_path_graphs() {
    for len in 2..=6 {
        let cfg = ScenarioConfig {
            n_nodes: len,
            chain_length: len,
            edge_density: 0.0,
            evidence_noise: 0.0,
        };
        let ep = EpisodeConfig {
            max_turns: len + 2,
            epsilon: 0.0,
            ..EpisodeConfig::default()
        };
        for seed in 0..10 {
            let scn = generate_scenario(&cfg, seed).unwrap();
            let res = run_episode(&scn, None, &ep, seed);
            assert_eq!(res.scores.rce_identification, 100.0);
            assert_eq!(res.scores.fpc_accuracy, 100.0);
        }
    }
}

#[test]
fn emitted_trajectories_validate() {
    let cfg = ScenarioConfig::default();
    for seed in 0..20 {
        let scn = generate_scenario(&cfg, seed).unwrap();
        for trial in 0..5 {
            let res = run_episode(&scn, None, &EpisodeConfig::default(), seed * 100 + trial);
            res.trajectory.validate().unwrap();
            assert_eq!(res.trajectory.scores, res.scores);
            assert_eq!(res.turns_used, res.trajectory.steps.len());
        }
    }
}

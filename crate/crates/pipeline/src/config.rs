//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dtmdp_core::abstraction::{Abstractor, SchemeKind, SchemeSpec};
use dtmdp_core::context::CeConfig;
use dtmdp_core::irl::{RankingSignal, RewardTrainConfig, DEFAULT_MARGIN};
use dtmdp_core::rl::TrainConfig;
use dtmdp_core::sim::{EpisodeConfig, ScenarioConfig};

use crate::error::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub collect: CollectConfig,
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub irl: IrlConfig,
    #[serde(default)]
    pub rl: RlConfig,
    #[serde(default)]
    pub ope: OpeConfig,
    #[serde(default)]
    pub ce: CeConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Trajectory corpus. When absent, `collect` generates one in the
    /// artifacts directory.
    pub corpus: Option<PathBuf>,
    /// Graph file shared by all trajectories. When absent under the
    /// topology scheme, each trajectory uses its collected scenario's graph.
    pub graph: Option<PathBuf>,
    pub artifacts: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: None,
            graph: None,
            artifacts: PathBuf::from("artifacts"),
        }
    }
}

/// Simulated corpus of base-agent runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    pub n_scenarios: usize,
    pub episodes_per_scenario: usize,
    pub scenario: ScenarioConfig,
    pub episode: EpisodeConfig,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            n_scenarios: 60,
            episodes_per_scenario: 10,
            scenario: ScenarioConfig::default(),
            episode: EpisodeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub kind: SchemeKind,
    #[serde(default)]
    pub with_hubs: bool,
    #[serde(default)]
    pub with_hmm: bool,
    /// Hidden-state counts tried; the best validation likelihood wins.
    #[serde(default = "default_hmm_k")]
    pub hmm_k_candidates: Vec<usize>,
    #[serde(default)]
    pub unreachable_sentinel: Option<f64>,
}

fn default_hmm_k() -> Vec<usize> {
    vec![2, 3, 4, 6]
}

impl SchemeConfig {
    /// Scheme spec with the given vocabulary and graph filled in.
    pub fn spec(
        &self,
        vocabulary: Vec<dtmdp_core::Entity>,
        graph: Option<dtmdp_core::TopologyGraph>,
    ) -> SchemeSpec {
        SchemeSpec {
            kind: self.kind,
            with_hubs: self.with_hubs,
            with_hmm: self.with_hmm,
            vocabulary,
            graph,
            unreachable_sentinel: self.unreachable_sentinel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrlConfig {
    pub signal: RankingSignal,
    pub margin: f64,
    pub max_pairs: usize,
    pub training: RewardTrainConfig,
}

impl Default for IrlConfig {
    fn default() -> Self {
        Self {
            signal: RankingSignal::MeanFpcRce,
            margin: DEFAULT_MARGIN,
            max_pairs: 5000,
            training: RewardTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Irl,
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    /// Conservatism weights tried for each CQL reward mode.
    pub alphas: Vec<f64>,
    pub reward_modes: Vec<RewardMode>,
    pub with_bc: bool,
    /// Softmax temperature stored with trained policies.
    pub temperature: f64,
    pub train: TrainConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.1, 1.0, 5.0],
            reward_modes: vec![RewardMode::Irl, RewardMode::Sparse],
            with_bc: true,
            temperature: 1.0,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpeConfig {
    /// Fraction of trajectories held out for policy evaluation.
    pub split: f64,
    pub k: usize,
}

impl Default for OpeConfig {
    fn default() -> Self {
        Self { split: 0.3, k: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_scenarios: usize,
    pub scenario: ScenarioConfig,
    pub episode: EpisodeConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_scenarios: 20,
            scenario: ScenarioConfig::default(),
            episode: EpisodeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_trials: usize,
    pub n_boot: usize,
    pub alpha: f64,
    /// Expert-trajectory counts of the robustness sweep; empty disables it.
    pub robustness_counts: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_trials: 15,
            n_boot: 200,
            alpha: 0.05,
            robustness_counts: vec![100, 200, 300, 400],
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::ConfigInvalid(vec![format!("{}: {e}", path.display())]))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| PipelineError::ConfigInvalid(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section and reports all problems at once.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut errs = Vec::new();
        let mut check = |path: &str, r: Result<(), String>| {
            if let Err(m) = r {
                errs.push(format!("{path}: {m}"));
            }
        };
        let positive = |v: usize| {
            if v > 0 {
                Ok(())
            } else {
                Err("must be positive".to_string())
            }
        };

        if self.paths.corpus.is_none() {
            check("collect.n_scenarios", positive(self.collect.n_scenarios));
            check(
                "collect.episodes_per_scenario",
                positive(self.collect.episodes_per_scenario),
            );
            check(
                "collect.scenario",
                self.collect.scenario.validate().map_err(|e| e.to_string()),
            );
            check(
                "collect.episode",
                self.collect.episode.validate().map_err(|e| e.to_string()),
            );
        }
        if self.scheme.with_hmm {
            check(
                "scheme.hmm_k_candidates",
                if self.scheme.hmm_k_candidates.is_empty()
                    || self.scheme.hmm_k_candidates.contains(&0)
                {
                    Err("need at least one positive state count".into())
                } else {
                    Ok(())
                },
            );
            if self.scheme.kind != SchemeKind::Topology {
                check(
                    "scheme.with_hmm",
                    Err("hidden-state features need the topology scheme".into()),
                );
            }
        }
        if let Some(s) = self.scheme.unreachable_sentinel {
            check(
                "scheme.unreachable_sentinel",
                if s > 0.0 {
                    Ok(())
                } else {
                    Err("must be positive".into())
                },
            );
        }
        if self.scheme.kind != SchemeKind::Topology && self.paths.graph.is_some() {
            check(
                "paths.graph",
                Err("a graph is only used by the topology scheme".into()),
            );
        }
        // A throwaway scheme catches flag combinations the abstractor rejects.
        if self.scheme.kind == SchemeKind::Topology {
            let g = dtmdp_core::TopologyGraph::new(
                vec![
                    dtmdp_core::Entity::new("a", "x"),
                    dtmdp_core::Entity::new("b", "x"),
                ],
                vec![[0, 1]],
            )
            .expect("valid probe graph");
            let mut spec = self.scheme.spec(Vec::new(), Some(g));
            spec.with_hmm = false;
            check(
                "scheme",
                Abstractor::new(&spec)
                    .map(|_| ())
                    .map_err(|e| e.to_string()),
            );
        }

        check(
            "irl.margin",
            if self.irl.margin >= 0.0 {
                Ok(())
            } else {
                Err("must be non-negative".into())
            },
        );
        check("irl.max_pairs", positive(self.irl.max_pairs));
        let t = &self.irl.training;
        check("irl.training.hidden_units", positive(t.hidden_units));
        check("irl.training.batch_size", positive(t.batch_size));
        check(
            "irl.training.step_size",
            if t.step_size > 0.0 {
                Ok(())
            } else {
                Err("must be positive".into())
            },
        );
        check(
            "irl.training.holdout_fraction",
            if (0.0..1.0).contains(&t.holdout_fraction) {
                Ok(())
            } else {
                Err("must lie in [0, 1)".into())
            },
        );
        check(
            "irl.training.gamma",
            if t.gamma > 0.0 && t.gamma <= 1.0 {
                Ok(())
            } else {
                Err("must lie in (0, 1]".into())
            },
        );

        check(
            "rl.train",
            self.rl.train.validate().map_err(|e| e.to_string()),
        );
        check(
            "rl.alphas",
            if self.rl.alphas.iter().all(|a| *a >= 0.0) {
                Ok(())
            } else {
                Err("must be non-negative".into())
            },
        );
        check(
            "rl",
            if (self.rl.alphas.is_empty() || self.rl.reward_modes.is_empty()) && !self.rl.with_bc {
                Err("the policy grid is empty".into())
            } else {
                Ok(())
            },
        );
        check(
            "rl.temperature",
            if self.rl.temperature > 0.0 {
                Ok(())
            } else {
                Err("must be positive".into())
            },
        );
        check(
            "ope.split",
            if self.ope.split > 0.0 && self.ope.split < 1.0 {
                Ok(())
            } else {
                Err("must lie in (0, 1)".into())
            },
        );
        check("ope.k", positive(self.ope.k));
        check("ce", self.ce.validate().map_err(|e| e.to_string()));
        check("sim.n_scenarios", positive(self.sim.n_scenarios));
        check(
            "sim.scenario",
            self.sim.scenario.validate().map_err(|e| e.to_string()),
        );
        check(
            "sim.episode",
            self.sim.episode.validate().map_err(|e| e.to_string()),
        );
        check("eval.n_trials", positive(self.eval.n_trials));
        check("eval.n_boot", positive(self.eval.n_boot));
        check(
            "eval.alpha",
            if self.eval.alpha == 0.05 || self.eval.alpha == 0.10 {
                Ok(())
            } else {
                Err("must be 0.05 or 0.10".into())
            },
        );
        check(
            "eval.robustness_counts",
            if self.eval.robustness_counts.contains(&0) {
                Err("counts must be positive".into())
            } else {
                Ok(())
            },
        );

        if errs.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::ConfigInvalid(errs))
        }
    }
}

//! The pipeline stages. Each stage reads its inputs from the artifacts
//! root, writes into its own subdirectory and records a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dtmdp_core::abstraction::{
    augment_with_hmm, fit_hmm, hmm::observations, vocabulary_from, AbstractTrajectory, Abstractor,
    Hmm, SchemeKind, SchemeSpec,
};
use dtmdp_core::context::{CeConfig, Strategy};
use dtmdp_core::data::{load_corpus, save_corpus, RawTrajectory};
use dtmdp_core::irl::{
    build_pairs, relabel, train_reward, RelabelMode, RewardNet, RewardTrainConfig,
};
use dtmdp_core::ope::{fqe, rank_scores};
use dtmdp_core::rl::{
    bc_train, cql_train, ActionSpace, Learner, PolicyArtifact, QPolicy, TrainConfig,
};
use dtmdp_core::seed::{derive_indexed, derive_seed, rng};
use dtmdp_core::sim::{generate_scenario, run_episode, CeAgent, SimScenario};
use dtmdp_core::stats::{
    nemenyi_cd, paired_t_bonferroni, pass_at_3_bootstrap, rank_matrix, render_cd, PassAt3,
    TTestResult, TrialRecord,
};
use dtmdp_core::TopologyGraph;

use crate::config::{PipelineConfig, RewardMode};
use crate::error::PipelineError;
use crate::manifest::{
    read_json, read_jsonl, sha256_hex, write_bytes, write_json, write_jsonl, Manifest,
    ManifestBuilder,
};

pub const COLLECT: &str = "collect";
pub const ABSTRACT: &str = "abstract";
pub const TRAIN_REWARD: &str = "train-reward";
pub const RELABEL: &str = "relabel";
pub const TRAIN_POLICY: &str = "train-policy";
pub const RANK: &str = "rank";
pub const SIMULATE: &str = "simulate";
pub const EVALUATE: &str = "evaluate";
pub const ROBUSTNESS: &str = "robustness";
pub const REPRODUCE: &str = "reproduce";

pub const BASELINE: &str = "baseline";

/// Policy families compared in the closed loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    RlIrl,
    RlSparse,
    Bc,
}

impl Group {
    pub fn label(self) -> &'static str {
        match self {
            Group::RlIrl => "rl-irl",
            Group::RlSparse => "rl-sparse",
            Group::Bc => "bc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub id: String,
    pub group: Group,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmSelection {
    pub hmm: Hmm,
    /// `(k, validation log-likelihood)` for every candidate tried.
    pub validation: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub n_train_trajectories: usize,
    pub n_pairs: usize,
    pub holdout_pairs: usize,
    pub holdout_accuracy: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub id: String,
    pub group: Group,
    pub score: f64,
    pub rank: usize,
    pub top_k: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub k: usize,
    pub rows: Vec<RankRow>,
    /// Best-scoring policy per group.
    pub selection: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub policy: Option<String>,
    pub strategies: Vec<Strategy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub arm: String,
    pub scenario: usize,
    pub scenario_id: String,
    pub trial: usize,
    pub seed: u64,
    pub rce: f64,
    pub fpc: f64,
    pub turns_used: usize,
    pub entities_explored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub avg_rank: f64,
    pub t_stat: Option<f64>,
    pub p_raw: Option<f64>,
    pub p_adjusted: Option<f64>,
    pub significant: Option<bool>,
    pub mean_entities_explored: f64,
    pub mean_turns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arms: Vec<ArmSummary>,
    pub pass_at_3: BTreeMap<String, PassAt3>,
    pub t_tests: BTreeMap<String, TTestResult>,
    pub cd: f64,
    /// Nemenyi groups as arm names, best first.
    pub groups: Vec<Vec<String>>,
}

impl EvalReport {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub n_trajectories: usize,
    pub rl_irl: f64,
    pub bc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
    pub rl_irl_range: f64,
    pub bc_range: f64,
    pub rl_irl_more_stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub evaluation: EvalReport,
    pub robustness: Option<RobustnessReport>,
    pub ranking: RankReport,
}

fn range(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let hi = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let lo = xs.fold(f64::INFINITY, f64::min);
    hi - lo
}

fn fail(stage: &'static str) -> impl Fn(String) -> PipelineError {
    move |m| PipelineError::StageFailed { stage, message: m }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    root: PathBuf,
    config_hash: String,
}

impl Pipeline {
    /// Applies CLI overrides and validates.
    pub fn new(
        mut cfg: PipelineConfig,
        seed: Option<u64>,
        out: Option<PathBuf>,
    ) -> Result<Self, PipelineError> {
        if let Some(s) = seed {
            cfg.master_seed = s;
        }
        if let Some(o) = out {
            cfg.paths.artifacts = o;
        }
        cfg.validate()?;
        let mut hashed = cfg.clone();
        // Where artifacts go does not change what they contain.
        hashed.paths.artifacts = PathBuf::new();
        let config_hash = sha256_hex(
            serde_json::to_string(&hashed)
                .expect("serializable")
                .as_bytes(),
        );
        let root = cfg.paths.artifacts.clone();
        Ok(Self {
            cfg,
            root,
            config_hash,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn seed(&self, stage: &str) -> u64 {
        derive_seed(self.cfg.master_seed, stage)
    }

    fn dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    fn manifest(&self, stage: &str) -> ManifestBuilder<'_> {
        ManifestBuilder::new(&self.root, stage, &self.config_hash, self.seed(stage))
    }

    fn corpus_path(&self) -> PathBuf {
        self.cfg
            .paths
            .corpus
            .clone()
            .unwrap_or_else(|| self.dir(COLLECT).join("corpus.jsonl"))
    }

    fn scenarios_path(&self) -> PathBuf {
        self.dir(COLLECT).join("scenarios.json")
    }

    fn abstract_path(&self) -> PathBuf {
        self.dir(ABSTRACT).join("abstract.jsonl")
    }

    fn split_path(&self) -> PathBuf {
        self.dir(ABSTRACT).join("split.json")
    }

    fn scheme_path(&self) -> PathBuf {
        self.dir(ABSTRACT).join("scheme.json")
    }

    fn hmm_path(&self) -> PathBuf {
        self.dir(ABSTRACT).join("hmm.json")
    }

    fn reward_path(&self) -> PathBuf {
        self.dir(TRAIN_REWARD).join("reward_net.json")
    }

    fn relabeled_path(&self, mode: RewardMode) -> PathBuf {
        let name = match mode {
            RewardMode::Irl => "irl.jsonl",
            RewardMode::Sparse => "sparse.jsonl",
        };
        self.dir(RELABEL).join(name)
    }

    fn grid_path(&self) -> PathBuf {
        self.dir(TRAIN_POLICY).join("grid.json")
    }

    fn policy_path(&self, id: &str) -> PathBuf {
        self.dir(TRAIN_POLICY).join(format!("{id}.json"))
    }

    fn ranking_path(&self) -> PathBuf {
        self.dir(RANK).join("ranking.json")
    }

    fn results_path(&self) -> PathBuf {
        self.dir(SIMULATE).join("results.jsonl")
    }

    fn report_path(&self) -> PathBuf {
        self.dir(EVALUATE).join("report.json")
    }

    fn robustness_path(&self) -> PathBuf {
        self.dir(ROBUSTNESS).join("report.json")
    }

    /// Base-agent runs on generated scenarios, used as the expert corpus
    /// when no corpus file is configured.
    pub fn collect(&self) -> Result<Manifest, PipelineError> {
        let c = &self.cfg.collect;
        let seed = self.seed(COLLECT);
        let scenarios: Vec<SimScenario> = (0..c.n_scenarios)
            .map(|j| generate_scenario(&c.scenario, derive_indexed(seed, "scenario", j as u64)))
            .collect::<Result<_, _>>()
            .map_err(|e| PipelineError::stage(COLLECT, e))?;
        let jobs: Vec<(usize, usize)> = (0..c.n_scenarios)
            .flat_map(|j| (0..c.episodes_per_scenario).map(move |e| (j, e)))
            .collect();
        let trajs: Vec<RawTrajectory> = jobs
            .par_iter()
            .map(|&(j, e)| {
                let s = derive_indexed(seed, "episode", (j * c.episodes_per_scenario + e) as u64);
                run_episode(&scenarios[j], None, &c.episode, s).trajectory
            })
            .collect();
        let corpus = self.dir(COLLECT).join("corpus.jsonl");
        std::fs::create_dir_all(self.dir(COLLECT)).map_err(|e| PipelineError::stage(COLLECT, e))?;
        save_corpus(&trajs, &corpus).map_err(|e| PipelineError::stage(COLLECT, e))?;
        write_json(&self.scenarios_path(), &scenarios)?;
        info!(
            "collected {} trajectories over {} scenarios",
            trajs.len(),
            scenarios.len()
        );
        let mut m = self.manifest(COLLECT);
        m.artifact(&corpus)?;
        m.artifact(&self.scenarios_path())?;
        m.write(&self.dir(COLLECT))
    }

    /// Graphs per scenario id, or one shared graph.
    fn graphs(&self, m: &mut ManifestBuilder<'_>) -> Result<GraphSource, PipelineError> {
        if let Some(p) = &self.cfg.paths.graph {
            m.input(p)?;
            return Ok(GraphSource::Shared(read_json(p)?));
        }
        let p = self.scenarios_path();
        m.input(&p)?;
        let scenarios: Vec<SimScenario> = read_json(&p)?;
        Ok(GraphSource::PerScenario(
            scenarios
                .into_iter()
                .map(|s| (s.scenario_id, s.graph))
                .collect(),
        ))
    }

    pub fn abstract_stage(&self) -> Result<Manifest, PipelineError> {
        let f = fail(ABSTRACT);
        let mut m = self.manifest(ABSTRACT);
        let corpus_path = self.corpus_path();
        m.input(&corpus_path)?;
        let raw = load_corpus(&corpus_path).map_err(|e| f(e.to_string()))?;
        if raw.is_empty() {
            return Err(f("corpus is empty".into()));
        }
        let kind = self.cfg.scheme.kind;
        let mut trajs: Vec<AbstractTrajectory> = if kind == SchemeKind::Topology {
            let graphs = self.graphs(&mut m)?;
            let mut abstractors: BTreeMap<String, Abstractor> = BTreeMap::new();
            let mut out = Vec::with_capacity(raw.len());
            for t in &raw {
                if !abstractors.contains_key(&t.scenario_id) {
                    let g = graphs
                        .get(&t.scenario_id)
                        .ok_or_else(|| f(format!("no graph for scenario {}", t.scenario_id)))?;
                    let mut spec = self.cfg.scheme.spec(Vec::new(), Some(g.clone()));
                    spec.with_hmm = false;
                    let a = Abstractor::new(&spec).map_err(|e| f(e.to_string()))?;
                    abstractors.insert(t.scenario_id.clone(), a);
                }
                out.push(
                    abstractors[&t.scenario_id]
                        .abstract_trajectory(t)
                        .map_err(|e| f(format!("{}: {e}", t.trajectory_id)))?,
                );
            }
            out
        } else {
            let spec = self.cfg.scheme.spec(vocabulary_from(kind, &raw), None);
            let a = Abstractor::new(&spec).map_err(|e| f(e.to_string()))?;
            raw.iter()
                .map(|t| {
                    a.abstract_trajectory(t)
                        .map_err(|e| f(format!("{}: {e}", t.trajectory_id)))
                })
                .collect::<Result<_, _>>()?
        };

        let seed = self.seed(ABSTRACT);
        if self.cfg.scheme.with_hmm {
            let sel = self.select_hmm(&trajs, seed)?;
            info!(
                "hidden states: k = {} ({:?})",
                sel.hmm.n_states, sel.validation
            );
            trajs = trajs
                .iter()
                .map(|t| augment_with_hmm(t, &sel.hmm).map_err(|e| f(e.to_string())))
                .collect::<Result<_, _>>()?;
            write_json(&self.hmm_path(), &sel)?;
            m.artifact(&self.hmm_path())?;
        }

        let mut order: Vec<usize> = (0..trajs.len()).collect();
        order.shuffle(&mut rng(derive_seed(seed, "split")));
        let n_eval = ((trajs.len() as f64) * self.cfg.ope.split).round() as usize;
        let n_eval = n_eval.clamp(1, trajs.len().saturating_sub(1).max(1));
        let split = Split {
            eval: order[..n_eval].to_vec(),
            train: order[n_eval..].to_vec(),
        };
        if split.train.is_empty() {
            return Err(f("too few trajectories to split".into()));
        }

        // The scheme the policies act under; topology graphs come from the
        // scenario at intervention time.
        let vocabulary = match kind {
            SchemeKind::Topology => Vec::new(),
            _ => vocabulary_from(kind, &raw),
        };
        let scheme = self.cfg.scheme.spec(vocabulary, None);

        write_jsonl(&self.abstract_path(), &trajs)?;
        write_json(&self.split_path(), &split)?;
        write_json(&self.scheme_path(), &scheme)?;
        m.artifact(&self.abstract_path())?;
        m.artifact(&self.split_path())?;
        m.artifact(&self.scheme_path())?;
        m.write(&self.dir(ABSTRACT))
    }

    fn select_hmm(
        &self,
        trajs: &[AbstractTrajectory],
        seed: u64,
    ) -> Result<HmmSelection, PipelineError> {
        let f = fail(ABSTRACT);
        let mut seqs: Vec<Vec<Vec<f64>>> = trajs
            .iter()
            .map(|t| observations(t).map_err(|e| f(e.to_string())))
            .collect::<Result<_, _>>()?;
        seqs.shuffle(&mut rng(derive_seed(seed, "hmm-split")));
        let n_val = (seqs.len() / 5).max(1).min(seqs.len() - 1);
        let (val, fit) = seqs.split_at(n_val);
        if fit.is_empty() {
            return Err(f("too few trajectories to choose hidden-state count".into()));
        }
        let fits: Vec<(usize, Hmm, f64)> = self
            .cfg
            .scheme
            .hmm_k_candidates
            .par_iter()
            .map(|&k| {
                let h = fit_hmm(fit, k, 200, 1e-6, derive_indexed(seed, "hmm", k as u64))
                    .map_err(|e| f(e.to_string()))?
                    .hmm;
                let ll = h.log_likelihood(val).map_err(|e| f(e.to_string()))?;
                Ok((k, h, ll))
            })
            .collect::<Result<_, PipelineError>>()?;
        let validation = fits.iter().map(|(k, _, ll)| (*k, *ll)).collect();
        let best = fits
            .into_iter()
            .reduce(|a, b| if b.2 > a.2 { b } else { a })
            .expect("at least one candidate");
        Ok(HmmSelection {
            hmm: best.1,
            validation,
        })
    }

    fn load_abstract(
        &self,
        m: &mut ManifestBuilder<'_>,
    ) -> Result<(Vec<AbstractTrajectory>, Split), PipelineError> {
        m.input(&self.abstract_path())?;
        m.input(&self.split_path())?;
        Ok((
            read_jsonl(&self.abstract_path())?,
            read_json(&self.split_path())?,
        ))
    }

    fn reward_config(&self, seed: u64) -> RewardTrainConfig {
        RewardTrainConfig {
            seed,
            ..self.cfg.irl.training.clone()
        }
    }

    fn fit_reward(
        &self,
        trajs: &[AbstractTrajectory],
        seed: u64,
    ) -> Result<(RewardNet, RewardReport), PipelineError> {
        let irl = &self.cfg.irl;
        let scores: Vec<_> = trajs.iter().map(|t| t.scores).collect();
        let pairs = build_pairs(
            &scores,
            irl.signal,
            irl.margin,
            irl.max_pairs,
            derive_seed(seed, "pairs"),
        );
        let res = train_reward(&pairs, trajs, &self.reward_config(seed))
            .map_err(|e| PipelineError::stage(TRAIN_REWARD, e))?;
        let report = RewardReport {
            n_train_trajectories: trajs.len(),
            n_pairs: pairs.len(),
            holdout_pairs: res.holdout_pairs,
            holdout_accuracy: res.holdout_accuracy,
            best_epoch: res.best_epoch,
        };
        Ok((res.net, report))
    }

    pub fn train_reward_stage(&self) -> Result<Manifest, PipelineError> {
        let mut m = self.manifest(TRAIN_REWARD);
        let (trajs, split) = self.load_abstract(&mut m)?;
        let train: Vec<_> = split.train.iter().map(|&i| trajs[i].clone()).collect();
        let (net, report) = self.fit_reward(&train, self.seed(TRAIN_REWARD))?;
        info!(
            "reward net: {} pairs, held-out accuracy {:.3}",
            report.n_pairs, report.holdout_accuracy
        );
        std::fs::create_dir_all(self.dir(TRAIN_REWARD))
            .map_err(|e| PipelineError::stage(TRAIN_REWARD, e))?;
        net.save(self.reward_path())
            .map_err(|e| PipelineError::stage(TRAIN_REWARD, e))?;
        let report_path = self.dir(TRAIN_REWARD).join("report.json");
        write_json(&report_path, &report)?;
        m.artifact(&self.reward_path())?;
        m.artifact(&report_path)?;
        m.write(&self.dir(TRAIN_REWARD))
    }

    fn relabel_all(
        &self,
        trajs: &[AbstractTrajectory],
        net: &RewardNet,
        mode: RewardMode,
    ) -> Result<Vec<AbstractTrajectory>, PipelineError> {
        trajs
            .iter()
            .map(|t| {
                let mode = match mode {
                    RewardMode::Irl => RelabelMode::IrlPerTurn,
                    RewardMode::Sparse => RelabelMode::SparseFinal {
                        outcome: self.cfg.irl.signal.score(&t.scores),
                    },
                };
                relabel(t, Some(net), mode).map_err(|e| PipelineError::stage(RELABEL, e))
            })
            .collect()
    }

    fn load_reward(&self, m: &mut ManifestBuilder<'_>) -> Result<RewardNet, PipelineError> {
        let p = self.reward_path();
        m.input(&p)?;
        if !p.is_file() {
            return Err(PipelineError::MissingArtifact(p));
        }
        RewardNet::load(&p).map_err(|e| PipelineError::stage(RELABEL, e))
    }

    pub fn relabel_stage(&self) -> Result<Manifest, PipelineError> {
        let mut m = self.manifest(RELABEL);
        let net = self.load_reward(&mut m)?;
        m.input(&self.abstract_path())?;
        let trajs: Vec<AbstractTrajectory> = read_jsonl(&self.abstract_path())?;
        for mode in [RewardMode::Irl, RewardMode::Sparse] {
            let out = self.relabel_all(&trajs, &net, mode)?;
            write_jsonl(&self.relabeled_path(mode), &out)?;
            m.artifact(&self.relabeled_path(mode))?;
        }
        m.write(&self.dir(RELABEL))
    }

    fn grid(&self) -> Vec<GridPoint> {
        let mut g = Vec::new();
        for mode in &self.cfg.rl.reward_modes {
            let group = match mode {
                RewardMode::Irl => Group::RlIrl,
                RewardMode::Sparse => Group::RlSparse,
            };
            for &alpha in &self.cfg.rl.alphas {
                g.push(GridPoint {
                    id: format!("{}-a{alpha}", group.label()),
                    group,
                    alpha: Some(alpha),
                });
            }
        }
        if self.cfg.rl.with_bc {
            g.push(GridPoint {
                id: Group::Bc.label().to_string(),
                group: Group::Bc,
                alpha: None,
            });
        }
        g
    }

    fn train_point(
        &self,
        p: &GridPoint,
        data: &[AbstractTrajectory],
        seed: u64,
    ) -> Result<PolicyArtifact, PipelineError> {
        let f = fail(TRAIN_POLICY);
        let cfg = TrainConfig {
            alpha: p.alpha.unwrap_or(0.0),
            seed: derive_seed(seed, &p.id),
            ..self.cfg.rl.train.clone()
        };
        let t = self.cfg.rl.temperature;
        let space = ActionSpace::CandidateSet;
        let (learner, policy) = match p.group {
            Group::Bc => (
                Learner::Bc,
                bc_train(data, &cfg, space, t).map_err(|e| f(format!("{}: {e}", p.id)))?,
            ),
            _ => (
                Learner::Cql,
                QPolicy::new(
                    cql_train(data, &cfg, space).map_err(|e| f(format!("{}: {e}", p.id)))?,
                    t,
                ),
            ),
        };
        Ok(PolicyArtifact::new(
            p.id.clone(),
            self.cfg.scheme.kind,
            learner,
            policy,
        ))
    }

    pub fn train_policy_stage(&self) -> Result<Manifest, PipelineError> {
        let mut m = self.manifest(TRAIN_POLICY);
        m.input(&self.split_path())?;
        let split: Split = read_json(&self.split_path())?;
        let mut data: BTreeMap<RewardMode, Vec<AbstractTrajectory>> = BTreeMap::new();
        for mode in [RewardMode::Irl, RewardMode::Sparse] {
            let p = self.relabeled_path(mode);
            m.input(&p)?;
            let all: Vec<AbstractTrajectory> = read_jsonl(&p)?;
            data.insert(mode, split.train.iter().map(|&i| all[i].clone()).collect());
        }
        let grid = self.grid();
        let seed = self.seed(TRAIN_POLICY);
        let trained: Vec<PolicyArtifact> = grid
            .par_iter()
            .map(|p| {
                let mode = if p.group == Group::RlSparse {
                    RewardMode::Sparse
                } else {
                    RewardMode::Irl
                };
                self.train_point(p, &data[&mode], seed)
            })
            .collect::<Result<_, _>>()?;
        std::fs::create_dir_all(self.dir(TRAIN_POLICY))
            .map_err(|e| PipelineError::stage(TRAIN_POLICY, e))?;
        for a in &trained {
            let p = self.policy_path(&a.id);
            a.save(&p)
                .map_err(|e| PipelineError::stage(TRAIN_POLICY, e))?;
            m.artifact(&p)?;
        }
        write_json(&self.grid_path(), &grid)?;
        m.artifact(&self.grid_path())?;
        info!("trained {} policies", trained.len());
        m.write(&self.dir(TRAIN_POLICY))
    }

    fn load_policy(
        &self,
        id: &str,
        m: &mut ManifestBuilder<'_>,
    ) -> Result<PolicyArtifact, PipelineError> {
        let p = self.policy_path(id);
        m.input(&p)?;
        PolicyArtifact::load(&p).map_err(|e| PipelineError::stage(RANK, e))
    }

    fn eval_split(
        &self,
        m: &mut ManifestBuilder<'_>,
    ) -> Result<Vec<AbstractTrajectory>, PipelineError> {
        let p = self.relabeled_path(RewardMode::Irl);
        m.input(&p)?;
        m.input(&self.split_path())?;
        let all: Vec<AbstractTrajectory> = read_jsonl(&p)?;
        let split: Split = read_json(&self.split_path())?;
        Ok(split.eval.iter().map(|&i| all[i].clone()).collect())
    }

    fn fqe_score(
        &self,
        policy: &QPolicy,
        id: &str,
        eval: &[AbstractTrajectory],
        seed: u64,
    ) -> Result<f64, PipelineError> {
        let cfg = TrainConfig {
            seed: derive_seed(seed, id),
            ..self.cfg.rl.train.clone()
        };
        fqe(policy, id, eval, &cfg)
            .map(|e| e.initial_value)
            .map_err(|e| PipelineError::stage(RANK, format!("{id}: {e}")))
    }

    /// Scores every grid policy by FQE initial value on the held-out split
    /// (rewards from the learned reward net) and reports the top `k`.
    pub fn rank_stage(&self) -> Result<Manifest, PipelineError> {
        let mut m = self.manifest(RANK);
        m.input(&self.grid_path())?;
        let grid: Vec<GridPoint> = read_json(&self.grid_path())?;
        let eval = self.eval_split(&mut m)?;
        let policies: Vec<PolicyArtifact> = grid
            .iter()
            .map(|p| self.load_policy(&p.id, &mut m))
            .collect::<Result<_, _>>()?;
        let seed = self.seed(RANK);
        let scored: Vec<(String, f64)> = policies
            .par_iter()
            .map(|a| Ok((a.id.clone(), self.fqe_score(&a.policy, &a.id, &eval, seed)?)))
            .collect::<Result<_, PipelineError>>()?;
        let k = self.cfg.ope.k;
        let ranked = rank_scores(scored, grid.len()).map_err(|e| PipelineError::stage(RANK, e))?;
        let group_of: BTreeMap<&str, Group> =
            grid.iter().map(|p| (p.id.as_str(), p.group)).collect();
        let rows: Vec<RankRow> = ranked
            .into_iter()
            .map(|r| RankRow {
                group: group_of[r.id.as_str()],
                top_k: r.rank <= k,
                id: r.id,
                score: r.score,
                rank: r.rank,
            })
            .collect();
        let mut selection = BTreeMap::new();
        for r in &rows {
            selection
                .entry(r.group.label().to_string())
                .or_insert_with(|| r.id.clone());
        }
        let report = RankReport { k, rows, selection };
        write_json(&self.ranking_path(), &report)?;
        let csv_path = self.dir(RANK).join("ranking.csv");
        write_csv(&csv_path, &report.rows)?;
        m.artifact(&self.ranking_path())?;
        m.artifact(&csv_path)?;
        m.write(&self.dir(RANK))
    }

    fn arms(&self, ranking: &RankReport) -> Vec<Arm> {
        let mut arms = vec![Arm {
            name: BASELINE.into(),
            policy: None,
            strategies: Vec::new(),
        }];
        let mut push = |g: Group, s: Strategy| {
            if let Some(id) = ranking.selection.get(g.label()) {
                let tag = match s {
                    Strategy::I => "I",
                    Strategy::II => "II",
                    Strategy::III => "III",
                };
                arms.push(Arm {
                    name: format!("{}+{tag}", g.label()),
                    policy: Some(id.clone()),
                    strategies: vec![s],
                });
            }
        };
        push(Group::RlIrl, Strategy::I);
        push(Group::RlIrl, Strategy::II);
        push(Group::RlIrl, Strategy::III);
        push(Group::RlSparse, Strategy::III);
        push(Group::Bc, Strategy::III);
        arms
    }

    /// Closed-loop runs of the baseline and every CE arm on shared
    /// scenarios and trial seeds.
    pub fn simulate_stage(&self) -> Result<Manifest, PipelineError> {
        let f = fail(SIMULATE);
        let mut m = self.manifest(SIMULATE);
        m.input(&self.ranking_path())?;
        let ranking: RankReport = read_json(&self.ranking_path())?;
        m.input(&self.scheme_path())?;
        let scheme: SchemeSpec = read_json(&self.scheme_path())?;
        let hmm = if self.cfg.scheme.with_hmm {
            m.input(&self.hmm_path())?;
            Some(read_json::<HmmSelection>(&self.hmm_path())?.hmm)
        } else {
            None
        };
        let arms = self.arms(&ranking);
        let mut agents: Vec<Option<CeAgent>> = Vec::new();
        for a in &arms {
            agents.push(match &a.policy {
                None => None,
                Some(id) => Some(CeAgent {
                    policy: self.load_policy(id, &mut m)?.policy,
                    cfg: CeConfig {
                        strategies: a.strategies.iter().copied().collect(),
                        ..self.cfg.ce.clone()
                    },
                    scheme: scheme.clone(),
                    hmm: hmm.clone(),
                }),
            });
        }

        let sim = &self.cfg.sim;
        let seed = self.seed(SIMULATE);
        let scenarios: Vec<SimScenario> = (0..sim.n_scenarios)
            .map(|j| generate_scenario(&sim.scenario, derive_indexed(seed, "scenario", j as u64)))
            .collect::<Result<_, _>>()
            .map_err(|e| f(e.to_string()))?;
        let n_trials = self.cfg.eval.n_trials;
        let jobs: Vec<(usize, usize, usize)> = (0..arms.len())
            .flat_map(|a| {
                (0..sim.n_scenarios).flat_map(move |j| (0..n_trials).map(move |t| (a, j, t)))
            })
            .collect();
        let runs: Vec<(TrialRow, RawTrajectory)> = jobs
            .par_iter()
            .map(|&(a, j, t)| {
                let s = derive_indexed(seed, "trial", (j * n_trials + t) as u64);
                let res = run_episode(&scenarios[j], agents[a].as_ref(), &sim.episode, s);
                let mut traj = res.trajectory;
                traj.trajectory_id = format!("{}/{}", arms[a].name, traj.trajectory_id);
                let row = TrialRow {
                    arm: arms[a].name.clone(),
                    scenario: j,
                    scenario_id: scenarios[j].scenario_id.clone(),
                    trial: t,
                    seed: s,
                    rce: res.scores.rce_identification,
                    fpc: res.scores.fpc_accuracy,
                    turns_used: res.turns_used,
                    entities_explored: res.entities_explored,
                };
                (row, traj)
            })
            .collect();
        let (rows, trajs): (Vec<TrialRow>, Vec<RawTrajectory>) = runs.into_iter().unzip();
        let dir = self.dir(SIMULATE);
        std::fs::create_dir_all(&dir).map_err(|e| f(e.to_string()))?;
        write_jsonl(&self.results_path(), &rows)?;
        write_csv(&dir.join("results.csv"), &rows)?;
        save_corpus(&trajs, dir.join("trajectories.jsonl")).map_err(|e| f(e.to_string()))?;
        write_json(&dir.join("arms.json"), &arms)?;
        for name in [
            "results.jsonl",
            "results.csv",
            "trajectories.jsonl",
            "arms.json",
        ] {
            m.artifact(&dir.join(name))?;
        }
        m.write(&dir)
    }

    pub fn evaluate_stage(&self) -> Result<Manifest, PipelineError> {
        let f = fail(EVALUATE);
        let mut m = self.manifest(EVALUATE);
        m.input(&self.results_path())?;
        let rows: Vec<TrialRow> = read_jsonl(&self.results_path())?;
        let arms_path = self.dir(SIMULATE).join("arms.json");
        m.input(&arms_path)?;
        let arms: Vec<Arm> = read_json(&arms_path)?;
        let n_scn = rows.iter().map(|r| r.scenario + 1).max().unwrap_or(0);
        let mut tables: Vec<Vec<Vec<TrialRecord>>> = vec![vec![Vec::new(); n_scn]; arms.len()];
        let index: BTreeMap<&str, usize> = arms
            .iter()
            .enumerate()
            .map(|(i, a)| (a.name.as_str(), i))
            .collect();
        let mut explored = vec![(0.0, 0.0, 0usize); arms.len()];
        for r in &rows {
            let a = *index
                .get(r.arm.as_str())
                .ok_or_else(|| f(format!("unknown arm {}", r.arm)))?;
            tables[a][r.scenario].push(TrialRecord {
                success: r.rce == 100.0,
                f1: r.fpc / 100.0,
            });
            explored[a].0 += r.entities_explored as f64;
            explored[a].1 += r.turns_used as f64;
            explored[a].2 += 1;
        }
        let seed = self.seed(EVALUATE);
        let ev = &self.cfg.eval;
        // One bootstrap seed for all arms so replicates are paired.
        let pass: Vec<PassAt3> = tables
            .iter()
            .map(|t| pass_at_3_bootstrap(t, ev.n_boot, seed).map_err(|e| f(e.to_string())))
            .collect::<Result<_, _>>()?;
        let others: Vec<Vec<f64>> = pass[1..]
            .iter()
            .map(|p| p.scenario_recall.clone())
            .collect();
        let tests = paired_t_bonferroni(&pass[0].scenario_recall, &others, ev.alpha)
            .map_err(|e| f(e.to_string()))?;
        let scores: Vec<Vec<f64>> = pass.iter().map(|p| p.scenario_recall.clone()).collect();
        let ranks = rank_matrix(&scores, true);
        let cd = nemenyi_cd(&ranks, ev.alpha).map_err(|e| f(e.to_string()))?;
        let names: Vec<String> = arms.iter().map(|a| a.name.clone()).collect();

        let summaries: Vec<ArmSummary> = arms
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let t = (i > 0).then(|| tests[i - 1]);
                let (e, turns, n) = explored[i];
                ArmSummary {
                    arm: a.name.clone(),
                    recall_mean: pass[i].recall_mean,
                    recall_std: pass[i].recall_std,
                    f1_mean: pass[i].f1_mean,
                    f1_std: pass[i].f1_std,
                    avg_rank: cd.avg_ranks[i],
                    t_stat: t.map(|t| t.t_stat),
                    p_raw: t.map(|t| t.p_raw),
                    p_adjusted: t.map(|t| t.p_adjusted),
                    significant: t.map(|t| t.significant),
                    mean_entities_explored: e / n.max(1) as f64,
                    mean_turns: turns / n.max(1) as f64,
                }
            })
            .collect();
        let report = EvalReport {
            arms: summaries,
            pass_at_3: names.iter().cloned().zip(pass).collect(),
            t_tests: names[1..].iter().cloned().zip(tests).collect(),
            cd: cd.cd,
            groups: cd
                .groups
                .iter()
                .map(|g| g.iter().map(|&i| names[i].clone()).collect())
                .collect(),
        };
        let dir = self.dir(EVALUATE);
        write_json(&self.report_path(), &report)?;
        write_csv(&dir.join("summary.csv"), &report.arms)?;
        write_bytes(&dir.join("cd.txt"), render_cd(&names, &cd).as_bytes())?;
        for name in ["report.json", "summary.csv", "cd.txt"] {
            m.artifact(&dir.join(name))?;
        }
        m.write(&dir)
    }

    /// Initial-value scores of RL-IRL and BC policies trained on growing
    /// prefixes of the training split.
    pub fn robustness_stage(&self) -> Result<Manifest, PipelineError> {
        let f = fail(ROBUSTNESS);
        let mut m = self.manifest(ROBUSTNESS);
        let (trajs, split) = self.load_abstract(&mut m)?;
        let eval = self.eval_split(&mut m)?;
        let counts = &self.cfg.eval.robustness_counts;
        if let Some(&n) = counts.iter().find(|&&n| n > split.train.len()) {
            return Err(f(format!(
                "{n} trajectories requested but the training split has {}",
                split.train.len()
            )));
        }
        let seed = self.seed(ROBUSTNESS);
        let irl = GridPoint {
            id: format!("{}-a{}", Group::RlIrl.label(), self.cfg.rl.train.alpha),
            group: Group::RlIrl,
            alpha: Some(self.cfg.rl.train.alpha),
        };
        let bc = GridPoint {
            id: Group::Bc.label().into(),
            group: Group::Bc,
            alpha: None,
        };
        let rows: Vec<RobustnessRow> = counts
            .par_iter()
            .map(|&n| {
                let s = derive_indexed(seed, "count", n as u64);
                let subset: Vec<AbstractTrajectory> =
                    split.train[..n].iter().map(|&i| trajs[i].clone()).collect();
                let (net, _) = self.fit_reward(&subset, derive_seed(s, "reward"))?;
                let relabeled = self.relabel_all(&subset, &net, RewardMode::Irl)?;
                let q = self.train_point(&irl, &relabeled, s)?;
                let b = self.train_point(&bc, &subset, s)?;
                Ok(RobustnessRow {
                    n_trajectories: n,
                    rl_irl: self.fqe_score(&q.policy, &q.id, &eval, s)?,
                    bc: self.fqe_score(&b.policy, &b.id, &eval, s)?,
                })
            })
            .collect::<Result<_, PipelineError>>()?;
        let rl_irl_range = range(rows.iter().map(|r| r.rl_irl));
        let bc_range = range(rows.iter().map(|r| r.bc));
        let report = RobustnessReport {
            rows,
            rl_irl_range,
            bc_range,
            rl_irl_more_stable: rl_irl_range < bc_range,
        };
        if !report.rl_irl_more_stable {
            warn!(
                "RL-IRL initial values vary more than BC's across corpus sizes ({rl_irl_range:.4} vs {bc_range:.4})"
            );
        }
        let dir = self.dir(ROBUSTNESS);
        write_json(&self.robustness_path(), &report)?;
        write_csv(&dir.join("robustness.csv"), &report.rows)?;
        m.artifact(&self.robustness_path())?;
        m.artifact(&dir.join("robustness.csv"))?;
        m.write(&dir)
    }

    /// Every stage in order, then a summary of CE arms against the baseline.
    pub fn reproduce(&self) -> Result<Summary, PipelineError> {
        if self.cfg.paths.corpus.is_none() {
            self.collect()?;
        }
        self.abstract_stage()?;
        self.train_reward_stage()?;
        self.relabel_stage()?;
        self.train_policy_stage()?;
        self.rank_stage()?;
        self.simulate_stage()?;
        self.evaluate_stage()?;
        let robust = !self.cfg.eval.robustness_counts.is_empty();
        if robust {
            self.robustness_stage()?;
        }

        let mut m = self.manifest(REPRODUCE);
        m.input(&self.report_path())?;
        m.input(&self.ranking_path())?;
        let summary = Summary {
            evaluation: read_json(&self.report_path())?,
            robustness: if robust {
                m.input(&self.robustness_path())?;
                Some(read_json(&self.robustness_path())?)
            } else {
                None
            },
            ranking: read_json(&self.ranking_path())?,
        };
        let dir = self.dir(REPRODUCE);
        write_json(&dir.join("summary.json"), &summary)?;
        write_csv(&dir.join("summary.csv"), &summary.evaluation.arms)?;
        m.artifact(&dir.join("summary.json"))?;
        m.artifact(&dir.join("summary.csv"))?;
        m.write(&dir)?;
        Ok(summary)
    }
}

enum GraphSource {
    Shared(TopologyGraph),
    PerScenario(BTreeMap<String, TopologyGraph>),
}

impl GraphSource {
    fn get(&self, scenario_id: &str) -> Option<&TopologyGraph> {
        match self {
            GraphSource::Shared(g) => Some(g),
            GraphSource::PerScenario(m) => m.get(scenario_id),
        }
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| PipelineError::stage("io", e))?;
    }
    let bytes = w.into_inner().map_err(|e| PipelineError::stage("io", e))?;
    write_bytes(path, &bytes)
}

//! Fault-propagation diagnosis simulator.
//!
//! A scenario is a directed dependency graph with an embedded propagation
//! chain `root -> ... -> symptom`. The scripted base agent keeps a single
//! exploration queue seeded with the symptom: each turn it pops an entity,
//! reads a noisy anomaly signal, records an assessment, and when the entity
//! looks anomalous pushes its unexplored neighbors (both directions) to the
//! front of the queue. Context engineering, when enabled, acts on the queue
//! right after each push, which is when the next turn's candidates are fixed.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::hmm::one_hot;
use crate::abstraction::{Abstractor, ActionRepr, Hmm, SchemeKind, SchemeSpec};
use crate::context::{intervene, CeConfig, Intervention, Strategy};
use crate::data::{Assessment, Assessments, Entity, JudgeScores, RawStep, RawTrajectory};
use crate::rl::QPolicy;
use crate::seed::{derive_seed, rng, Rng};
use crate::topology::TopologyGraph;

const ENTITY_TYPES: [&str; 5] = ["Service", "Pod", "Deployment", "Node", "Database"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("infeasible scenario config: {0}")]
    InfeasibleConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub n_nodes: usize,
    /// Probability of each extra edge between an unconnected node pair.
    pub edge_density: f64,
    pub chain_length: usize,
    /// Probability that an inspected entity's anomaly signal is flipped.
    pub evidence_noise: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_nodes: 24,
            edge_density: 0.08,
            chain_length: 4,
            evidence_noise: 0.1,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InfeasibleConfig(m));
        if self.chain_length < 2 {
            return bad(format!(
                "chain_length {} must be at least 2",
                self.chain_length
            ));
        }
        if self.n_nodes < self.chain_length {
            return bad(format!(
                "n_nodes {} is smaller than chain_length {}",
                self.n_nodes, self.chain_length
            ));
        }
        if !(0.0..=1.0).contains(&self.edge_density) {
            return bad(format!("edge_density {} outside [0, 1]", self.edge_density));
        }
        if !(0.0..1.0).contains(&self.evidence_noise) {
            return bad(format!(
                "evidence_noise {} outside [0, 1)",
                self.evidence_noise
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub scenario_id: String,
    pub graph: TopologyGraph,
    pub root_cause: Entity,
    /// Propagation path from the root cause to the symptom.
    pub chain: Vec<Entity>,
    pub symptom: Entity,
    pub evidence_noise: f64,
    pub seed: u64,
}

pub fn generate_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<SimScenario, SimError> {
    cfg.validate()?;
    let mut r = rng(derive_seed(seed, "scenario"));
    let n = cfg.n_nodes;
    let nodes: Vec<Entity> = (0..n)
        .map(|i| {
            let etype = ENTITY_TYPES[r.random_range(0..ENTITY_TYPES.len())];
            Entity::new(format!("{}-{i:02}", etype.to_lowercase()), etype)
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let chain_idx = order[..cfg.chain_length].to_vec();

    let mut edges: Vec<[usize; 2]> = chain_idx.windows(2).map(|w| [w[0], w[1]]).collect();
    let mut linked = vec![vec![false; n]; n];
    for &[u, v] in &edges {
        linked[u][v] = true;
        linked[v][u] = true;
    }
    // Attach the remaining nodes as a random tree so the graph is weakly
    // connected.
    for k in cfg.chain_length..n {
        let j = order[r.random_range(0..k)];
        let v = order[k];
        let e = if r.random::<bool>() { [v, j] } else { [j, v] };
        edges.push(e);
        linked[v][j] = true;
        linked[j][v] = true;
    }
    for u in 0..n {
        for v in 0..n {
            if u != v && r.random::<f64>() < cfg.edge_density && !linked[u][v] {
                edges.push([u, v]);
                linked[u][v] = true;
                linked[v][u] = true;
            }
        }
    }
    let graph = TopologyGraph::new(nodes.clone(), edges).expect("generated graph is valid");
    let chain: Vec<Entity> = chain_idx.iter().map(|&i| nodes[i].clone()).collect();
    Ok(SimScenario {
        scenario_id: format!("scenario-{seed}"),
        graph,
        root_cause: chain[0].clone(),
        symptom: chain[cfg.chain_length - 1].clone(),
        chain,
        evidence_noise: cfg.evidence_noise,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub max_turns: usize,
    /// Probability that a pushed batch is randomly ordered instead of by
    /// the heuristic.
    pub epsilon: f64,
    /// Probability that Strategy I suggestions override the heuristic.
    pub suggestion_uptake: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_turns: 12,
            epsilon: 0.3,
            suggestion_uptake: 0.8,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.max_turns == 0 {
            return Err(SimError::InfeasibleConfig(
                "max_turns must be at least 1".into(),
            ));
        }
        for (name, p) in [
            ("epsilon", self.epsilon),
            ("suggestion_uptake", self.suggestion_uptake),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InfeasibleConfig(format!(
                    "{name} {p} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Policy-driven intervention attached to an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeAgent {
    pub policy: QPolicy,
    pub cfg: CeConfig,
    /// Scheme the policy was trained on. Under `Topology` the scenario's own
    /// graph replaces the stored one.
    pub scheme: SchemeSpec,
    /// Present when the policy's states carry hidden-state indicators.
    pub hmm: Option<Hmm>,
}

/// Audit record of one intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeRecord {
    /// Turn whose candidate set the intervention shaped.
    pub turn: usize,
    pub intervention: Intervention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub trajectory: RawTrajectory,
    pub identified_root: Option<Entity>,
    pub turns_used: usize,
    pub entities_explored: usize,
    pub scores: JudgeScores,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ce_log: Vec<CeRecord>,
}

/// Encodes states and candidates for a CE agent within one scenario.
struct CeView<'a> {
    agent: &'a CeAgent,
    abstractor: Abstractor,
    /// HMM observations of the turns taken so far.
    obs: Vec<Vec<f64>>,
}

impl<'a> CeView<'a> {
    fn new(agent: &'a CeAgent, scn: &SimScenario) -> Option<Self> {
        let mut spec = agent.scheme.clone();
        if spec.kind == SchemeKind::Topology {
            spec.graph = Some(scn.graph.clone());
        }
        let abstractor = Abstractor::new(&spec).ok()?;
        Some(Self {
            agent,
            abstractor,
            obs: Vec::new(),
        })
    }

    /// Records the observation of a turn (state before it, chosen action).
    fn observe(
        &mut self,
        before: &Assessments,
        prev: Option<&Entity>,
        chosen: &Entity,
        symptom: &Entity,
    ) {
        if self.agent.hmm.is_none() {
            return;
        }
        let state = self.abstractor.encode_state(Some(before), symptom);
        let action = self
            .abstractor
            .encode_action(chosen, prev, symptom, Some(before));
        if let (Ok(mut s), Ok(ActionRepr::Features(f))) = (state, action) {
            s.extend(f);
            self.obs.push(s);
        }
    }

    fn intervene(
        &self,
        assessed: &Assessments,
        prev: &Entity,
        symptom: &Entity,
        candidates: &[Entity],
    ) -> Option<Intervention> {
        let a = &self.abstractor;
        let mut state = a.encode_state(Some(assessed), symptom).ok()?;
        if let Some(h) = &self.agent.hmm {
            state.extend(one_hot(h.predict_next_state(&self.obs).ok()?, h.n_states));
        }
        let cands = candidates
            .iter()
            .map(|c| {
                a.encode_action(c, Some(prev), symptom, Some(assessed))
                    .map(|r| (c.clone(), r))
            })
            .collect::<Result<Vec<_>, _>>()
            .ok()?;
        intervene(&self.agent.policy, &state, &cands, &self.agent.cfg).ok()
    }
}

/// Set F1 between the entities judged primary-or-cascading and the chain.
pub fn chain_f1(predicted: &BTreeSet<&Entity>, chain: &[Entity]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let truth: BTreeSet<&Entity> = chain.iter().collect();
    let hit = predicted.intersection(&truth).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let precision = hit / predicted.len() as f64;
    let recall = hit / truth.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Ground-truth scores of an episode outcome.
pub fn judge(
    assessed: &Assessments,
    identified_root: Option<&Entity>,
    scn: &SimScenario,
) -> JudgeScores {
    let predicted: BTreeSet<&Entity> = assessed
        .iter()
        .filter(|(_, l)| l.is_failure())
        .map(|(e, _)| e)
        .collect();
    JudgeScores {
        fpc_accuracy: 100.0 * chain_f1(&predicted, &scn.chain),
        rce_identification: if identified_root == Some(&scn.root_cause) {
            100.0
        } else {
            0.0
        },
    }
}

/// Heuristic priority: anomalous-neighbor count descending, then suggested
/// first, then name.
fn base_order(
    batch: &mut [usize],
    scn: &SimScenario,
    assessed: &Assessments,
    suggested: &[Entity],
    epsilon: f64,
    r: &mut Rng,
) {
    let g = &scn.graph;
    let score = |i: usize| {
        g.neighbors(i)
            .into_iter()
            .filter(|&j| assessed.get(&g.nodes()[j]).is_some_and(|l| l.is_failure()))
            .count()
    };
    let randomize = r.random::<f64>() < epsilon;
    if randomize {
        batch.sort_unstable();
        batch.shuffle(r);
        return;
    }
    batch.sort_by(|&a, &b| {
        score(b)
            .cmp(&score(a))
            .then_with(|| {
                let (sa, sb) = (
                    suggested.contains(&g.nodes()[a]),
                    suggested.contains(&g.nodes()[b]),
                );
                sb.cmp(&sa)
            })
            .then_with(|| g.nodes()[a].cmp(&g.nodes()[b]))
    });
}

/// Simulates one diagnosis episode. `(scn, ce, cfg, seed)` determine the
/// result; evidence flips depend only on `seed`, so runs that differ only in
/// `ce` see the same evidence.
pub fn run_episode(
    scn: &SimScenario,
    ce: Option<&CeAgent>,
    cfg: &EpisodeConfig,
    seed: u64,
) -> EpisodeResult {
    let g = &scn.graph;
    let n = g.len();
    let mut evidence_rng = rng(derive_seed(seed, "evidence"));
    let flipped: Vec<bool> = (0..n)
        .map(|_| evidence_rng.random::<f64>() < scn.evidence_noise)
        .collect();
    let on_chain: Vec<bool> = g.nodes().iter().map(|e| scn.chain.contains(e)).collect();
    let root = g.index_of(&scn.root_cause).expect("root in graph");
    let symptom = g.index_of(&scn.symptom).expect("symptom in graph");
    let mut r = rng(derive_seed(seed, "agent"));
    let mut view = ce.and_then(|a| CeView::new(a, scn));

    let mut queue: VecDeque<usize> = VecDeque::from([symptom]);
    let mut explored = vec![false; n];
    let mut assessed = Assessments::new();
    let mut steps = Vec::new();
    let mut ce_log = Vec::new();
    let mut primary_turns = 0;
    let mut prev: Option<usize> = None;

    for turn in 0..cfg.max_turns.max(1) {
        let Some(chosen) = queue.pop_front() else {
            break;
        };
        let candidates: Vec<Entity> = std::iter::once(chosen)
            .chain(queue.iter().copied())
            .map(|i| g.nodes()[i].clone())
            .collect();
        if let Some(v) = view.as_mut() {
            let prev_e = prev.map(|p| g.nodes()[p].clone());
            v.observe(&assessed, prev_e.as_ref(), &g.nodes()[chosen], &scn.symptom);
        }
        explored[chosen] = true;
        let anomalous = on_chain[chosen] != flipped[chosen];
        let label = match (anomalous, chosen == root) {
            (false, _) => Assessment::Normal,
            (true, true) => Assessment::Primary,
            (true, false) => Assessment::Cascading,
        };
        assessed.insert(g.nodes()[chosen].clone(), label);
        steps.push(RawStep {
            turn_index: turn as u32,
            chosen_entity: g.nodes()[chosen].clone(),
            candidate_entities: candidates,
            assessments: assessed.clone(),
            intermediate_reward: None,
        });
        prev = Some(chosen);

        if assessed.values().any(|l| *l == Assessment::Primary) {
            primary_turns += 1;
            if primary_turns >= 2 {
                break;
            }
        }

        let mut batch: Vec<usize> = if anomalous {
            g.neighbors(chosen)
                .into_iter()
                .filter(|&j| !explored[j] && !queue.contains(&j))
                .collect()
        } else {
            Vec::new()
        };
        let pending: Vec<Entity> = batch
            .iter()
            .chain(queue.iter())
            .map(|&i| g.nodes()[i].clone())
            .collect();
        let iv = match (&view, pending.is_empty()) {
            (Some(v), false) => v.intervene(&assessed, &g.nodes()[chosen], &scn.symptom, &pending),
            _ => None,
        };
        let strategies = ce.map(|a| &a.cfg);
        let on = |s: Strategy| iv.is_some() && strategies.is_some_and(|c| c.has(s));
        let suggested: &[Entity] = match (&iv, on(Strategy::I)) {
            (Some(iv), true) => &iv.suggestions,
            _ => &[],
        };
        base_order(&mut batch, scn, &assessed, suggested, cfg.epsilon, &mut r);
        if on(Strategy::II) {
            let iv = iv.as_ref().unwrap();
            batch.retain(|&i| iv.keeps(&g.nodes()[i]));
        }
        for &i in batch.iter().rev() {
            queue.push_front(i);
        }
        if on(Strategy::I) && !suggested.is_empty() && r.random::<f64>() < cfg.suggestion_uptake {
            let mut front: Vec<usize> = Vec::new();
            for e in suggested {
                if let Some(pos) = queue.iter().position(|&i| &g.nodes()[i] == e) {
                    front.push(queue.remove(pos).unwrap());
                }
            }
            for &i in front.iter().rev() {
                queue.push_front(i);
            }
        }
        if on(Strategy::III) {
            let iv = iv.as_ref().unwrap();
            let mut ordered: VecDeque<usize> = iv
                .ordering
                .iter()
                .filter_map(|e| g.index_of(e))
                .filter(|i| queue.contains(i))
                .collect();
            for &i in &queue {
                if !ordered.contains(&i) {
                    ordered.push_back(i);
                }
            }
            queue = ordered;
        }
        if let Some(iv) = iv {
            ce_log.push(CeRecord {
                turn: turn + 1,
                intervention: iv,
            });
        }
    }

    let identified_root = steps
        .iter()
        .find(|s| s.assessments.get(&s.chosen_entity) == Some(&Assessment::Primary))
        .map(|s| s.chosen_entity.clone());
    let scores = judge(&assessed, identified_root.as_ref(), scn);
    let turns_used = steps.len();
    EpisodeResult {
        trajectory: RawTrajectory {
            trajectory_id: format!("{}-{seed:016x}", scn.scenario_id),
            scenario_id: scn.scenario_id.clone(),
            symptom_entity: scn.symptom.clone(),
            steps,
            scores,
            final_root_cause: identified_root.clone(),
        },
        identified_root,
        turns_used,
        entities_explored: explored.iter().filter(|x| **x).count(),
        scores,
        ce_log,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mlp;
    use crate::rl::{ActionSpace, QForm, QFunction};

    fn quiet() -> EpisodeConfig {
        EpisodeConfig {
            max_turns: 12,
            epsilon: 0.0,
            suggestion_uptake: 0.8,
        }
    }

    #[test]
    fn minimal_scenario_is_single_edge() {
        let cfg = ScenarioConfig {
            n_nodes: 2,
            chain_length: 2,
            edge_density: 1.0,
            evidence_noise: 0.0,
        };
        let scn = generate_scenario(&cfg, 3).unwrap();
        let root = scn.graph.index_of(&scn.root_cause).unwrap();
        let sym = scn.graph.index_of(&scn.symptom).unwrap();
        assert_eq!(scn.graph.edges(), &[[root, sym]]);
        let res = run_episode(&scn, None, &quiet(), 1);
        assert!(res.turns_used <= 2);
        assert_eq!(res.scores.rce_identification, 100.0);
        assert_eq!(res.scores.fpc_accuracy, 100.0);
        res.trajectory.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic_and_chains_are_paths() {
        let cfg = ScenarioConfig::default();
        let a = serde_json::to_string(&generate_scenario(&cfg, 7).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_scenario(&cfg, 7).unwrap()).unwrap();
        assert_eq!(a, b);
        for seed in 0..20 {
            let s = generate_scenario(&cfg, seed).unwrap();
            for w in s.chain.windows(2) {
                assert_eq!(s.graph.shortest_distance(&w[0], &w[1]).unwrap(), Some(1));
            }
        }
        let bad = ScenarioConfig {
            n_nodes: 3,
            chain_length: 4,
            ..cfg
        };
        assert!(matches!(
            generate_scenario(&bad, 0),
            Err(SimError::InfeasibleConfig(_))
        ));
    }

    #[test]
    fn one_turn_cannot_finish() {
        let cfg = ScenarioConfig {
            evidence_noise: 0.0,
            ..ScenarioConfig::default()
        };
        let scn = generate_scenario(&cfg, 11).unwrap();
        let ep = EpisodeConfig {
            max_turns: 1,
            ..quiet()
        };
        let res = run_episode(&scn, None, &ep, 5);
        assert_eq!(res.identified_root, None);
        assert_eq!(res.scores.rce_identification, 0.0);
        assert_eq!(res.turns_used, 1);
    }

    #[test]
    fn episodes_are_deterministic_and_valid() {
        let scn = generate_scenario(&ScenarioConfig::default(), 2).unwrap();
        let ep = EpisodeConfig::default();
        for seed in 0..30 {
            let a = run_episode(&scn, None, &ep, seed);
            assert_eq!(a, run_episode(&scn, None, &ep, seed));
            a.trajectory.validate().unwrap();
            assert!(a.turns_used <= ep.max_turns);
        }
    }

    #[test]
    fn set_f1_example() {
        let e = |n: &str| Entity::new(n, "Pod");
        let chain = vec![e("a"), e("b"), e("c")];
        let (a, b, d) = (e("a"), e("b"), e("d"));
        let f = chain_f1(&BTreeSet::from([&a, &b, &d]), &chain);
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(chain_f1(&BTreeSet::new(), &chain), 0.0);
    }

    /// Name-scheme network scoring on-chain actions at `high`, others 0.
    fn chain_policy(scn: &SimScenario, high: f64) -> CeAgent {
        let vocab = scn.graph.nodes().to_vec();
        let n = vocab.len();
        let dims = vec![2 * n, n, n, 1];
        let mut params = Vec::new();
        // Layer 1: hidden j copies the action one-hot entry j.
        for j in 0..n {
            for i in 0..2 * n {
                params.push(if i == n + j { 1.0 } else { 0.0 });
            }
        }
        params.extend(vec![0.0; n]);
        // Layer 2: identity.
        for j in 0..n {
            for i in 0..n {
                params.push(if i == j { 1.0 } else { 0.0 });
            }
        }
        params.extend(vec![0.0; n]);
        for e in &vocab {
            params.push(if scn.chain.contains(e) { high } else { 0.0 });
        }
        params.push(0.0);
        let q = QFunction {
            form: QForm::Network(Mlp::from_parts(dims, params).unwrap()),
            gamma: 0.9,
            action_space: ActionSpace::CandidateSet,
            state_dim: n,
            action_dim: n,
        };
        CeAgent {
            policy: QPolicy::new(q, 1.0),
            cfg: CeConfig::default(),
            scheme: SchemeSpec::name(vocab),
            hmm: None,
        }
    }

    #[test]
    fn pruning_with_chain_policy_explores_less() {
        let cfg = ScenarioConfig {
            evidence_noise: 0.0,
            ..ScenarioConfig::default()
        };
        let (mut base_total, mut pruned_total) = (0, 0);
        for s in 0..10 {
            let scn = generate_scenario(&cfg, s).unwrap();
            let mut agent = chain_policy(&scn, 30.0);
            agent.cfg = CeConfig::with_strategies(&[Strategy::II]);
            for seed in 0..5 {
                let base = run_episode(&scn, None, &EpisodeConfig::default(), seed);
                let pruned = run_episode(&scn, Some(&agent), &EpisodeConfig::default(), seed);
                base_total += base.entities_explored;
                pruned_total += pruned.entities_explored;
                assert!(!pruned.ce_log.is_empty());
            }
        }
        assert!(pruned_total <= base_total, "{pruned_total} > {base_total}");
    }

    #[test]
    fn prioritizing_with_chain_policy_walks_the_chain() {
        let cfg = ScenarioConfig {
            evidence_noise: 0.0,
            ..ScenarioConfig::default()
        };
        let scn = generate_scenario(&cfg, 4).unwrap();
        let mut agent = chain_policy(&scn, 30.0);
        agent.cfg = CeConfig::with_strategies(&[Strategy::III]);
        let res = run_episode(&scn, Some(&agent), &EpisodeConfig::default(), 0);
        assert_eq!(res.scores.rce_identification, 100.0);
        assert_eq!(res.turns_used, cfg.chain_length + 1);
    }
}

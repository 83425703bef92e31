//! Maps raw trajectories onto the finite digital-twin MDP.
//!
//! Three encodings are supported:
//!
//! - `Name`: state is a vector over entity names holding the assessment code
//!   (primary 2, cascading 1, normal or unassessed 0); the action is the index
//!   of the explored entity.
//! - `NameType`: the same over `(name, etype)` pairs.
//! - `Topology`: relative distance features on the propagation graph, which
//!   carry over to scenarios with unseen entities.
//!
//! The state at turn `t` is built from the assessments recorded after turn
//! `t - 1` (nothing is assessed before turn 0), so it is exactly what is
//! known when the turn-`t` entity is picked. Each abstract step also keeps
//! the encoded candidate set of its turn.

pub mod hmm;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Assessment, Assessments, Entity, JudgeScores, RawTrajectory};
use crate::topology::{DistanceMatrix, GraphError, TopologyGraph, HITS_MAX_ITER, HITS_TOL};

pub use hmm::{augment_with_hmm, fit_hmm, viterbi_decode, AugmentError, Hmm, HmmError, HmmFit};

/// Number of distance features describing an action under `Topology`.
pub const TOPOLOGY_ACTION_FEATURES: usize = 4;
/// Number of distance features describing a state under `Topology`.
pub const TOPOLOGY_STATE_FEATURES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Name,
    NameType,
    Topology,
}

impl SchemeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemeKind::Name => "name",
            SchemeKind::NameType => "name_type",
            SchemeKind::Topology => "topology",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionRepr {
    /// Index into the scheme vocabulary; one-hot when fed to a network.
    Index(usize),
    Features(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractStep {
    pub state: Vec<f64>,
    pub action: ActionRepr,
    pub reward: f64,
    /// Encoded candidate set of this turn (contains `action`).
    #[serde(default)]
    pub candidates: Vec<ActionRepr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractTrajectory {
    pub trajectory_id: String,
    pub scenario_id: String,
    pub scheme: SchemeKind,
    /// Vocabulary size (index actions) or feature length (feature actions).
    pub action_dim: usize,
    /// Number of hidden-state indicator entries appended to each state.
    #[serde(default)]
    pub hmm_states: usize,
    pub scores: JudgeScores,
    pub steps: Vec<AbstractStep>,
}

impl AbstractTrajectory {
    pub fn state_dim(&self) -> usize {
        self.steps.first().map_or(0, |s| s.state.len())
    }

    /// Width of the network input `state ++ action`.
    pub fn input_dim(&self) -> usize {
        self.state_dim() + self.action_dim
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn has_candidates(&self) -> bool {
        self.steps.iter().all(|s| !s.candidates.is_empty())
    }
}

/// Concatenates a state with an action encoding into a network input.
pub fn encode_input(state: &[f64], action: &ActionRepr, action_dim: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(state.len() + action_dim);
    x.extend_from_slice(state);
    match action {
        ActionRepr::Index(i) => {
            let start = x.len();
            x.resize(start + action_dim, 0.0);
            x[start + i] = 1.0;
        }
        ActionRepr::Features(f) => x.extend_from_slice(f),
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSpec {
    pub kind: SchemeKind,
    #[serde(default)]
    pub with_hubs: bool,
    #[serde(default)]
    pub with_hmm: bool,
    /// Entity list for `Name` (matched by name) and `NameType`.
    #[serde(default)]
    pub vocabulary: Vec<Entity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<TopologyGraph>,
    /// Distance used for anything unreachable; defaults to diameter + 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unreachable_sentinel: Option<f64>,
}

impl SchemeSpec {
    pub fn name(vocabulary: Vec<Entity>) -> Self {
        Self {
            kind: SchemeKind::Name,
            with_hubs: false,
            with_hmm: false,
            vocabulary,
            graph: None,
            unreachable_sentinel: None,
        }
    }

    pub fn name_type(vocabulary: Vec<Entity>) -> Self {
        Self {
            kind: SchemeKind::NameType,
            ..Self::name(vocabulary)
        }
    }

    pub fn topology(graph: TopologyGraph) -> Self {
        Self {
            kind: SchemeKind::Topology,
            with_hubs: false,
            with_hmm: false,
            vocabulary: Vec::new(),
            graph: Some(graph),
            unreachable_sentinel: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AbstractionError {
    #[error("entity {0} is not in the scheme vocabulary")]
    EntityNotInVocabulary(Entity),
    #[error("entity {0} is not in the topology graph")]
    EntityNotInGraph(Entity),
    #[error("invalid scheme: {0}")]
    InvalidScheme(String),
    #[error("trajectory scheme {found:?} cannot be used here (expected {expected:?})")]
    SchemeMismatch {
        expected: SchemeKind,
        found: SchemeKind,
    },
    #[error("graph error: {0}")]
    Graph(#[from] GraphError),
}

/// Builds the vocabulary of a corpus: every referenced entity, sorted and
/// deduplicated (by name alone for `Name`).
pub fn vocabulary_from<'a>(
    kind: SchemeKind,
    trajs: impl IntoIterator<Item = &'a RawTrajectory>,
) -> Vec<Entity> {
    let mut all: Vec<Entity> = trajs
        .into_iter()
        .flat_map(|t| t.entities().cloned())
        .collect();
    all.sort();
    match kind {
        SchemeKind::Name => all.dedup_by(|a, b| a.name == b.name),
        _ => all.dedup(),
    }
    all
}

struct TopologyContext {
    graph: TopologyGraph,
    dist: DistanceMatrix,
    hubs: Option<Vec<f64>>,
    sentinel: f64,
}

/// A validated scheme ready to encode states and actions.
pub struct Abstractor {
    kind: SchemeKind,
    vocab: HashMap<(String, Option<String>), usize>,
    vocab_len: usize,
    topo: Option<TopologyContext>,
}

impl Abstractor {
    pub fn new(spec: &SchemeSpec) -> Result<Self, AbstractionError> {
        if spec.kind != SchemeKind::Topology && (spec.with_hubs || spec.with_hmm) {
            return Err(AbstractionError::InvalidScheme(
                "with_hubs/with_hmm require the topology scheme".into(),
            ));
        }
        let mut vocab = HashMap::new();
        if spec.kind != SchemeKind::Topology {
            if spec.vocabulary.is_empty() {
                return Err(AbstractionError::InvalidScheme("empty vocabulary".into()));
            }
            for (i, e) in spec.vocabulary.iter().enumerate() {
                if vocab.insert(Self::key_for(spec.kind, e), i).is_some() {
                    return Err(AbstractionError::InvalidScheme(format!(
                        "duplicate vocabulary entry {e}"
                    )));
                }
            }
        }
        let topo = match spec.kind {
            SchemeKind::Topology => {
                let graph = spec.graph.clone().ok_or_else(|| {
                    AbstractionError::InvalidScheme("topology scheme needs a graph".into())
                })?;
                let dist = graph.distance_matrix();
                let diameter = f64::from(dist.diameter());
                let sentinel = spec.unreachable_sentinel.unwrap_or(diameter + 1.0);
                if !(sentinel > diameter) {
                    return Err(AbstractionError::InvalidScheme(format!(
                        "unreachable_sentinel {sentinel} must exceed the graph diameter {diameter}"
                    )));
                }
                let hubs = if spec.with_hubs {
                    Some(graph.hubs_scores(HITS_MAX_ITER, HITS_TOL)?)
                } else {
                    None
                };
                Some(TopologyContext {
                    graph,
                    dist,
                    hubs,
                    sentinel,
                })
            }
            _ => None,
        };
        Ok(Self {
            kind: spec.kind,
            vocab_len: spec.vocabulary.len(),
            vocab,
            topo,
        })
    }

    fn key_for(kind: SchemeKind, e: &Entity) -> (String, Option<String>) {
        match kind {
            SchemeKind::Name => (e.name.clone(), None),
            _ => (e.name.clone(), Some(e.etype.clone())),
        }
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn action_dim(&self) -> usize {
        match &self.topo {
            Some(t) => TOPOLOGY_ACTION_FEATURES + usize::from(t.hubs.is_some()),
            None => self.vocab_len,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.topo {
            Some(_) => TOPOLOGY_STATE_FEATURES,
            None => self.vocab_len,
        }
    }

    fn vocab_index(&self, e: &Entity) -> Result<usize, AbstractionError> {
        self.vocab
            .get(&Self::key_for(self.kind, e))
            .copied()
            .ok_or_else(|| AbstractionError::EntityNotInVocabulary(e.clone()))
    }

    fn node(&self, e: &Entity) -> Result<usize, AbstractionError> {
        self.topo
            .as_ref()
            .and_then(|t| t.graph.index_of(e))
            .ok_or_else(|| AbstractionError::EntityNotInGraph(e.clone()))
    }

    fn check(&self, e: &Entity) -> Result<(), AbstractionError> {
        match self.topo {
            Some(_) => self.node(e).map(|_| ()),
            None => self.vocab_index(e).map(|_| ()),
        }
    }

    /// Minimum distance from `from` to any entity with `label`, or `None`.
    fn min_to_label(
        &self,
        t: &TopologyContext,
        from: usize,
        assessments: &Assessments,
        label: Assessment,
    ) -> Option<u32> {
        assessments
            .iter()
            .filter(|(_, l)| **l == label)
            .filter_map(|(e, _)| t.graph.index_of(e))
            .filter_map(|j| t.dist.get(from, j))
            .min()
    }

    /// Abstract state given the assessments currently in force.
    pub fn encode_state(
        &self,
        assessments: Option<&Assessments>,
        symptom: &Entity,
    ) -> Result<Vec<f64>, AbstractionError> {
        let empty = Assessments::new();
        let assessments = assessments.unwrap_or(&empty);
        match &self.topo {
            None => {
                let mut s = vec![0.0; self.vocab_len];
                for (e, l) in assessments {
                    let i = self.vocab_index(e)?;
                    // Several entities may share a name under `Name`.
                    s[i] = f64::max(s[i], l.code());
                }
                Ok(s)
            }
            Some(t) => {
                let sym = self.node(symptom)?;
                for e in assessments.keys() {
                    self.node(e)?;
                }
                let f = |d: Option<u32>| d.map_or(t.sentinel, f64::from);
                Ok(vec![
                    f(self.min_to_label(t, sym, assessments, Assessment::Primary)),
                    f(self.min_to_label(t, sym, assessments, Assessment::Cascading)),
                ])
            }
        }
    }

    /// Abstract action for exploring `target` after `previous`.
    pub fn encode_action(
        &self,
        target: &Entity,
        previous: Option<&Entity>,
        symptom: &Entity,
        assessments: Option<&Assessments>,
    ) -> Result<ActionRepr, AbstractionError> {
        let t = match &self.topo {
            None => return self.vocab_index(target).map(ActionRepr::Index),
            Some(t) => t,
        };
        let c = self.node(target)?;
        let sym = self.node(symptom)?;
        let prev = previous.map(|p| self.node(p)).transpose()?;
        let empty = Assessments::new();
        let assessments = assessments.unwrap_or(&empty);
        let f = |d: Option<u32>| d.map_or(t.sentinel, f64::from);
        let mut feats = vec![
            f(prev.and_then(|p| t.dist.get(c, p))),
            f(t.dist.get(c, sym)),
            f(self.min_to_label(t, c, assessments, Assessment::Primary)),
            f(self.min_to_label(t, c, assessments, Assessment::Cascading)),
        ];
        if let Some(h) = &t.hubs {
            feats.push(h[c]);
        }
        Ok(ActionRepr::Features(feats))
    }

    /// Converts a raw trajectory; rewards start at zero.
    pub fn abstract_trajectory(
        &self,
        raw: &RawTrajectory,
    ) -> Result<AbstractTrajectory, AbstractionError> {
        for e in raw.entities() {
            self.check(e)?;
        }
        let mut steps = Vec::with_capacity(raw.steps.len());
        for (t, step) in raw.steps.iter().enumerate() {
            let before = raw.assessments_before(t);
            let prev = t.checked_sub(1).map(|p| &raw.steps[p].chosen_entity);
            let state = self.encode_state(before, &raw.symptom_entity)?;
            let encode = |e: &Entity| self.encode_action(e, prev, &raw.symptom_entity, before);
            let action = encode(&step.chosen_entity)?;
            let candidates = step
                .candidate_entities
                .iter()
                .map(encode)
                .collect::<Result<Vec<_>, _>>()?;
            steps.push(AbstractStep {
                state,
                action,
                reward: 0.0,
                candidates,
            });
        }
        Ok(AbstractTrajectory {
            trajectory_id: raw.trajectory_id.clone(),
            scenario_id: raw.scenario_id.clone(),
            scheme: self.kind,
            action_dim: self.action_dim(),
            hmm_states: 0,
            scores: raw.scores,
            steps,
        })
    }
}

/// One-shot convenience: validate `spec` and abstract `raw`.
pub fn abstract_trajectory(
    raw: &RawTrajectory,
    spec: &SchemeSpec,
) -> Result<AbstractTrajectory, AbstractionError> {
    Abstractor::new(spec)?.abstract_trajectory(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{RawStep, RawTrajectory};

    fn e(n: &str) -> Entity {
        Entity::new(n, "Service")
    }

    fn traj(steps: Vec<(Entity, Vec<Entity>, Vec<(Entity, Assessment)>)>) -> RawTrajectory {
        let symptom = steps[0].0.clone();
        RawTrajectory {
            trajectory_id: "t".into(),
            scenario_id: "s".into(),
            symptom_entity: symptom,
            steps: steps
                .into_iter()
                .enumerate()
                .map(|(i, (c, cands, a))| RawStep {
                    turn_index: i as u32,
                    chosen_entity: c,
                    candidate_entities: cands,
                    assessments: a.into_iter().collect(),
                    intermediate_reward: None,
                })
                .collect(),
            scores: JudgeScores {
                fpc_accuracy: 50.0,
                rce_identification: 0.0,
            },
            final_root_cause: None,
        }
    }

    #[test]
    fn name_state_codes() {
        let raw = traj(vec![
            (
                e("A"),
                vec![e("A")],
                vec![
                    (e("A"), Assessment::Primary),
                    (e("B"), Assessment::Cascading),
                ],
            ),
            (e("C"), vec![e("C"), e("B")], vec![]),
        ]);
        let spec = SchemeSpec::name(vec![e("A"), e("B"), e("C")]);
        let at = abstract_trajectory(&raw, &spec).unwrap();
        assert_eq!(at.steps[0].state, vec![0.0, 0.0, 0.0]);
        assert_eq!(at.steps[1].state, vec![2.0, 1.0, 0.0]);
        assert_eq!(at.steps[1].action, ActionRepr::Index(2));
        assert_eq!(
            at.steps[1].candidates,
            vec![ActionRepr::Index(2), ActionRepr::Index(1)]
        );
        assert_eq!(at.action_dim, 3);
        assert!(at.steps.iter().all(|s| s.reward == 0.0));
    }

    #[test]
    fn name_scheme_merges_types_name_type_does_not() {
        let a_pod = Entity::new("A", "Pod");
        let raw = traj(vec![
            (
                e("A"),
                vec![e("A")],
                vec![(a_pod.clone(), Assessment::Cascading)],
            ),
            (e("A"), vec![e("A")], vec![]),
        ]);
        let name = abstract_trajectory(&raw, &SchemeSpec::name(vec![e("A")])).unwrap();
        assert_eq!(name.steps[1].state, vec![1.0]);
        let nt = abstract_trajectory(&raw, &SchemeSpec::name_type(vec![e("A"), a_pod])).unwrap();
        assert_eq!(nt.steps[1].state, vec![0.0, 1.0]);
        let missing = abstract_trajectory(&raw, &SchemeSpec::name_type(vec![e("A")]));
        assert_eq!(
            missing,
            Err(AbstractionError::EntityNotInVocabulary(Entity::new(
                "A", "Pod"
            )))
        );
    }

    #[test]
    fn topology_turn_zero_uses_sentinels() {
        let g = TopologyGraph::new(vec![e("A"), e("B"), e("C")], vec![[1, 0], [2, 1]]).unwrap();
        let raw = traj(vec![(e("A"), vec![e("A"), e("B")], vec![])]);
        let at = abstract_trajectory(&raw, &SchemeSpec::topology(g)).unwrap();
        let s = 3.0; // diameter 2 + 1
        assert_eq!(at.steps[0].action, ActionRepr::Features(vec![s, 0.0, s, s]));
        assert_eq!(at.steps[0].state, vec![s, s]);
        assert_eq!(
            at.steps[0].candidates[1],
            ActionRepr::Features(vec![s, 1.0, s, s])
        );
    }

    #[test]
    fn topology_rejects_unknown_entities_and_bad_sentinels() {
        let g = TopologyGraph::new(vec![e("A"), e("B")], vec![[1, 0]]).unwrap();
        let raw = traj(vec![(e("A"), vec![e("A"), e("Z")], vec![])]);
        assert_eq!(
            abstract_trajectory(&raw, &SchemeSpec::topology(g.clone())),
            Err(AbstractionError::EntityNotInGraph(e("Z")))
        );
        let mut spec = SchemeSpec::topology(g);
        spec.unreachable_sentinel = Some(1.0);
        assert!(matches!(
            Abstractor::new(&spec),
            Err(AbstractionError::InvalidScheme(_))
        ));
    }

    #[test]
    fn hubs_flag_only_for_topology() {
        let mut spec = SchemeSpec::name(vec![e("A")]);
        spec.with_hubs = true;
        assert!(matches!(
            Abstractor::new(&spec),
            Err(AbstractionError::InvalidScheme(_))
        ));
    }

    #[test]
    fn hubs_feature_appended() {
        let g = TopologyGraph::new(vec![e("A"), e("B")], vec![[1, 0]]).unwrap();
        let mut spec = SchemeSpec::topology(g);
        spec.with_hubs = true;
        let raw = traj(vec![(e("A"), vec![e("A"), e("B")], vec![])]);
        let at = abstract_trajectory(&raw, &spec).unwrap();
        assert_eq!(at.action_dim, 5);
        match &at.steps[0].candidates[1] {
            ActionRepr::Features(f) => assert!((f[4] - 1.0).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn encode_input_one_hot() {
        assert_eq!(
            encode_input(&[2.0, 1.0], &ActionRepr::Index(1), 3),
            vec![2.0, 1.0, 0.0, 1.0, 0.0]
        );
        assert_eq!(
            encode_input(&[2.0], &ActionRepr::Features(vec![5.0, 6.0]), 2),
            vec![2.0, 5.0, 6.0]
        );
    }

    #[test]
    fn vocabulary_collects_sorted_unique() {
        let raw = traj(vec![(
            e("B"),
            vec![e("B"), e("A")],
            vec![(Entity::new("A", "Pod"), Assessment::Normal)],
        )]);
        let v = vocabulary_from(SchemeKind::NameType, [&raw]);
        assert_eq!(v, vec![Entity::new("A", "Pod"), e("A"), e("B")]);
        let v = vocabulary_from(SchemeKind::Name, [&raw]);
        assert_eq!(v.len(), 2);
    }
}

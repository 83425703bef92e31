//! Policy-driven interventions on the agent's candidate handling:
//! suggesting entities in the prompt (I), pruning low-probability candidates
//! (II) and prioritizing by probability (III).

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::ActionRepr;
use crate::data::Entity;
use crate::rl::{policy_probs, QPolicy, RlError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Suggesting via prompts.
    I,
    /// Pruning explorations.
    II,
    /// Prioritizing explorations.
    III,
}

#[derive(Debug, Error)]
pub enum CeError {
    #[error("empty candidate list")]
    EmptyCandidates,
    #[error("invalid context-engineering config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Policy(#[from] RlError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CeConfig {
    pub strategies: BTreeSet<Strategy>,
    pub suggest_percentile: f64,
    pub prune_percentile: f64,
    pub temperature: f64,
}

impl Default for CeConfig {
    fn default() -> Self {
        Self {
            strategies: BTreeSet::from([Strategy::III]),
            suggest_percentile: 95.0,
            prune_percentile: 85.0,
            temperature: 1.0,
        }
    }
}

impl CeConfig {
    pub fn with_strategies(strategies: &[Strategy]) -> Self {
        Self {
            strategies: strategies.iter().copied().collect(),
            ..Self::default()
        }
    }

    pub fn has(&self, s: Strategy) -> bool {
        self.strategies.contains(&s)
    }

    pub fn validate(&self) -> Result<(), CeError> {
        let bad = |m: &str| Err(CeError::InvalidConfig(m.into()));
        if self.strategies.is_empty() {
            return bad("at least one strategy is required");
        }
        if !(self.suggest_percentile > 0.0 && self.suggest_percentile <= 100.0) {
            return bad("suggest_percentile must lie in (0, 100]");
        }
        if !(self.prune_percentile >= 0.0 && self.prune_percentile < 100.0) {
            return bad("prune_percentile must lie in [0, 100)");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        Ok(())
    }
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest value (at
/// least the first).
pub fn nearest_rank(values: &[f64], percentile: f64) -> f64 {
    assert!(!values.is_empty(), "nearest_rank of an empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub suggestions: Vec<Entity>,
    pub retained: Vec<Entity>,
    pub ordering: Vec<Entity>,
    /// `pi(a|s)` per candidate, in candidate order.
    pub probs: Vec<(Entity, f64)>,
}

impl Intervention {
    pub fn prob(&self, e: &Entity) -> Option<f64> {
        self.probs.iter().find(|(c, _)| c == e).map(|(_, p)| *p)
    }

    /// ReAct-style pruning: whether a single proposed action survives.
    pub fn keeps(&self, proposed: &Entity) -> bool {
        self.retained.contains(proposed)
    }

    /// ReAct-style prioritizing: the candidate to execute.
    pub fn first_choice(&self) -> &Entity {
        &self.ordering[0]
    }
}

/// Probability descending, then `(name, etype)` ascending.
fn by_priority(a: &(Entity, f64), b: &(Entity, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Applies the enabled strategies to one turn's candidates.
pub fn intervene(
    policy: &QPolicy,
    state: &[f64],
    candidates: &[(Entity, ActionRepr)],
    cfg: &CeConfig,
) -> Result<Intervention, CeError> {
    if candidates.is_empty() {
        return Err(CeError::EmptyCandidates);
    }
    let actions: Vec<ActionRepr> = candidates.iter().map(|(_, a)| a.clone()).collect();
    let scoring = QPolicy {
        q: policy.q.clone(),
        temperature: cfg.temperature,
    };
    let p = policy_probs(&scoring, state, &actions)?;
    Ok(intervene_with_probs(
        candidates.iter().map(|(e, _)| e.clone()).zip(p).collect(),
        cfg,
    ))
}

/// The strategy logic given candidate probabilities.
pub fn intervene_with_probs(probs: Vec<(Entity, f64)>, cfg: &CeConfig) -> Intervention {
    let values: Vec<f64> = probs.iter().map(|(_, p)| *p).collect();
    let mut ranked = probs.clone();
    ranked.sort_by(by_priority);

    let suggestions = if cfg.has(Strategy::I) {
        let t = nearest_rank(&values, cfg.suggest_percentile);
        ranked
            .iter()
            .filter(|(_, p)| *p >= t)
            .map(|(e, _)| e.clone())
            .collect()
    } else {
        Vec::new()
    };
    let retained: Vec<(Entity, f64)> = if cfg.has(Strategy::II) {
        let t = nearest_rank(&values, cfg.prune_percentile);
        let top = &ranked[0].0;
        probs
            .iter()
            .filter(|(e, p)| *p >= t || e == top)
            .cloned()
            .collect()
    } else {
        probs.clone()
    };
    let mut ordering = retained.clone();
    if cfg.has(Strategy::III) {
        ordering.sort_by(by_priority);
    }
    Intervention {
        suggestions,
        retained: retained.into_iter().map(|(e, _)| e).collect(),
        ordering: ordering.into_iter().map(|(e, _)| e).collect(),
        probs,
    }
}

/// Prompt fragment carrying the suggestions; empty when there are none.
pub fn render_suggestion_text(suggestions: &[Entity]) -> String {
    if suggestions.is_empty() {
        return String::new();
    }
    let list = suggestions
        .iter()
        .map(|e| format!("{} ({})", e.name, e.etype))
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        "The actions related to {list} are often relevant in this scenario, so lean toward \
         exploring them if they show up in the above observed evidence"
    )
}

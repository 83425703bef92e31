//! Trajectory data model and line-delimited corpus I/O.
//!
//! A corpus file holds one JSON object per line. Unknown fields are rejected
//! and every record is validated on load; the first invalid record aborts the
//! load with an error naming its (1-based) line number.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A topology entity, identified by its name and type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entity {
    pub name: String,
    pub etype: String,
}

impl Entity {
    pub fn new(name: impl Into<String>, etype: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            etype: etype.into(),
        }
    }
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.name, self.etype)
    }
}

/// The agent's failure judgment for one entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assessment {
    Primary,
    Cascading,
    Normal,
}

impl Assessment {
    /// Numeric state code: primary 2, cascading 1, normal 0.
    pub fn code(self) -> f64 {
        match self {
            Assessment::Primary => 2.0,
            Assessment::Cascading => 1.0,
            Assessment::Normal => 0.0,
        }
    }

    pub fn is_failure(self) -> bool {
        !matches!(self, Assessment::Normal)
    }
}

pub type Assessments = BTreeMap<Entity, Assessment>;

/// One turn of a raw trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawStep {
    pub turn_index: u32,
    pub chosen_entity: Entity,
    pub candidate_entities: Vec<Entity>,
    /// Cumulative judgments after this turn.
    #[serde(with = "assessment_list")]
    pub assessments: Assessments,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermediate_reward: Option<f64>,
}

/// Trajectory-level judge scores on the 0..=100 scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeScores {
    /// Fault propagation chain accuracy (F1-style), in [0, 100].
    pub fpc_accuracy: f64,
    /// Root cause entity identification, exactly 0 or 100.
    pub rce_identification: f64,
}

impl JudgeScores {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=100.0).contains(&self.fpc_accuracy) {
            return Err(format!(
                "fpc_accuracy {} outside [0, 100]",
                self.fpc_accuracy
            ));
        }
        if self.rce_identification != 0.0 && self.rce_identification != 100.0 {
            return Err(format!(
                "rce_identification {} must be 0 or 100",
                self.rce_identification
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTrajectory {
    pub trajectory_id: String,
    pub scenario_id: String,
    pub symptom_entity: Entity,
    pub steps: Vec<RawStep>,
    pub scores: JudgeScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_root_cause: Option<Entity>,
}

/// Why a single record failed validation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum InvalidTrajectory {
    #[error("trajectory has no steps")]
    EmptySteps,
    #[error("{0}")]
    ScoreOutOfRange(String),
    #[error("turn {turn}: chosen entity {entity} is not among the candidates")]
    ChosenEntityNotInCandidates { turn: u32, entity: Entity },
    #[error("turn indices must be 0,1,2,...; found {found} at position {position}")]
    NonMonotoneTurnIndex { position: usize, found: u32 },
}

impl RawTrajectory {
    pub fn validate(&self) -> Result<(), InvalidTrajectory> {
        if self.steps.is_empty() {
            return Err(InvalidTrajectory::EmptySteps);
        }
        self.scores
            .validate()
            .map_err(InvalidTrajectory::ScoreOutOfRange)?;
        for (position, step) in self.steps.iter().enumerate() {
            if step.turn_index as usize != position {
                return Err(InvalidTrajectory::NonMonotoneTurnIndex {
                    position,
                    found: step.turn_index,
                });
            }
            if !step.candidate_entities.contains(&step.chosen_entity) {
                return Err(InvalidTrajectory::ChosenEntityNotInCandidates {
                    turn: step.turn_index,
                    entity: step.chosen_entity.clone(),
                });
            }
        }
        Ok(())
    }

    /// Assessments in force before turn `t` is played (empty at t = 0).
    pub fn assessments_before(&self, t: usize) -> Option<&Assessments> {
        t.checked_sub(1).map(|p| &self.steps[p].assessments)
    }

    /// Every entity referenced anywhere in the trajectory.
    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        std::iter::once(&self.symptom_entity)
            .chain(self.final_root_cause.iter())
            .chain(self.steps.iter().flat_map(|s| {
                std::iter::once(&s.chosen_entity)
                    .chain(s.candidate_entities.iter())
                    .chain(s.assessments.keys())
            }))
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("line {line}: {message}")]
    ScoreOutOfRange { line: usize, message: String },
    #[error("line {line}: turn {turn}: chosen entity {entity} is not among the candidates")]
    ChosenEntityNotInCandidates {
        line: usize,
        turn: u32,
        entity: Entity,
    },
    #[error("line {line}: non-monotone turn index {found} at position {position}")]
    NonMonotoneTurnIndex {
        line: usize,
        position: usize,
        found: u32,
    },
    #[error("line {line}: trajectory has no steps")]
    EmptySteps { line: usize },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    fn at_line(line: usize, err: InvalidTrajectory) -> Self {
        match err {
            InvalidTrajectory::EmptySteps => CorpusError::EmptySteps { line },
            InvalidTrajectory::ScoreOutOfRange(message) => {
                CorpusError::ScoreOutOfRange { line, message }
            }
            InvalidTrajectory::ChosenEntityNotInCandidates { turn, entity } => {
                CorpusError::ChosenEntityNotInCandidates { line, turn, entity }
            }
            InvalidTrajectory::NonMonotoneTurnIndex { position, found } => {
                CorpusError::NonMonotoneTurnIndex {
                    line,
                    position,
                    found,
                }
            }
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::IoFailure {
        path: path.display().to_string(),
        source,
    }
}

/// Parses and validates one corpus line. `line` is 1-based.
pub fn parse_record(text: &str, line: usize) -> Result<RawTrajectory, CorpusError> {
    let traj: RawTrajectory =
        serde_json::from_str(text).map_err(|e| CorpusError::MalformedRecord {
            line,
            message: e.to_string(),
        })?;
    traj.validate().map_err(|e| CorpusError::at_line(line, e))?;
    Ok(traj)
}

/// Loads a line-delimited corpus. Blank lines are skipped.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<RawTrajectory>, CorpusError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, text) in reader.lines().enumerate() {
        let text = text.map_err(|e| io_err(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let traj = parse_record(&text, i + 1)?;
        if !seen.insert(traj.trajectory_id.clone()) {
            log::warn!(
                "{}: line {}: duplicate trajectory_id {:?}",
                path.display(),
                i + 1,
                traj.trajectory_id
            );
        }
        out.push(traj);
    }
    Ok(out)
}

pub fn save_corpus(trajs: &[RawTrajectory], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for t in trajs {
        let line = serde_json::to_string(t).expect("trajectory serializes");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Assessments serialize as a list of `{name, etype, label}` objects, since a
/// JSON object cannot be keyed by a structured entity.
mod assessment_list {
    use super::{Assessment, Assessments, Entity};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Item {
        name: String,
        etype: String,
        label: Assessment,
    }

    pub fn serialize<S: Serializer>(map: &Assessments, s: S) -> Result<S::Ok, S::Error> {
        let items: Vec<Item> = map
            .iter()
            .map(|(e, l)| Item {
                name: e.name.clone(),
                etype: e.etype.clone(),
                label: *l,
            })
            .collect();
        items.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Assessments, D::Error> {
        let items = Vec::<Item>::deserialize(d)?;
        let mut map = Assessments::new();
        for it in items {
            let key = Entity::new(it.name, it.etype);
            if map.insert(key.clone(), it.label).is_some() {
                return Err(serde::de::Error::custom(format!(
                    "entity {key} assessed twice"
                )));
            }
        }
        Ok(map)
    }
}

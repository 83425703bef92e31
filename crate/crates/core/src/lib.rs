//! Offline learning pipeline for steering multi-turn diagnosis agents.
//!
//! Raw agent trajectories are abstracted into a small finite MDP
//! ([`abstraction`]), rewards are recovered from judge-score rankings
//! ([`irl`]), policies are induced offline ([`rl`]) and ranked by fitted
//! Q-evaluation ([`ope`]). The selected policy then steers an agent through
//! suggestion, pruning and prioritization interventions ([`context`]),
//! exercised here against a fault-propagation simulator ([`sim`]) and
//! scored with the statistics in [`stats`].

pub mod abstraction;
pub mod context;
pub mod data;
pub mod irl;
pub mod nn;
pub mod ope;
pub mod rl;
pub mod seed;
pub mod sim;
pub mod stats;
pub mod topology;

pub use data::{Assessment, Entity, JudgeScores, RawStep, RawTrajectory};
pub use topology::TopologyGraph;

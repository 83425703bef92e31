//! Directed propagation graph: an edge `u -> v` means events propagate from
//! `u` to `v`.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Entity;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("duplicate node {0}")]
    DuplicateNode(Entity),
    #[error("edge index {index} out of range for {n} nodes")]
    EdgeOutOfRange { index: usize, n: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(Entity),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(Entity, Entity),
    #[error("unknown entity {0}")]
    UnknownEntity(Entity),
    #[error("graph has no edges")]
    EmptyGraphNoEdges,
}

/// On-disk form: nodes plus `[from, to]` index pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub nodes: Vec<Entity>,
    pub edges: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphFile", into = "GraphFile")]
pub struct TopologyGraph {
    nodes: Vec<Entity>,
    index: HashMap<Entity, usize>,
    out: Vec<Vec<usize>>,
    inc: Vec<Vec<usize>>,
    edges: Vec<[usize; 2]>,
}

impl TryFrom<GraphFile> for TopologyGraph {
    type Error = GraphError;

    fn try_from(f: GraphFile) -> Result<Self, GraphError> {
        TopologyGraph::new(f.nodes, f.edges)
    }
}

impl From<TopologyGraph> for GraphFile {
    fn from(g: TopologyGraph) -> Self {
        GraphFile {
            nodes: g.nodes,
            edges: g.edges,
        }
    }
}

impl TopologyGraph {
    pub fn new(nodes: Vec<Entity>, edges: Vec<[usize; 2]>) -> Result<Self, GraphError> {
        let n = nodes.len();
        let mut index = HashMap::with_capacity(n);
        for (i, e) in nodes.iter().enumerate() {
            if index.insert(e.clone(), i).is_some() {
                return Err(GraphError::DuplicateNode(e.clone()));
            }
        }
        let mut out = vec![Vec::new(); n];
        let mut inc = vec![Vec::new(); n];
        for &[u, v] in &edges {
            for idx in [u, v] {
                if idx >= n {
                    return Err(GraphError::EdgeOutOfRange { index: idx, n });
                }
            }
            if u == v {
                return Err(GraphError::SelfLoop(nodes[u].clone()));
            }
            if out[u].contains(&v) {
                return Err(GraphError::DuplicateEdge(
                    nodes[u].clone(),
                    nodes[v].clone(),
                ));
            }
            out[u].push(v);
            inc[v].push(u);
        }
        Ok(Self {
            nodes,
            index,
            out,
            inc,
            edges,
        })
    }

    pub fn nodes(&self) -> &[Entity] {
        &self.nodes
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, e: &Entity) -> Option<usize> {
        self.index.get(e).copied()
    }

    pub fn require(&self, e: &Entity) -> Result<usize, GraphError> {
        self.index_of(e)
            .ok_or_else(|| GraphError::UnknownEntity(e.clone()))
    }

    pub fn successors(&self, i: usize) -> &[usize] {
        &self.out[i]
    }

    pub fn predecessors(&self, i: usize) -> &[usize] {
        &self.inc[i]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.out[u].contains(&v)
    }

    /// Successors then predecessors, each in insertion order, without repeats.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let mut v = self.out[i].clone();
        for &p in &self.inc[i] {
            if !v.contains(&p) {
                v.push(p);
            }
        }
        v
    }

    /// BFS hop counts from `src` along edge direction.
    pub fn distances_from(&self, src: usize) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.len()];
        dist[src] = Some(0);
        let mut q = VecDeque::from([src]);
        while let Some(u) = q.pop_front() {
            let d = dist[u].unwrap() + 1;
            for &v in &self.out[u] {
                if dist[v].is_none() {
                    dist[v] = Some(d);
                    q.push_back(v);
                }
            }
        }
        dist
    }

    /// Length of a shortest directed path, `None` when unreachable.
    pub fn shortest_distance(&self, from: &Entity, to: &Entity) -> Result<Option<u32>, GraphError> {
        let (s, t) = (self.require(from)?, self.require(to)?);
        Ok(self.distances_from(s)[t])
    }

    pub fn distance_matrix(&self) -> DistanceMatrix {
        DistanceMatrix {
            rows: (0..self.len()).map(|s| self.distances_from(s)).collect(),
        }
    }

    /// Largest finite shortest-path length (0 for an edgeless graph).
    pub fn diameter(&self) -> u32 {
        self.distance_matrix().diameter()
    }

    /// HITS hub scores, unit Euclidean norm, by alternating power iteration
    /// from the uniform vector.
    pub fn hubs_scores(&self, max_iter: usize, tol: f64) -> Result<Vec<f64>, GraphError> {
        if self.edges.is_empty() {
            return Err(GraphError::EmptyGraphNoEdges);
        }
        let n = self.len();
        let mut hub = vec![1.0 / (n as f64).sqrt(); n];
        let mut auth = vec![0.0; n];
        for _ in 0..max_iter {
            for (v, a) in auth.iter_mut().enumerate() {
                *a = self.inc[v].iter().map(|&u| hub[u]).sum();
            }
            let mut next: Vec<f64> = (0..n)
                .map(|u| self.out[u].iter().map(|&v| auth[v]).sum())
                .collect();
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            next.iter_mut().for_each(|x| *x /= norm);
            let delta = next
                .iter()
                .zip(&hub)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            hub = next;
            if delta < tol {
                break;
            }
        }
        Ok(hub)
    }

    /// Hub scores keyed by entity.
    pub fn hubs_map(&self, max_iter: usize, tol: f64) -> Result<HashMap<Entity, f64>, GraphError> {
        let h = self.hubs_scores(max_iter, tol)?;
        Ok(self.nodes.iter().cloned().zip(h).collect())
    }
}

pub const HITS_MAX_ITER: usize = 100;
pub const HITS_TOL: f64 = 1e-10;

/// All-pairs hop counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: Vec<Vec<Option<u32>>>,
}

impl DistanceMatrix {
    pub fn get(&self, from: usize, to: usize) -> Option<u32> {
        self.rows[from][to]
    }

    pub fn diameter(&self) -> u32 {
        self.rows
            .iter()
            .flatten()
            .filter_map(|d| *d)
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ents(n: usize) -> Vec<Entity> {
        (0..n)
            .map(|i| Entity::new(format!("n{i}"), "Pod"))
            .collect()
    }

    #[test]
    fn zero_length_and_unreachable() {
        let g = TopologyGraph::new(ents(2), vec![]).unwrap();
        let (a, b) = (&g.nodes()[0].clone(), &g.nodes()[1].clone());
        assert_eq!(g.shortest_distance(a, a).unwrap(), Some(0));
        assert_eq!(g.shortest_distance(a, b).unwrap(), None);
        assert_eq!(
            g.shortest_distance(a, &Entity::new("x", "Pod")),
            Err(GraphError::UnknownEntity(Entity::new("x", "Pod")))
        );
    }

    #[test]
    fn direction_matters() {
        let g = TopologyGraph::new(ents(3), vec![[0, 1], [1, 2]]).unwrap();
        let n = g.nodes().to_vec();
        assert_eq!(g.shortest_distance(&n[0], &n[2]).unwrap(), Some(2));
        assert_eq!(g.shortest_distance(&n[2], &n[0]).unwrap(), None);
        assert_eq!(g.diameter(), 2);
    }

    #[test]
    fn construction_rejects_bad_graphs() {
        assert!(matches!(
            TopologyGraph::new(ents(2), vec![[0, 0]]),
            Err(GraphError::SelfLoop(_))
        ));
        assert!(matches!(
            TopologyGraph::new(ents(2), vec![[0, 1], [0, 1]]),
            Err(GraphError::DuplicateEdge(..))
        ));
        assert!(matches!(
            TopologyGraph::new(ents(2), vec![[0, 2]]),
            Err(GraphError::EdgeOutOfRange { index: 2, n: 2 })
        ));
        let mut dup = ents(2);
        dup[1] = dup[0].clone();
        assert!(matches!(
            TopologyGraph::new(dup, vec![]),
            Err(GraphError::DuplicateNode(_))
        ));
    }

    #[test]
    fn single_edge_hubs() {
        let g = TopologyGraph::new(ents(2), vec![[0, 1]]).unwrap();
        let h = g.hubs_scores(HITS_MAX_ITER, HITS_TOL).unwrap();
        assert!((h[0] - 1.0).abs() < 1e-12);
        assert_eq!(h[1], 0.0);
    }

    #[test]
    fn symmetric_sources_share_hub_score() {
        // 0 and 2 both point at {1, 3}; 1 -> 3 breaks other symmetries.
        let g = TopologyGraph::new(ents(4), vec![[0, 1], [0, 3], [2, 1], [2, 3], [1, 3]]).unwrap();
        let h = g.hubs_scores(1000, 1e-14).unwrap();
        assert!((h[0] - h[2]).abs() < 1e-12);
        let norm: f64 = h.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hubs_need_edges() {
        let g = TopologyGraph::new(ents(3), vec![]).unwrap();
        assert_eq!(g.hubs_scores(10, 1e-9), Err(GraphError::EmptyGraphNoEdges));
    }

    #[test]
    fn json_round_trip() {
        let g = TopologyGraph::new(ents(3), vec![[0, 1], [2, 1]]).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        assert!(s.starts_with("{\"nodes\":"));
        let back: TopologyGraph = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
        assert!(serde_json::from_str::<TopologyGraph>(
            r#"{"nodes":[{"name":"a","etype":"Pod"}],"edges":[[0,0]]}"#
        )
        .is_err());
    }
}

use std::collections::BTreeMap;

use super::Graph;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Induced subgraph on the BFS ball around `center`.
///
/// `nodes[0]` is the center; edges use local indices into `nodes`.
#[derive(Clone, Debug, PartialEq)]
pub struct EgoGraph {
    pub center: usize,
    pub nodes: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub features: Tensor,
}

impl EgoGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The ego-graph as a standalone graph with local ids (center = 0).
    pub fn to_graph(&self, domain: &str) -> Result<Graph> {
        Graph::new(
            self.nodes.len(),
            self.edges.iter().copied(),
            self.features.clone(),
            BTreeMap::new(),
            0,
            domain,
        )
    }

    /// Undirected neighbour lists over local indices.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj.iter_mut().for_each(|a| a.sort_unstable());
        adj
    }
}

/// BFS ball of radius `hops`. Nodes are listed center first, then layer by
/// layer with ascending ids inside each layer.
pub fn ego_graph(g: &Graph, u: usize, hops: usize) -> Result<EgoGraph> {
    if u >= g.node_count() {
        return Err(Error::Contract(format!(
            "node {u} outside 0..{}",
            g.node_count()
        )));
    }
    if hops == 0 {
        return Err(Error::Param("ego-graph radius must be at least 1".into()));
    }
    let mut seen = vec![false; g.node_count()];
    seen[u] = true;
    let mut nodes = vec![u];
    let mut frontier = vec![u];
    for _ in 0..hops {
        let mut next = Vec::new();
        for &w in &frontier {
            for &x in g.neighbors(w) {
                if !seen[x] {
                    seen[x] = true;
                    next.push(x);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        next.sort_unstable();
        nodes.extend_from_slice(&next);
        frontier = next;
    }
    let sub = g.induced(&nodes)?;
    Ok(EgoGraph {
        center: u,
        nodes,
        edges: sub.edges().to_vec(),
        features: sub.features().clone(),
    })
}

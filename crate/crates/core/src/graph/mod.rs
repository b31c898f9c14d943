//! Attributed undirected graphs and everything that produces or perturbs them.

mod ego;
mod io;
mod motif;
mod noise;

use std::collections::{BTreeMap, BTreeSet};

pub use ego::{ego_graph, EgoGraph};
pub use io::{load_dataset, save_dataset, DatasetMeta};
pub use motif::{
    motif_edges, synth_motif_dataset, Attachment, BackboneSpec, FeatureProfile, MotifKind, MotifSpec,
};
pub use noise::{inject_feature_noise, perturb_edges};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Simple undirected graph with node features, optional labels and a domain tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    features: Tensor,
    labels: BTreeMap<usize, usize>,
    class_count: usize,
    domain: String,
    text: Option<Tensor>,
}

impl Graph {
    /// Builds and validates a graph. Edges may be given in either
    /// orientation; they are stored as `(min, max)` in sorted order.
    pub fn new(
        node_count: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: Tensor,
        labels: BTreeMap<usize, usize>,
        class_count: usize,
        domain: impl Into<String>,
    ) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u == v {
                return Err(Error::Graph(format!("self-loop at node {u}")));
            }
            if u >= node_count || v >= node_count {
                return Err(Error::Graph(format!(
                    "edge ({u}, {v}) references a node outside 0..{node_count}"
                )));
            }
            if !set.insert((u.min(v), u.max(v))) {
                return Err(Error::Graph(format!("duplicate edge ({u}, {v})")));
            }
        }
        let g = Self::from_parts(node_count, set.into_iter().collect(), features, labels, class_count, domain.into());
        g.validate()?;
        Ok(g)
    }

    fn from_parts(
        node_count: usize,
        edges: Vec<(usize, usize)>,
        features: Tensor,
        labels: BTreeMap<usize, usize>,
        class_count: usize,
        domain: String,
    ) -> Self {
        let mut adjacency = vec![Vec::new(); node_count];
        for &(u, v) in &edges {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        adjacency.iter_mut().for_each(|a| a.sort_unstable());
        Graph {
            node_count,
            edges,
            adjacency,
            features,
            labels,
            class_count,
            domain,
            text: None,
        }
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        if self.features.rows() != self.node_count {
            return Err(Error::Graph(format!(
                "{} feature rows for {} nodes",
                self.features.rows(),
                self.node_count
            )));
        }
        if !self.features.is_finite() {
            return Err(Error::Graph("non-finite feature value".into()));
        }
        let mut prev = None;
        for &(u, v) in &self.edges {
            if u >= v || v >= self.node_count {
                return Err(Error::Graph(format!("malformed edge ({u}, {v})")));
            }
            if prev == Some((u, v)) {
                return Err(Error::Graph(format!("duplicate edge ({u}, {v})")));
            }
            prev = Some((u, v));
        }
        for (&node, &class) in &self.labels {
            if node >= self.node_count {
                return Err(Error::Graph(format!("label for missing node {node}")));
            }
            if class >= self.class_count {
                return Err(Error::Graph(format!(
                    "label {class} of node {node} outside 0..{}",
                    self.class_count
                )));
            }
        }
        if let Some(t) = &self.text {
            if t.rows() != self.node_count {
                return Err(Error::Graph(format!(
                    "{} text-embedding rows for {} nodes",
                    t.rows(),
                    self.node_count
                )));
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.adjacency[u]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.adjacency[u].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency[u].binary_search(&v).is_ok()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &BTreeMap<usize, usize> {
        &self.labels
    }

    pub fn label(&self, u: usize) -> Option<usize> {
        self.labels.get(&u).copied()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn text_embeddings(&self) -> Option<&Tensor> {
        self.text.as_ref()
    }

    pub fn with_text_embeddings(mut self, text: Tensor) -> Result<Self> {
        self.text = Some(text);
        self.validate()?;
        Ok(self)
    }

    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        let mut g = self.clone();
        g.features = features;
        g.validate()?;
        Ok(g)
    }

    pub fn with_edges(&self, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut g = Graph::new(
            self.node_count,
            edges,
            self.features.clone(),
            self.labels.clone(),
            self.class_count,
            self.domain.clone(),
        )?;
        g.text = self.text.clone();
        Ok(g)
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = domain.into();
        self
    }

    /// Nodes of each class, in ascending id order.
    pub fn nodes_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (&u, &c) in &self.labels {
            out[c].push(u);
        }
        out
    }

    /// Induced subgraph on `nodes` (in the given order), keeping no labels.
    pub fn induced(&self, nodes: &[usize]) -> Result<Graph> {
        let local: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let mut edges = Vec::new();
        for (i, &u) in nodes.iter().enumerate() {
            for &v in self.neighbors(u) {
                if let Some(&j) = local.get(&v) {
                    if i < j {
                        edges.push((i, j));
                    }
                }
            }
        }
        Graph::new(
            nodes.len(),
            edges,
            self.features.select_rows(nodes),
            BTreeMap::new(),
            self.class_count,
            self.domain.clone(),
        )
    }
}

/// Node of maximum degree; ties go to the smallest id.
pub fn max_degree_node(g: &Graph) -> Result<usize> {
    if g.node_count() == 0 {
        return Err(Error::Contract("max_degree_node on an empty graph".into()));
    }
    let mut best = 0;
    for u in 1..g.node_count() {
        if g.degree(u) > g.degree(best) {
            best = u;
        }
    }
    Ok(best)
}

//! Class-balanced few-shot episodes and label access.

use std::sync::Mutex;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::config::Task;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub task: Task,
    pub classes: usize,
    /// `support[c]` holds the `m` support ids of class `c`, ascending.
    pub support: Vec<Vec<usize>>,
    /// Every other labelled id, ascending.
    pub query: Vec<usize>,
    pub seed: u64,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    /// `(id, class)` pairs in class order.
    pub fn support_pairs(&self) -> Vec<(usize, usize)> {
        self.support
            .iter()
            .enumerate()
            .flat_map(|(c, ids)| ids.iter().map(move |&u| (u, c)))
            .collect()
    }
}

/// Draws `m` support samples per class uniformly; the rest of the labelled
/// samples form the query set. Graph-level tasks use the same ids, each
/// standing for the 2-hop ego-graph around it.
pub fn sample_episode(g: &Graph, task: Task, m: usize, seed: u64) -> Result<Episode> {
    if m == 0 {
        return Err(Error::Param("m must be at least 1".into()));
    }
    let by_class = g.nodes_by_class();
    if by_class.is_empty() {
        return Err(Error::Sampling("graph has no labelled classes".into()));
    }
    let mut rng = seed::rng(seed);
    let mut support = Vec::with_capacity(by_class.len());
    let mut query = Vec::new();
    for (c, nodes) in by_class.iter().enumerate() {
        if nodes.len() < m + 1 {
            return Err(Error::Sampling(format!(
                "class {c} has {} labelled samples, {m}-shot episodes need at least {}",
                nodes.len(),
                m + 1
            )));
        }
        let mut picked: Vec<usize> = sample(&mut rng, nodes.len(), m).into_iter().map(|i| nodes[i]).collect();
        picked.sort_unstable();
        query.extend(nodes.iter().copied().filter(|u| picked.binary_search(u).is_err()));
        support.push(picked);
    }
    query.sort_unstable();
    Ok(Episode {
        task,
        classes: by_class.len(),
        support,
        query,
        seed,
    })
}

/// Where ground-truth labels are read from during an episode.
pub trait LabelSource: Sync {
    fn label(&self, id: usize) -> Option<usize>;
}

impl LabelSource for Graph {
    fn label(&self, id: usize) -> Option<usize> {
        Graph::label(self, id)
    }
}

/// Records every id whose label was read.
pub struct LoggingLabels<'a, L: LabelSource> {
    inner: &'a L,
    reads: Mutex<Vec<usize>>,
}

impl<'a, L: LabelSource> LoggingLabels<'a, L> {
    pub fn new(inner: &'a L) -> Self {
        LoggingLabels {
            inner,
            reads: Mutex::new(Vec::new()),
        }
    }

    pub fn reads(&self) -> Vec<usize> {
        self.reads.lock().expect("label log poisoned").clone()
    }

    pub fn clear(&self) {
        self.reads.lock().expect("label log poisoned").clear();
    }
}

impl<L: LabelSource> LabelSource for LoggingLabels<'_, L> {
    fn label(&self, id: usize) -> Option<usize> {
        self.reads.lock().expect("label log poisoned").push(id);
        self.inner.label(id)
    }
}

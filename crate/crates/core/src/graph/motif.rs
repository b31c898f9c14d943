//! Motif-based synthetic graphs: each class lives in repeated copies of one
//! motif, the copies hang off a shared random backbone.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotifKind {
    Triangle,
    Ladder { rungs: usize },
    Grid { rows: usize, cols: usize },
    Tree { depth: usize, branching: usize },
    Star { leaves: usize },
    Ring { len: usize },
}

impl MotifKind {
    pub fn node_count(&self) -> usize {
        match *self {
            MotifKind::Triangle => 3,
            MotifKind::Ladder { rungs } => 2 * rungs,
            MotifKind::Grid { rows, cols } => rows * cols,
            MotifKind::Tree { depth, branching } => (0..=depth).map(|l| branching.pow(l as u32)).sum(),
            MotifKind::Star { leaves } => leaves + 1,
            MotifKind::Ring { len } => len,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MotifKind::Triangle => "triangle",
            MotifKind::Ladder { .. } => "ladder",
            MotifKind::Grid { .. } => "grid",
            MotifKind::Tree { .. } => "tree",
            MotifKind::Star { .. } => "star",
            MotifKind::Ring { .. } => "ring",
        }
    }
}

/// Edges of one motif instance over local ids `0..node_count()`. Node 0 is
/// the anchor.
pub fn motif_edges(kind: &MotifKind) -> Result<Vec<(usize, usize)>> {
    let mut e = Vec::new();
    match *kind {
        MotifKind::Triangle => e.extend([(0, 1), (0, 2), (1, 2)]),
        MotifKind::Ladder { rungs } => {
            if rungs == 0 {
                return Err(Error::Param("ladder needs at least one rung".into()));
            }
            for i in 0..rungs.saturating_sub(1) {
                e.push((i, i + 1));
                e.push((rungs + i, rungs + i + 1));
            }
            for i in 0..rungs {
                e.push((i, rungs + i));
            }
        }
        MotifKind::Grid { rows, cols } => {
            if rows == 0 || cols == 0 {
                return Err(Error::Param("grid dimensions must be positive".into()));
            }
            for r in 0..rows {
                for c in 0..cols {
                    let id = r * cols + c;
                    if c + 1 < cols {
                        e.push((id, id + 1));
                    }
                    if r + 1 < rows {
                        e.push((id, id + cols));
                    }
                }
            }
        }
        MotifKind::Tree { depth: _, branching } => {
            if branching == 0 {
                return Err(Error::Param("tree branching must be positive".into()));
            }
            for child in 1..kind.node_count() {
                e.push(((child - 1) / branching, child));
            }
        }
        MotifKind::Star { leaves } => e.extend((1..=leaves).map(|l| (0, l))),
        MotifKind::Ring { len } => {
            if len < 3 {
                return Err(Error::Param("ring needs at least three nodes".into()));
            }
            e.extend((0..len).map(|i| (i, (i + 1) % len)));
        }
    }
    Ok(e)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attachment {
    /// Node 0 of each instance joins the backbone.
    #[default]
    Anchor,
    /// A uniformly chosen node of each instance joins the backbone.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureProfile {
    pub mean: Vec<f64>,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotifSpec {
    #[serde(flatten)]
    pub kind: MotifKind,
    pub repetitions: usize,
    #[serde(default)]
    pub attachment: Attachment,
    pub feature_profile: FeatureProfile,
}

/// Erdős–Rényi wiring between the attachment nodes of all motif instances,
/// with `p = min(1, density · ln M / M)` for `M` instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub density: f64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec { density: 1.5 }
    }
}

/// One labelled graph where class `c` nodes sit in `classes[c]` motifs.
pub fn synth_motif_dataset(
    classes: &[MotifSpec],
    backbone: &BackboneSpec,
    domain: &str,
    seed: u64,
) -> Result<Graph> {
    let first = classes
        .first()
        .ok_or_else(|| Error::Param("motif dataset needs at least one class".into()))?;
    let dim = first.feature_profile.mean.len();
    let mut rng = seed::rng(seed);
    let mut edges = BTreeSet::new();
    let mut labels = BTreeMap::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut hubs = Vec::new();
    let mut n = 0;

    for (c, spec) in classes.iter().enumerate() {
        if spec.repetitions == 0 {
            return Err(Error::Param(format!("class {c}: repetitions must be at least 1")));
        }
        if spec.feature_profile.mean.len() != dim {
            return Err(Error::Param(format!(
                "class {c}: feature mean has {} entries, expected {dim}",
                spec.feature_profile.mean.len()
            )));
        }
        let noise = Normal::new(0.0, spec.feature_profile.noise.max(0.0))
            .map_err(|e| Error::Param(e.to_string()))?;
        let local = motif_edges(&spec.kind)?;
        let size = spec.kind.node_count();
        for _ in 0..spec.repetitions {
            for &(a, b) in &local {
                edges.insert(((n + a).min(n + b), (n + a).max(n + b)));
            }
            for i in 0..size {
                labels.insert(n + i, c);
                rows.extend(spec.feature_profile.mean.iter().map(|m| m + noise.sample(&mut rng)));
            }
            let hub = match spec.attachment {
                Attachment::Anchor => 0,
                Attachment::Random => rng.random_range(0..size),
            };
            hubs.push(n + hub);
            n += size;
        }
    }

    let m = hubs.len();
    if m > 1 {
        let p = (backbone.density * (m as f64).ln() / m as f64).clamp(0.0, 1.0);
        for i in 0..m {
            for j in i + 1..m {
                if rng.random::<f64>() < p {
                    edges.insert((hubs[i].min(hubs[j]), hubs[i].max(hubs[j])));
                }
            }
        }
        // keep instances reachable: an instance left without backbone edges is
        // wired to one random other hub
        for i in 0..m {
            let h = hubs[i];
            let linked = hubs.iter().any(|&o| o != h && edges.contains(&(h.min(o), h.max(o))));
            if !linked {
                let others: Vec<usize> = hubs.iter().copied().filter(|&o| o != h).collect();
                let &o = others.choose(&mut rng).expect("m > 1");
                edges.insert((h.min(o), h.max(o)));
            }
        }
    }

    Graph::new(
        n,
        edges,
        Tensor::matrix(n, dim, rows)?,
        labels,
        classes.len(),
        domain,
    )
}

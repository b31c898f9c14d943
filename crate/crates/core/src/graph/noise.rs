use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};

use super::Graph;
use crate::error::{Error, Result};
use crate::seed;

/// `X' = X + λ_f · r · ε` with `ε ~ N(0, 1)` per entry and `r` the column's
/// max absolute value.
pub fn inject_feature_noise(g: &Graph, lambda_f: f64, seed: u64) -> Result<Graph> {
    if !(lambda_f >= 0.0) {
        return Err(Error::Param(format!("feature noise level must be >= 0, got {lambda_f}")));
    }
    if lambda_f == 0.0 {
        return Ok(g.clone());
    }
    let x = g.features();
    let (n, d) = x.dims();
    let amplitude: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.get(i, j).abs()).fold(0.0, f64::max))
        .collect();
    let mut rng = seed::rng(seed);
    let mut out = x.clone();
    for i in 0..n {
        for (v, r) in out.row_slice_mut(i).iter_mut().zip(&amplitude) {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *v += lambda_f * r * eps;
        }
    }
    g.with_features(out)
}

/// Removes `⌊λ_s·|E|⌋` uniformly chosen edges and adds as many uniformly
/// chosen non-edges of the original graph (fewer if the pool runs out).
pub fn perturb_edges(g: &Graph, lambda_s: f64, seed: u64) -> Result<Graph> {
    if !(0.0..=1.0).contains(&lambda_s) {
        return Err(Error::Param(format!("edge perturbation must lie in [0, 1], got {lambda_s}")));
    }
    let m = g.edge_count();
    let quota = (lambda_s * m as f64 + 1e-9).floor() as usize;
    if quota == 0 {
        return Ok(g.clone());
    }
    let mut rng = seed::rng(seed);
    let removed: BTreeSet<usize> = sample(&mut rng, m, quota).into_iter().collect();
    let mut edges: Vec<(usize, usize)> = g
        .edges()
        .iter()
        .enumerate()
        .filter(|(i, _)| !removed.contains(i))
        .map(|(_, &e)| e)
        .collect();

    let n = g.node_count();
    let mut pool = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if !g.has_edge(u, v) {
                pool.push((u, v));
            }
        }
    }
    let add = quota.min(pool.len());
    for i in sample(&mut rng, pool.len(), add) {
        edges.push(pool[i]);
    }
    g.with_edges(edges)
}

//! Computable pieces of the transferability bound: channel matching
//! distance, Lipschitz estimates, the closed-form bound and an empirical
//! check on controlled node pairs.

use std::fmt::Write as _;
use std::path::Path;

use itertools::Itertools;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::encoder::{DisentangledEncoder, RoutingEdges};
use crate::error::{Error, Result};
use crate::graph::{ego_graph, Graph};
use crate::seed;

pub const MAX_MATCHING_CHANNELS: usize = 6;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `min_Π Σ_k ‖a_k − b_Π(k)‖²` by enumerating every permutation.
pub fn matching_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let k = a.len();
    if b.len() != k {
        return Err(Error::shape("matching_distance", &[k], &[b.len()]));
    }
    if k > MAX_MATCHING_CHANNELS {
        return Err(Error::Size(format!(
            "matching distance enumerates K! permutations; K = {k} exceeds {MAX_MATCHING_CHANNELS}"
        )));
    }
    if let Some(bad) = a.iter().chain(b).find(|v| v.len() != a.first().map_or(0, Vec::len)) {
        return Err(Error::shape("matching_distance", &[a[0].len()], &[bad.len()]));
    }
    let cost: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| sq_dist(x, y)).collect()).collect();
    Ok((0..k)
        .permutations(k)
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min))
}

/// Largest singular value by power iteration on `WᵀW`.
pub fn spectral_norm(w: &Tensor, iters: usize, tol: f64) -> f64 {
    let n = w.cols();
    if n == 0 || w.rows() == 0 {
        return 0.0;
    }
    let mut v = Tensor::matrix(n, 1, (0..n).map(|i| 1.0 + 0.01 * i as f64).collect()).expect("column");
    let mut sigma = 0.0;
    for _ in 0..iters {
        let norm = v.frobenius_norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = v.scale(1.0 / norm);
        let wv = w.matmul(&v).expect("shapes agree");
        let next = wv.frobenius_norm();
        v = w.t_matmul(&wv).expect("shapes agree");
        if (next - sigma).abs() <= tol * next.max(1.0) {
            sigma = next;
            break;
        }
        sigma = next;
    }
    sigma
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lipschitz {
    pub c_sigma: f64,
    pub l_w: f64,
    pub l_s: f64,
}

pub fn estimate_lipschitz(encoder: &DisentangledEncoder) -> Lipschitz {
    let l_w = (0..encoder.config.channels)
        .map(|k| spectral_norm(&encoder.channel_weight(k), 50, 1e-8))
        .fold(0.0, f64::max);
    Lipschitz {
        c_sigma: encoder.slope.item().abs().max(1.0),
        l_w,
        l_s: 1.0,
    }
}

/// `ε·√K·(C_σ L_W L_s / (4ρτ))^T`.
#[allow(clippy::too_many_arguments)]
pub fn bound_b(eps: f64, k: usize, c_sigma: f64, l_w: f64, l_s: f64, rho: f64, tau: f64, t: usize) -> Result<f64> {
    if !(eps >= 0.0) || k == 0 || [c_sigma, l_w, l_s, rho, tau].iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Param(format!(
            "bound constants must be positive (eps={eps}, K={k}, C={c_sigma}, L_W={l_w}, L_s={l_s}, rho={rho}, tau={tau})"
        )));
    }
    let base = c_sigma * l_w * l_s / (4.0 * rho * tau);
    Ok(eps * (k as f64).sqrt() * base.powi(t as i32))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCheck {
    pub pair_id: usize,
    pub node: usize,
    pub eps: f64,
    pub delta: f64,
    pub match_dist: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub pairs: Vec<PairCheck>,
    pub lipschitz: Lipschitz,
    pub channels: usize,
    pub iterations: usize,
    pub rho: f64,
    pub tau: f64,
}

impl BoundReport {
    pub fn pass_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.pass).count()
    }

    pub fn pass_rate(&self) -> f64 {
        if self.pairs.is_empty() {
            return 1.0;
        }
        self.pass_count() as f64 / self.pairs.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_id,eps,delta,match_dist,bound,pass\n");
        for p in &self.pairs {
            let _ = writeln!(out, "{},{},{},{},{},{}", p.pair_id, p.eps, p.delta, p.match_dist, p.bound, p.pass);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// How perturbation sizes and neighbourhoods are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairSpec {
    /// `ε` is uniform on `(0, max_eps]`.
    pub max_eps: f64,
    pub hops: usize,
}

impl Default for PairSpec {
    fn default() -> Self {
        PairSpec { max_eps: 0.1, hops: 2 }
    }
}

/// Encoder outputs of the center of `nodes` before and after moving the
/// center's aligned feature by `shift`.
fn center_pair(
    encoder: &DisentangledEncoder,
    x_local: &Tensor,
    edges: &RoutingEdges,
    shift: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut moved = x_local.clone();
    for (v, s) in moved.row_slice_mut(0).iter_mut().zip(shift) {
        *v += s;
    }
    let a = encoder.embed(x_local, edges)?;
    let b = encoder.embed(&moved, edges)?;
    Ok((a.node_channels(0), b.node_channels(0)))
}

/// One controlled pair around `node` with perturbation `ε·unit`.
pub fn check_pair(
    encoder: &DisentangledEncoder,
    g: &Graph,
    x_hat: &Tensor,
    node: usize,
    eps: f64,
    unit: &[f64],
    hops: usize,
    lip: &Lipschitz,
) -> Result<PairCheck> {
    let ego = ego_graph(g, node, hops)?;
    let local = x_hat.select_rows(&ego.nodes);
    let edges = RoutingEdges::new(ego.len(), &ego.edges);
    let shift: Vec<f64> = unit.iter().map(|v| v * eps).collect();
    let (hu, hv) = center_pair(encoder, &local, &edges, &shift)?;
    let delta = hu.concat().iter().zip(hv.concat()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let c = &encoder.config;
    let t = if edges.is_empty() { 0 } else { c.iterations };
    let bound = bound_b(eps, c.channels, lip.c_sigma, lip.l_w, lip.l_s, c.rho, c.tau, t)?;
    Ok(PairCheck {
        pair_id: 0,
        node,
        eps,
        delta,
        match_dist: matching_distance(&hu, &hv)?,
        bound,
        pass: delta <= bound + 1e-9,
    })
}

pub fn check_bound(encoder: &DisentangledEncoder, g: &Graph, x_hat: &Tensor, pair_count: usize, seed: u64) -> Result<BoundReport> {
    check_bound_with(encoder, g, x_hat, pair_count, &PairSpec::default(), seed)
}

/// Samples `pair_count` centers and perturbations, then checks each pair.
pub fn check_bound_with(
    encoder: &DisentangledEncoder,
    g: &Graph,
    x_hat: &Tensor,
    pair_count: usize,
    spec: &PairSpec,
    seed: u64,
) -> Result<BoundReport> {
    if g.node_count() == 0 {
        return Err(Error::Graph("bound check needs a nonempty graph".into()));
    }
    if x_hat.dims() != (g.node_count(), encoder.config.input_dim) {
        return Err(Error::shape("check_bound", x_hat.shape(), &[g.node_count(), encoder.config.input_dim]));
    }
    let lip = estimate_lipschitz(encoder);
    let d = encoder.config.input_dim;
    let draws: Vec<(usize, f64, Vec<f64>)> = (0..pair_count)
        .map(|i| {
            let mut rng = seed::rng(seed::derive(seed, i as u64));
            let node = rng.random_range(0..g.node_count());
            let eps = spec.max_eps * (1.0 - rng.random::<f64>());
            let mut unit: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = unit.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            unit.iter_mut().for_each(|v| *v /= norm);
            (node, eps, unit)
        })
        .collect();
    let pairs = crate::par::map(draws, |(node, eps, unit)| check_pair(encoder, g, x_hat, node, eps, &unit, spec.hops, &lip))
        .into_iter()
        .enumerate()
        .map(|(i, p)| p.map(|p| PairCheck { pair_id: i, ..p }))
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundReport {
        pairs,
        lipschitz: lip,
        channels: encoder.config.channels,
        iterations: encoder.config.iterations,
        rho: encoder.config.rho,
        tau: encoder.config.tau,
    })
}

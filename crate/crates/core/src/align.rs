//! Multi-domain feature alignment.
//!
//! Raw features (optionally concatenated with precomputed text embeddings)
//! are reduced to a shared width `d` by a per-domain truncated-SVD basis fit
//! once at registration, then passed through a trainable per-domain `d×d`
//! projection `W_i`: `X̂ = (X ‖ T) · V · W_iᵀ`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{gaussian, Parameterized, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::seed;

/// Rank-`k` factors `M ≈ U · diag(Σ) · Vᵀ`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor,
    pub sigma: Vec<f64>,
    pub v: Tensor,
}

/// Modified Gram–Schmidt on the columns of `a` (two passes). Columns that
/// vanish are replaced by unit vectors orthogonal to the ones kept.
fn orthonormalize_columns(a: &Tensor) -> Tensor {
    let (n, k) = a.dims();
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| (0..n).map(|i| a.get(i, j)).collect()).collect();
    let scale = a.frobenius_norm().max(1.0);
    for j in 0..k {
        for _ in 0..2 {
            for p in 0..j {
                let dot: f64 = cols[j].iter().zip(&cols[p]).map(|(x, y)| x * y).sum();
                let (head, tail) = cols.split_at_mut(j);
                for (x, y) in tail[0].iter_mut().zip(&head[p]) {
                    *x -= dot * y;
                }
            }
        }
        let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 * scale {
            cols[j].iter_mut().for_each(|x| *x /= norm);
        } else {
            // complete with the first canonical direction left over
            'basis: for e in 0..n {
                let mut cand = vec![0.0; n];
                cand[e] = 1.0;
                for _ in 0..2 {
                    for p in 0..j {
                        let dot: f64 = cand.iter().zip(&cols[p]).map(|(x, y)| x * y).sum();
                        for (x, y) in cand.iter_mut().zip(&cols[p]) {
                            *x -= dot * y;
                        }
                    }
                }
                let cn = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
                if cn > 1e-6 {
                    cols[j] = cand.into_iter().map(|x| x / cn).collect();
                    break 'basis;
                }
            }
        }
    }
    let mut out = Tensor::zeros(n, k);
    for (j, col) in cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            out.set(i, j, x);
        }
    }
    out
}

/// Cyclic Jacobi eigen-decomposition of a small symmetric matrix. Returns
/// eigenvalues (descending) and eigenvectors as columns.
fn symmetric_eigen(a: &Tensor) -> (Vec<f64>, Tensor) {
    let n = a.rows();
    let mut m = a.clone();
    let mut vecs = Tensor::eye(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum();
        if off < 1e-30 * m.frobenius_norm().powi(2).max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (vecs.get(k, p), vecs.get(k, q));
                    vecs.set(k, p, c * vkp - s * vkq);
                    vecs.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let mut sorted = Tensor::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            sorted.set(k, dst, vecs.get(k, src));
        }
    }
    (values, sorted)
}

/// Randomized truncated SVD by subspace iteration with oversampling.
pub fn truncated_svd(m: &Tensor, k: usize, iters: usize, seed: u64) -> Result<Svd> {
    let (rows, cols) = m.dims();
    if k == 0 || k > rows.min(cols) {
        return Err(Error::Param(format!(
            "rank {k} outside 1..={} for a {rows}x{cols} matrix",
            rows.min(cols)
        )));
    }
    if iters < 2 {
        return Err(Error::Param(format!("subspace iteration needs at least 2 passes, got {iters}")));
    }
    let width = (k + 10).min(rows.min(cols));
    let mut rng = seed::rng(seed);
    let omega = gaussian(&mut rng, cols, width, 1.0);
    let mut q = orthonormalize_columns(&m.matmul(&omega)?);
    for _ in 0..iters {
        let z = orthonormalize_columns(&m.t_matmul(&q)?);
        q = orthonormalize_columns(&m.matmul(&z)?);
    }
    // B = Qᵀ M is width×cols; its left singular vectors come from B Bᵀ
    let b = q.t_matmul(m)?;
    let gram = b.matmul_t(&b)?;
    let (evals, evecs) = symmetric_eigen(&gram);
    let sigma: Vec<f64> = evals.iter().take(k).map(|&e| e.max(0.0).sqrt()).collect();
    let ub = evecs.col_block(0, k);
    let u = orthonormalize_columns(&q.matmul(&ub)?);
    // V = Bᵀ U_B Σ⁻¹, completed where σ vanishes
    let mut v = b.t_matmul(&ub)?;
    let smax = sigma.first().copied().unwrap_or(0.0);
    for j in 0..k {
        let s = sigma[j];
        for i in 0..cols {
            let val = if s > 1e-12 * smax.max(1e-300) { v.get(i, j) / s } else { 0.0 };
            v.set(i, j, val);
        }
    }
    let v = orthonormalize_columns(&v);
    Ok(Svd { u, sigma, v })
}

/// Frozen dimension reduction for one domain plus its trainable projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainAligner {
    /// Raw input width (features plus text columns).
    pub input_dim: usize,
    /// `max(input_dim, d) × d`; inputs narrower than `d` are zero-padded and
    /// the basis is the identity.
    pub basis: Tensor,
    /// Trainable `d×d` projection `W_i`.
    pub weight: Tensor,
}

impl DomainAligner {
    pub fn padded(&self) -> bool {
        self.basis.rows() > self.input_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aligner {
    pub target_dim: usize,
    pub svd_iters: usize,
    domains: BTreeMap<String, DomainAligner>,
}

impl Default for Aligner {
    fn default() -> Self {
        Aligner::new(64)
    }
}

/// Raw input `X ‖ T` of a graph (features plus text embeddings when present).
pub fn raw_input(g: &Graph) -> Result<Tensor> {
    match g.text_embeddings() {
        None => Ok(g.features().clone()),
        Some(t) => concat_cols(g.features(), t),
    }
}

fn concat_cols(x: &Tensor, t: &Tensor) -> Result<Tensor> {
    if t.rows() != x.rows() {
        return Err(Error::shape("align_features", x.shape(), t.shape()));
    }
    let (n, a) = x.dims();
    let b = t.cols();
    let mut vals = Vec::with_capacity(n * (a + b));
    for i in 0..n {
        vals.extend_from_slice(x.row_slice(i));
        vals.extend_from_slice(t.row_slice(i));
    }
    Tensor::matrix(n, a + b, vals)
}

impl Aligner {
    pub fn new(target_dim: usize) -> Self {
        Aligner {
            target_dim,
            svd_iters: 4,
            domains: BTreeMap::new(),
        }
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.domains.keys().map(String::as_str)
    }

    pub fn contains(&self, domain: &str) -> bool {
        self.domains.contains_key(domain)
    }

    pub fn domain(&self, domain: &str) -> Option<&DomainAligner> {
        self.domains.get(domain)
    }

    pub fn weight_name(domain: &str) -> String {
        format!("align.{domain}.weight")
    }

    /// Fits the frozen basis for `domain` on `raw` and initialises
    /// `W_i = I + N(0, 0.01²)`. Re-registering an existing domain is a no-op.
    pub fn register(&mut self, domain: &str, raw: &Tensor, seed: u64) -> Result<()> {
        if self.domains.contains_key(domain) {
            return Ok(());
        }
        let d = self.target_dim;
        let input_dim = raw.cols();
        let basis = if input_dim < d || raw.rows() < d {
            if input_dim > d {
                return Err(Error::Param(format!(
                    "domain `{domain}`: {} rows are too few to fit a rank-{d} basis",
                    raw.rows()
                )));
            }
            Tensor::eye(d)
        } else {
            truncated_svd(raw, d, self.svd_iters, seed::derive(seed, 1))?.v
        };
        let mut rng = seed::rng(seed::derive(seed, 2));
        let mut weight = gaussian(&mut rng, d, d, 0.01);
        for i in 0..d {
            weight.set(i, i, weight.get(i, i) + 1.0);
        }
        self.domains.insert(
            domain.to_string(),
            DomainAligner {
                input_dim,
                basis,
                weight,
            },
        );
        Ok(())
    }

    /// Frozen part `(X ‖ T) · V` (zero-padded when narrow), `N×d`.
    pub fn project(&self, domain: &str, raw: &Tensor) -> Result<Tensor> {
        let a = self
            .domains
            .get(domain)
            .ok_or_else(|| Error::Contract(format!("domain `{domain}` is not registered")))?;
        if raw.cols() != a.input_dim {
            return Err(Error::shape("align_features", raw.shape(), &[raw.rows(), a.input_dim]));
        }
        if a.padded() {
            let pad = Tensor::zeros(raw.rows(), a.basis.rows() - a.input_dim);
            concat_cols(raw, &pad)?.matmul(&a.basis)
        } else {
            raw.matmul(&a.basis)
        }
    }

    /// `X̂ = project(X) · W_iᵀ` evaluated without a tape.
    pub fn apply(&self, domain: &str, raw: &Tensor) -> Result<Tensor> {
        let p = self.project(domain, raw)?;
        p.matmul_t(&self.domains[domain].weight)
    }

    /// Records `X̂ = P · Wᵀ` on the tape, with `W_i` either trainable or constant.
    pub fn apply_on_tape(&self, tape: &mut Tape, domain: &str, projected: Var, trainable: bool) -> Result<Var> {
        let a = self
            .domains
            .get(domain)
            .ok_or_else(|| Error::Contract(format!("domain `{domain}` is not registered")))?;
        let w = if trainable {
            tape.param(&Self::weight_name(domain), a.weight.clone())
        } else {
            tape.constant(a.weight.clone())
        };
        let wt = tape.transpose(w);
        tape.matmul(projected, wt)
    }

    /// Keeps only the listed domains.
    pub fn retain(&mut self, keep: &[&str]) {
        self.domains.retain(|k, _| keep.contains(&k.as_str()));
    }

    pub fn insert(&mut self, domain: &str, a: DomainAligner) {
        self.domains.insert(domain.to_string(), a);
    }
}

impl Parameterized for Aligner {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (k, a) in &self.domains {
            f(&Self::weight_name(k), &a.weight);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (k, a) in self.domains.iter_mut() {
            f(&Self::weight_name(k), &mut a.weight);
        }
    }
}

/// Registers `domain` on first use (fitting its basis on these features) and
/// returns the aligned `N×d` features.
pub fn align_features(
    x: &Tensor,
    text: Option<&Tensor>,
    aligner: &mut Aligner,
    domain: &str,
    seed: u64,
) -> Result<Tensor> {
    let raw = match text {
        Some(t) => concat_cols(x, t)?,
        None => x.clone(),
    };
    aligner.register(domain, &raw, seed)?;
    aligner.apply(domain, &raw)
}

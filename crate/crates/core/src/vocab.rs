//! Graphon experts: per-(domain, class) step-function graphons for structure
//! and features, estimated from disentangled vocabularies and sampled back
//! into synthetic vocabularies.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::encoder::DisentangledVocab;
use crate::error::{Error, Result};
use crate::seed;

pub const BANK_VERSION: u32 = 1;
pub const DEFAULT_N_PRIME: usize = 15;

/// Symmetric `n′×n′` edge-probability grid with zero diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureGraphon(Tensor);

impl StructureGraphon {
    /// Clips to `[0, 1]`, symmetrises by averaging and zeroes the diagonal.
    pub fn new(w: Tensor) -> Result<Self> {
        let (n, m) = w.dims();
        if n != m {
            return Err(Error::shape("structure graphon", w.shape(), &[n, n]));
        }
        if !w.is_finite() {
            return Err(Error::Param("structure graphon holds non-finite values".into()));
        }
        let mut out = Tensor::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let v = (0.5 * (w.get(i, j) + w.get(j, i))).clamp(0.0, 1.0);
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        Ok(StructureGraphon(out))
    }

    pub fn resolution(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.0
    }
}

/// `n′×d` feature grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGraphon(Tensor);

impl FeatureGraphon {
    pub fn new(w: Tensor) -> Result<Self> {
        if !w.is_finite() {
            return Err(Error::Param("feature graphon holds non-finite values".into()));
        }
        Ok(FeatureGraphon(w))
    }

    pub fn matrix(&self) -> &Tensor {
        &self.0
    }

    /// Mean over the grid rows, `1×d`.
    pub fn pooled(&self) -> Vec<f64> {
        let (n, d) = self.0.dims();
        (0..d).map(|j| (0..n).map(|i| self.0.get(i, j)).sum::<f64>() / n as f64).collect()
    }
}

/// One sampled vocabulary. `cells[i]` is the 0-based grid cell of node `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedVocab {
    pub adjacency: Tensor,
    pub features: Tensor,
    pub cells: Vec<usize>,
}

impl GeneratedVocab {
    pub fn node_count(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.node_count();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adjacency.get(i, j) != 0.0)
            .collect()
    }
}

/// How node latent positions are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentLaw {
    /// `u ~ U[0,1]` mapped to cell `⌈u·n′⌉`.
    #[default]
    Sampled,
    /// Node `i` sits in cell `i`.
    FixedGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub domain: String,
    pub class: usize,
    pub count: usize,
    pub structure: StructureGraphon,
    pub features: FeatureGraphon,
}

impl BankEntry {
    pub fn n_prime(&self) -> usize {
        self.structure.resolution()
    }

    pub fn generate(&self, seed: u64) -> Result<GeneratedVocab> {
        generate(&self.structure, &self.features, seed)
    }
}

/// Adjacency and features of `v` reordered by degree (descending, ties by
/// node id) and zero-padded or truncated to `n′` nodes.
pub fn order_and_pad(v: &DisentangledVocab, n_prime: usize) -> (Tensor, Tensor) {
    let n = v.len();
    let d = v.features.cols();
    let degree: Vec<f64> = (0..n).map(|i| v.adjacency.row_slice(i).iter().sum()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| degree[b].total_cmp(&degree[a]).then(v.nodes[a].cmp(&v.nodes[b])));
    order.truncate(n_prime);
    let mut a_pad = Tensor::zeros(n_prime, n_prime);
    let mut x_pad = Tensor::zeros(n_prime, d);
    for (i, &oi) in order.iter().enumerate() {
        for (j, &oj) in order.iter().enumerate() {
            a_pad.set(i, j, v.adjacency.get(oi, oj));
        }
        x_pad.row_slice_mut(i).copy_from_slice(v.features.row_slice(oi));
    }
    (a_pad, x_pad)
}

/// Elementwise means of already padded adjacency and feature matrices.
pub fn estimate_from_padded(padded: &[(Tensor, Tensor)]) -> Result<(StructureGraphon, FeatureGraphon)> {
    let (a0, x0) = padded
        .first()
        .ok_or_else(|| Error::Param("graphon estimation needs at least one vocabulary".into()))?;
    let mut a_sum = Tensor::zeros(a0.rows(), a0.cols());
    let mut x_sum = Tensor::zeros(x0.rows(), x0.cols());
    for (a, x) in padded {
        a_sum.add_assign(a)?;
        x_sum.add_assign(x)?;
    }
    let inv = 1.0 / padded.len() as f64;
    Ok((StructureGraphon::new(a_sum.scale(inv))?, FeatureGraphon::new(x_sum.scale(inv))?))
}

/// `W_A(u,v) = mean_i A_i[π(u), π(v)]` and the feature analogue.
pub fn estimate_graphons(vocabs: &[DisentangledVocab], n_prime: usize) -> Result<(StructureGraphon, FeatureGraphon)> {
    if n_prime == 0 {
        return Err(Error::Param("graphon resolution must be positive".into()));
    }
    let padded: Vec<_> = vocabs.iter().map(|v| order_and_pad(v, n_prime)).collect();
    estimate_from_padded(&padded)
}

fn latent_cells(n: usize, law: LatentLaw, rng: &mut impl Rng) -> Vec<usize> {
    match law {
        LatentLaw::FixedGrid => (0..n).collect(),
        LatentLaw::Sampled => (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                ((u * n as f64).ceil() as usize).max(1) - 1
            })
            .collect(),
    }
}

/// Draws one vocabulary: latent cells per node, then `Ã[i,j] ~ Bern(W_A[c_i, c_j])`
/// for `i < j`, mirrored, and `X̃[i] = W_X[c_i]`.
pub fn generate(structure: &StructureGraphon, features: &FeatureGraphon, seed: u64) -> Result<GeneratedVocab> {
    generate_with(structure, features, LatentLaw::Sampled, seed)
}

pub fn generate_with(
    structure: &StructureGraphon,
    features: &FeatureGraphon,
    law: LatentLaw,
    seed: u64,
) -> Result<GeneratedVocab> {
    let n = structure.resolution();
    if features.matrix().rows() != n {
        return Err(Error::shape("generate", structure.matrix().shape(), features.matrix().shape()));
    }
    let mut rng = seed::rng(seed);
    let cells = latent_cells(n, law, &mut rng);
    let w = structure.matrix();
    let mut adjacency = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let p = w.get(cells[i], cells[j]);
            let hit: f64 = rng.random();
            if hit < p {
                adjacency.set(i, j, 1.0);
                adjacency.set(j, i, 1.0);
            }
        }
    }
    Ok(GeneratedVocab {
        adjacency,
        features: features.matrix().select_rows(&cells),
        cells,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvMode {
    /// Full adjacency outcome space; `n′ ≤ 4`.
    Exact,
    /// Mean absolute gap between per-pair edge frequencies and model
    /// probabilities. A lower bound on the exact distance.
    EdgeMarginal,
}

fn pair_index(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

fn outcome_code(a: &Tensor, pairs: &[(usize, usize)]) -> usize {
    pairs
        .iter()
        .enumerate()
        .filter(|(_, &(i, j))| a.get(i, j) != 0.0)
        .fold(0, |code, (b, _)| code | (1 << b))
}

fn product_law(w: &Tensor, cells: &[usize], pairs: &[(usize, usize)], code: usize) -> f64 {
    pairs
        .iter()
        .enumerate()
        .map(|(b, &(i, j))| {
            let p = w.get(cells[i], cells[j]);
            if code >> b & 1 == 1 {
                p
            } else {
                1.0 - p
            }
        })
        .product()
}

/// Probability of every adjacency outcome under `law`, indexed by the
/// upper-triangle bit code.
pub fn outcome_law(model: &StructureGraphon, law: LatentLaw) -> Result<Vec<f64>> {
    let n = model.resolution();
    if n > 4 {
        return Err(Error::Size(format!("exact outcome law needs n′ ≤ 4, got {n}")));
    }
    let pairs = pair_index(n);
    let w = model.matrix();
    let outcomes = 1usize << pairs.len();
    let assignments: Vec<Vec<usize>> = match law {
        LatentLaw::FixedGrid => vec![(0..n).collect()],
        LatentLaw::Sampled => (0..n.pow(n as u32))
            .map(|mut k| {
                (0..n)
                    .map(|_| {
                        let c = k % n;
                        k /= n;
                        c
                    })
                    .collect()
            })
            .collect(),
    };
    let weight = 1.0 / assignments.len() as f64;
    Ok((0..outcomes)
        .map(|code| assignments.iter().map(|c| weight * product_law(w, c, &pairs, code)).sum())
        .collect())
}

/// Distance between the empirical law of `samples` and the model.
pub fn tv_distance(samples: &[Tensor], model: &StructureGraphon, mode: TvMode, law: LatentLaw) -> Result<f64> {
    let n = model.resolution();
    if samples.is_empty() {
        return Err(Error::Param("total variation needs at least one sample".into()));
    }
    if let Some(bad) = samples.iter().find(|a| a.dims() != (n, n)) {
        return Err(Error::shape("tv_distance", bad.shape(), &[n, n]));
    }
    let pairs = pair_index(n);
    let inv = 1.0 / samples.len() as f64;
    match mode {
        TvMode::Exact => {
            let law = outcome_law(model, law)?;
            let mut hist = vec![0.0; law.len()];
            for a in samples {
                hist[outcome_code(a, &pairs)] += inv;
            }
            Ok(0.5 * hist.iter().zip(&law).map(|(p, q)| (p - q).abs()).sum::<f64>())
        }
        TvMode::EdgeMarginal => {
            if pairs.is_empty() {
                return Ok(0.0);
            }
            let w = model.matrix();
            let uniform = w.sum() / (n * n) as f64;
            let gap: f64 = pairs
                .iter()
                .map(|&(i, j)| {
                    let freq = samples.iter().filter(|a| a.get(i, j) != 0.0).count() as f64 * inv;
                    let p = match law {
                        LatentLaw::FixedGrid => w.get(i, j),
                        LatentLaw::Sampled => uniform,
                    };
                    (freq - p).abs()
                })
                .sum();
            Ok(gap / pairs.len() as f64)
        }
    }
}

/// Graphon pairs for every `(domain, class)` seen in the vocabularies.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabBank {
    n_prime: usize,
    feature_dim: usize,
    entries: BTreeMap<(String, usize), BankEntry>,
}

impl VocabBank {
    pub fn new(n_prime: usize, feature_dim: usize) -> Self {
        VocabBank {
            n_prime,
            feature_dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn n_prime(&self) -> usize {
        self.n_prime
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, entry: BankEntry) -> Result<()> {
        if entry.n_prime() != self.n_prime || entry.features.matrix().dims() != (self.n_prime, self.feature_dim) {
            return Err(Error::shape(
                "bank entry",
                entry.features.matrix().shape(),
                &[self.n_prime, self.feature_dim],
            ));
        }
        if entry.count == 0 {
            return Err(Error::Param("bank entries need at least one sample".into()));
        }
        self.entries.insert((entry.domain.clone(), entry.class), entry);
        Ok(())
    }

    pub fn entry(&self, domain: &str, class: usize) -> Option<&BankEntry> {
        self.entries.get(&(domain.to_string(), class))
    }

    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.values()
    }

    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = self.entries.keys().map(|(d, _)| d.clone()).collect();
        out.dedup();
        out
    }

    /// Entries of one domain ordered by class id.
    pub fn domain_entries(&self, domain: &str) -> Vec<&BankEntry> {
        self.entries.values().filter(|e| e.domain == domain).collect()
    }
}

/// Groups vocabularies by `(domain, class)` and estimates one entry each.
pub fn build_bank(vocabs: &[DisentangledVocab], n_prime: usize) -> Result<VocabBank> {
    let first = vocabs
        .first()
        .ok_or_else(|| Error::Param("cannot build a bank from zero vocabularies".into()))?;
    let mut groups: BTreeMap<(String, usize), Vec<DisentangledVocab>> = BTreeMap::new();
    for v in vocabs {
        groups.entry((v.domain.clone(), v.class)).or_default().push(v.clone());
    }
    let mut bank = VocabBank::new(n_prime, first.features.cols());
    for ((domain, class), group) in groups {
        let (structure, features) = estimate_graphons(&group, n_prime)?;
        bank.insert(BankEntry {
            domain,
            class,
            count: group.len(),
            structure,
            features,
        })?;
    }
    Ok(bank)
}

#[derive(Serialize, Deserialize)]
struct EntryFile {
    domain: String,
    class: usize,
    n_prime: usize,
    count: usize,
    w_a: Vec<Vec<f64>>,
    w_x: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    version: u32,
    n_prime: usize,
    feature_dim: usize,
    entries: Vec<EntryFile>,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

pub fn save_bank(bank: &VocabBank, path: impl AsRef<Path>) -> Result<()> {
    let file = BankFile {
        version: BANK_VERSION,
        n_prime: bank.n_prime,
        feature_dim: bank.feature_dim,
        entries: bank
            .entries()
            .map(|e| EntryFile {
                domain: e.domain.clone(),
                class: e.class,
                n_prime: e.n_prime(),
                count: e.count,
                w_a: rows(e.structure.matrix()),
                w_x: rows(e.features.matrix()),
            })
            .collect(),
    };
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<VocabBank> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let corrupt = |e: String| Error::Corrupt(format!("{}: {e}", path.display()));
    let raw: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| corrupt(e.to_string()))?;
    let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != BANK_VERSION {
        return Err(Error::Version {
            found,
            expected: BANK_VERSION,
        });
    }
    let file: BankFile = serde_json::from_value(raw).map_err(|e| corrupt(e.to_string()))?;
    let mut bank = VocabBank::new(file.n_prime, file.feature_dim);
    for e in file.entries {
        if e.n_prime != file.n_prime {
            return Err(corrupt(format!("entry ({}, {}) has n′ = {}", e.domain, e.class, e.n_prime)));
        }
        let w_a = Tensor::from_rows(&e.w_a).map_err(|err| corrupt(err.to_string()))?;
        let w_x = Tensor::from_rows(&e.w_x).map_err(|err| corrupt(err.to_string()))?;
        let structure = StructureGraphon::new(w_a.clone())?;
        if structure.matrix() != &w_a {
            return Err(corrupt(format!("entry ({}, {}) is not a valid graphon", e.domain, e.class)));
        }
        bank.insert(BankEntry {
            domain: e.domain,
            class: e.class,
            count: e.count,
            structure,
            features: FeatureGraphon::new(w_x)?,
        })
        .map_err(|err| corrupt(err.to_string()))?;
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(nodes: Vec<usize>, edges: &[(usize, usize)], d: usize) -> DisentangledVocab {
        let n = nodes.len();
        let mut adjacency = Tensor::zeros(n, n);
        for &(a, b) in edges {
            adjacency.set(a, b, 1.0);
            adjacency.set(b, a, 1.0);
        }
        let features = Tensor::matrix(n, d, (0..n * d).map(|i| i as f64 + 1.0).collect()).unwrap();
        DisentangledVocab {
            nodes,
            adjacency,
            features,
            class: 0,
            domain: "d".into(),
            channel: 0,
        }
    }

    fn filled(n: usize, p: f64) -> StructureGraphon {
        StructureGraphon::new(Tensor::filled(n, n, p)).unwrap()
    }

    #[test]
    fn single_node_padding() {
        let v = vocab(vec![7], &[], 2);
        let (a, x) = order_and_pad(&v, 4);
        assert_eq!(a, Tensor::zeros(4, 4));
        assert_eq!(x.row_slice(0), &[1.0, 2.0]);
        assert_eq!(x.sum(), 3.0);
    }

    #[test]
    fn path_center_first() {
        // path 10 - 11 - 12 stored as center 11 first
        let v = vocab(vec![11, 10, 12], &[(0, 1), (0, 2)], 1);
        let (a, x) = order_and_pad(&v, 5);
        assert_eq!(x.get(0, 0), 1.0);
        assert_eq!(a.sum(), 4.0);
        assert_eq!(a.get(0, 1), 1.0);
        assert_eq!(a.get(0, 2), 1.0);
        // leaves ordered by id: 10 then 12
        assert_eq!(x.get(1, 0), 2.0);
    }

    #[test]
    fn regular_graph_is_a_permutation() {
        let v = vocab(vec![3, 1, 2, 0], &[(0, 1), (1, 2), (2, 3), (3, 0)], 1);
        let (a, _) = order_and_pad(&v, 4);
        for i in 0..4 {
            assert_eq!(a.row_slice(i).iter().sum::<f64>(), 2.0);
        }
    }

    #[test]
    fn truncation_keeps_top_degree() {
        let v = vocab(vec![0, 1, 2, 3, 4], &[(0, 1), (0, 2), (0, 3), (0, 4), (1, 2)], 1);
        let (a, x) = order_and_pad(&v, 3);
        assert_eq!(x.row_slice(0), &[1.0]);
        assert_eq!(x.row_slice(1), &[2.0]);
        assert_eq!(x.row_slice(2), &[3.0]);
        assert_eq!(a.sum(), 6.0);
    }

    #[test]
    fn estimation_examples() {
        let v = vocab(vec![0, 1, 2], &[(0, 1), (0, 2)], 1);
        let (w1, _) = estimate_graphons(std::slice::from_ref(&v), 4).unwrap();
        assert_eq!(w1.matrix(), &order_and_pad(&v, 4).0);
        let (w2, _) = estimate_graphons(&[v.clone(), v.clone()], 4).unwrap();
        assert_eq!(w1, w2);

        let tri = vocab(vec![0, 1, 2], &[(0, 1), (0, 2), (1, 2)], 1);
        let (w, _) = estimate_graphons(&[v, tri], 4).unwrap();
        let want = [
            [0.0, 1.0, 1.0, 0.0],
            [1.0, 0.0, 0.5, 0.0],
            [1.0, 0.5, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
        ];
        for i in 0..4 {
            assert_eq!(w.matrix().row_slice(i), &want[i]);
        }
        assert!(estimate_graphons(&[], 4).is_err());
    }

    #[test]
    fn generation_extremes() {
        let x = FeatureGraphon::new(Tensor::zeros(5, 2)).unwrap();
        for seed in 0..20 {
            assert_eq!(generate(&filled(5, 0.0), &x, seed).unwrap().adjacency.sum(), 0.0);
            let full = generate_with(&filled(5, 1.0), &x, LatentLaw::FixedGrid, seed).unwrap();
            assert_eq!(full.adjacency.sum(), 20.0);
        }
    }

    #[test]
    fn latent_cells_map_features() {
        let w_x = FeatureGraphon::new(Tensor::matrix(3, 1, vec![10.0, 20.0, 30.0]).unwrap()).unwrap();
        let g = generate(&filled(3, 0.5), &w_x, 4).unwrap();
        for (i, &c) in g.cells.iter().enumerate() {
            assert!(c < 3);
            assert_eq!(g.features.get(i, 0), w_x.matrix().get(c, 0));
        }
        assert_eq!(g.adjacency, g.adjacency.transpose());
    }

    #[test]
    fn edge_frequency_matches_probability() {
        let x = FeatureGraphon::new(Tensor::zeros(2, 1)).unwrap();
        let w = filled(2, 0.3);
        let trials = 10_000;
        let hits = (0..trials)
            .filter(|&s| generate_with(&w, &x, LatentLaw::FixedGrid, s).unwrap().adjacency.get(0, 1) == 1.0)
            .count();
        let freq = hits as f64 / trials as f64;
        assert!((freq - 0.3).abs() <= 3.0 * (0.3f64 * 0.7 / trials as f64).sqrt());
    }

    #[test]
    fn tv_examples() {
        let zero = filled(3, 0.0);
        let complete: Vec<Tensor> = (0..5)
            .map(|_| {
                let mut a = Tensor::filled(3, 3, 1.0);
                for i in 0..3 {
                    a.set(i, i, 0.0);
                }
                a
            })
            .collect();
        for law in [LatentLaw::Sampled, LatentLaw::FixedGrid] {
            assert!((tv_distance(&complete, &zero, TvMode::Exact, law).unwrap() - 1.0).abs() < 1e-12);
            let empty = vec![Tensor::zeros(3, 3)];
            assert!(tv_distance(&empty, &zero, TvMode::Exact, law).unwrap() < 1e-12);
        }
        assert!(matches!(
            tv_distance(&[Tensor::zeros(5, 5)], &filled(5, 0.2), TvMode::Exact, LatentLaw::FixedGrid),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn outcome_laws_are_distributions() {
        let mut w = Tensor::zeros(3, 3);
        for (i, j, p) in [(0, 1, 0.2), (0, 2, 0.7), (1, 2, 0.5)] {
            w.set(i, j, p);
            w.set(j, i, p);
        }
        let g = StructureGraphon::new(w).unwrap();
        for law in [LatentLaw::Sampled, LatentLaw::FixedGrid] {
            let l = outcome_law(&g, law).unwrap();
            assert_eq!(l.len(), 8);
            assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // fixed grid: empty graph has probability 0.8·0.3·0.5
        assert!((outcome_law(&g, LatentLaw::FixedGrid).unwrap()[0] - 0.12).abs() < 1e-12);
    }

    #[test]
    fn bank_round_trip_and_corruption() {
        let mut bank = VocabBank::new(3, 2);
        for domain in ["a", "b"] {
            for class in 0..3 {
                let mut w = Tensor::zeros(3, 3);
                w.set(0, 1, 0.1 * class as f64 + 0.05);
                w.set(1, 0, 0.1 * class as f64 + 0.05);
                bank.insert(BankEntry {
                    domain: domain.into(),
                    class,
                    count: class + 1,
                    structure: StructureGraphon::new(w).unwrap(),
                    features: FeatureGraphon::new(Tensor::filled(3, 2, 1.0 / 3.0)).unwrap(),
                })
                .unwrap();
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        save_bank(&bank, &path).unwrap();
        let back = load_bank(&path).unwrap();
        assert_eq!(back, bank);
        assert_eq!(back.n_prime(), 3);
        assert_eq!(back.domains(), vec!["a".to_string(), "b".to_string()]);

        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() - 20]).unwrap();
        assert!(matches!(load_bank(&path), Err(Error::Corrupt(_))));
        fs::write(&path, text.replacen("\"version\":1", "\"version\":2", 1)).unwrap();
        assert!(matches!(load_bank(&path), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn build_bank_groups_by_domain_and_class() {
        let mut a = vocab(vec![0, 1], &[(0, 1)], 1);
        let mut b = vocab(vec![2], &[], 1);
        b.class = 1;
        let mut c = a.clone();
        c.domain = "e".into();
        a.channel = 3;
        let bank = build_bank(&[a, b, c], 4).unwrap();
        assert_eq!(bank.len(), 3);
        assert_eq!(bank.entry("d", 0).unwrap().count, 1);
        assert_eq!(bank.domain_entries("d").len(), 2);
    }
}

//! Contrastive link-prediction pre-training over several source graphs.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::align::{raw_input, Aligner};
use crate::autodiff::{gaussian, AdamState, Axis, Gradients, Parameterized, Tape, Tensor, Var};
use crate::encoder::{mi_regularizer, mi_regularizer_on_tape, ChannelEmbeddings, DisentangledEncoder, EncoderConfig, RoutingEdges};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::seed;

pub const CHECKPOINT_VERSION: u32 = 1;

/// `g(h_u, h_v) = MLP(⟨h_u, h_v⟩)` with one PReLU hidden layer.
///
/// Both weight layers are stored as logs and the slope is fixed in `(0, 1]`,
/// so `g` is strictly increasing in the inner product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub log_w1: Tensor,
    pub b1: Tensor,
    pub slope: Tensor,
    pub log_w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorVars {
    log_w1: Var,
    b1: Var,
    slope: Var,
    log_w2: Var,
    b2: Var,
}

impl Discriminator {
    pub fn new(hidden: usize, slope: f64, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Param("discriminator hidden width must be positive".into()));
        }
        if !(slope > 0.0 && slope <= 1.0) {
            return Err(Error::Param(format!("discriminator slope {slope} outside (0, 1]")));
        }
        let mut rng = seed::rng(seed);
        let log_w2 = gaussian(&mut rng, hidden, 1, 0.3).map(|v| v - 0.5 * (hidden as f64).ln());
        Ok(Discriminator {
            log_w1: gaussian(&mut rng, 1, hidden, 0.3),
            b1: gaussian(&mut rng, 1, hidden, 0.5),
            slope: Tensor::scalar(slope),
            log_w2,
            b2: Tensor::zeros(1, 1),
        })
    }

    pub fn hidden(&self) -> usize {
        self.log_w1.cols()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DiscriminatorVars {
        let mut put = |name: &str, t: &Tensor| {
            if trainable {
                tape.param(name, t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let vars = (put("disc.log_w1", &self.log_w1), put("disc.b1", &self.b1), put("disc.log_w2", &self.log_w2), put("disc.b2", &self.b2));
        DiscriminatorVars {
            log_w1: vars.0,
            b1: vars.1,
            slope: tape.constant(self.slope.clone()),
            log_w2: vars.2,
            b2: vars.3,
        }
    }

    /// Scores an `n×1` column of inner products.
    pub fn score_on_tape(&self, tape: &mut Tape, vars: &DiscriminatorVars, dots: Var) -> Result<Var> {
        let w1 = tape.exp(vars.log_w1);
        let w2 = tape.exp(vars.log_w2);
        let z = tape.matmul(dots, w1)?;
        let z = tape.add_row(z, vars.b1)?;
        let z = tape.prelu(z, vars.slope)?;
        let out = tape.matmul(z, w2)?;
        tape.add_row(out, vars.b2)
    }

    pub fn score_dot(&self, dot: f64) -> f64 {
        let a = self.slope.item();
        (0..self.hidden())
            .map(|j| {
                let z = dot * self.log_w1.get(0, j).exp() + self.b1.get(0, j);
                let z = if z > 0.0 { z } else { a * z };
                z * self.log_w2.get(j, 0).exp()
            })
            .sum::<f64>()
            + self.b2.item()
    }

    pub fn score(&self, a: &[f64], b: &[f64]) -> f64 {
        self.score_dot(a.iter().zip(b).map(|(x, y)| x * y).sum())
    }
}

impl Parameterized for Discriminator {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("disc.log_w1", &self.log_w1);
        f("disc.b1", &self.b1);
        f("disc.log_w2", &self.log_w2);
        f("disc.b2", &self.b2);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("disc.log_w1", &mut self.log_w1);
        f("disc.b1", &mut self.b1);
        f("disc.log_w2", &mut self.log_w2);
        f("disc.b2", &mut self.b2);
    }
}

/// `(u, v⁺, v⁻)`; the link indicator is implicit in the slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Quadruple {
    pub u: usize,
    pub v_plus: usize,
    pub v_minus: usize,
}

/// Draws up to `count` quadruples with distinct `(u, v⁺)` orientations.
/// Only receivers with at least one non-neighbour are eligible.
pub fn sample_quadruples(g: &Graph, count: usize, seed: u64) -> Result<Vec<Quadruple>> {
    let n = g.node_count();
    let oriented: Vec<(usize, usize)> = g
        .edges()
        .iter()
        .flat_map(|&(a, b)| [(a, b), (b, a)])
        .filter(|&(u, _)| g.degree(u) + 1 < n)
        .collect();
    if oriented.is_empty() {
        return Err(Error::Sampling(if g.edge_count() == 0 {
            format!("graph `{}` has no edges", g.domain())
        } else {
            format!("graph `{}` has no node with a non-neighbour", g.domain())
        }));
    }
    let mut rng = seed::rng(seed);
    let take = count.min(oriented.len());
    let mut picks: Vec<usize> = sample(&mut rng, oriented.len(), take).into_vec();
    picks.sort_unstable();
    let mut out = Vec::with_capacity(take);
    for i in picks {
        let (u, v_plus) = oriented[i];
        let negatives: Vec<usize> = (0..n).filter(|&w| w != u && !g.has_edge(u, w)).collect();
        let &v_minus = negatives.choose(&mut rng).expect("eligible receivers have a non-neighbour");
        out.push(Quadruple { u, v_plus, v_minus });
    }
    Ok(out)
}

/// `-log softmax([s⁺, s⁻]/τ)[0]` averaged over pairs.
pub fn contrastive_loss(pos: &[f64], neg: &[f64], tau: f64) -> f64 {
    let terms: Vec<f64> = pos
        .iter()
        .zip(neg)
        .map(|(&p, &q)| {
            let (a, b) = (p / tau, q / tau);
            let m = a.max(b);
            m + ((a - m).exp() + (b - m).exp()).ln() - a
        })
        .collect();
    terms.iter().sum::<f64>() / terms.len().max(1) as f64
}

/// Contrastive term plus `λ·mi`.
pub fn pretrain_loss(pos: &[f64], neg: &[f64], tau: f64, lambda: f64, mi: f64) -> f64 {
    contrastive_loss(pos, neg, tau) + lambda * mi
}

/// Sum (not mean) over rows of `-log softmax([s⁺, s⁻]/τ)[0]` recorded on the tape.
pub fn contrastive_sum_on_tape(tape: &mut Tape, pos: Var, neg: Var, tau: f64) -> Result<Var> {
    let n = tape.value(pos).rows();
    let logits = tape.concat(&[pos, neg], Axis::Cols)?;
    let p = tape.softmax_rows(logits, tau)?;
    let logp = tape.log(p)?;
    let mut mask = Tensor::zeros(n, 2);
    for i in 0..n {
        mask.set(i, 0, 1.0);
    }
    let mask = tape.constant(mask);
    let picked = tape.mul(logp, mask)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub lambda: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Quadruples per epoch, shared across graphs by edge count.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub disc_hidden: usize,
    pub seed: u64,
    pub encoder: EncoderConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lambda: 0.5,
            max_epochs: 10_000,
            patience: 50,
            batch_size: 128,
            lr: 0.005,
            weight_decay: 0.0,
            disc_hidden: 16,
            seed: 0,
            encoder: EncoderConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Param(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.patience == 0 {
            return Err(Error::Param("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch size must be at least 1".into()));
        }
        self.encoder.validate()
    }
}

/// Pre-trained parameters `Θ*`: aligners, encoder and discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainedModel {
    pub aligner: Aligner,
    pub encoder: DisentangledEncoder,
    pub discriminator: Discriminator,
}

impl Parameterized for PretrainedModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.aligner.visit_params(f);
        self.encoder.visit_params(f);
        self.discriminator.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.aligner.visit_params_mut(f);
        self.encoder.visit_params_mut(f);
        self.discriminator.visit_params_mut(f);
    }
}

impl PretrainedModel {
    /// Fresh parameters with every graph's domain registered.
    pub fn init(graphs: &[Graph], cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut aligner = Aligner::new(cfg.encoder.input_dim);
        for (i, g) in graphs.iter().enumerate() {
            aligner.register(g.domain(), &raw_input(g)?, seed::derive_path(cfg.seed, &[1, i as u64]))?;
        }
        Ok(PretrainedModel {
            aligner,
            encoder: DisentangledEncoder::new(cfg.encoder.clone(), seed::derive(cfg.seed, 2))?,
            discriminator: Discriminator::new(cfg.disc_hidden, cfg.encoder.prelu_slope, seed::derive(cfg.seed, 3))?,
        })
    }

    pub fn aligned_features(&self, g: &Graph) -> Result<Tensor> {
        self.aligner.apply(g.domain(), &raw_input(g)?)
    }

    /// Final channel embeddings of every node of a registered graph.
    pub fn embed_graph(&self, g: &Graph) -> Result<ChannelEmbeddings> {
        self.encoder.embed(&self.aligned_features(g)?, &RoutingEdges::from_graph(g))
    }

    /// Cross-channel InfoNCE estimate over all nodes of `graphs`.
    pub fn mi_estimate(&self, graphs: &[Graph]) -> Result<f64> {
        let mut rows = Vec::new();
        for g in graphs {
            let emb = self.embed_graph(g)?;
            rows.extend((0..emb.node_count()).map(|u| emb.values.row_slice(u).to_vec()));
        }
        mi_regularizer(&Tensor::from_rows(&rows)?, self.encoder.config.channels, self.encoder.config.tau)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Loss of every epoch before its update.
    pub losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl PretrainLog {
    /// Running minimum of the loss series.
    pub fn best_series(&self) -> Vec<f64> {
        self.losses
            .iter()
            .scan(f64::INFINITY, |best, &l| {
                *best = best.min(l);
                Some(*best)
            })
            .collect()
    }
}

struct Prepared<'a> {
    graph: &'a Graph,
    projected: Tensor,
    edges: RoutingEdges,
}

/// Splits `total` over graphs proportionally to their edge counts (largest
/// remainder, ties to the earlier graph).
fn allocate(edge_counts: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = edge_counts.iter().sum();
    if sum == 0 {
        return vec![0; edge_counts.len()];
    }
    let exact: Vec<f64> = edge_counts.iter().map(|&e| total as f64 * e as f64 / sum as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = total - out.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    out
}

fn epoch_loss(
    model: &PretrainedModel,
    prepared: &[Prepared],
    quads: &[Vec<Quadruple>],
    lambda: f64,
) -> Result<(Tape, Var)> {
    let mut tape = Tape::new();
    let enc_vars = model.encoder.bind(&mut tape, true);
    let disc_vars = model.discriminator.bind(&mut tape, true);
    let tau = model.encoder.config.tau;
    let mut contrast = Vec::new();
    let mut batch_rows = Vec::new();
    let mut total = 0;
    for (p, qs) in prepared.iter().zip(quads) {
        if qs.is_empty() {
            continue;
        }
        total += qs.len();
        let proj = tape.constant(p.projected.clone());
        let x = model.aligner.apply_on_tape(&mut tape, p.graph.domain(), proj, true)?;
        let h = model.encoder.forward_on_tape(&mut tape, &enc_vars, x, &p.edges)?.embeddings;
        let us: Vec<usize> = qs.iter().map(|q| q.u).collect();
        let hu = tape.gather_rows(h, &us)?;
        let hp = tape.gather_rows(h, &qs.iter().map(|q| q.v_plus).collect::<Vec<_>>())?;
        let hn = tape.gather_rows(h, &qs.iter().map(|q| q.v_minus).collect::<Vec<_>>())?;
        let sp = tape.row_dot(hu, hp)?;
        let sn = tape.row_dot(hu, hn)?;
        let gp = model.discriminator.score_on_tape(&mut tape, &disc_vars, sp)?;
        let gn = model.discriminator.score_on_tape(&mut tape, &disc_vars, sn)?;
        contrast.push(contrastive_sum_on_tape(&mut tape, gp, gn, tau)?);
        let unique: Vec<usize> = us.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        batch_rows.push(tape.gather_rows(h, &unique)?);
    }
    if total == 0 {
        return Err(Error::Sampling("no quadruples could be drawn".into()));
    }
    let stacked = tape.concat(&contrast, Axis::Cols)?;
    let sum = tape.sum(stacked);
    let mut loss = tape.scale(sum, 1.0 / total as f64);
    if lambda > 0.0 {
        let batch = tape.concat(&batch_rows, Axis::Rows)?;
        let mi = mi_regularizer_on_tape(&mut tape, batch, model.encoder.config.channels, tau)?;
        let weighted = tape.scale(mi, lambda);
        loss = tape.add(loss, weighted)?;
    }
    Ok((tape, loss))
}

fn fill_missing(model: &dyn Parameterized, grads: &mut Gradients) {
    model.visit_params(&mut |name, p| {
        grads
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
    });
}

/// Trains `Θ` from scratch on `graphs`; returns the best-loss parameters.
pub fn pretrain(graphs: &[Graph], cfg: &PretrainConfig) -> Result<(PretrainedModel, PretrainLog)> {
    let model = PretrainedModel::init(graphs, cfg)?;
    pretrain_from(model, graphs, cfg)
}

/// Continues training an initialised model.
pub fn pretrain_from(
    mut model: PretrainedModel,
    graphs: &[Graph],
    cfg: &PretrainConfig,
) -> Result<(PretrainedModel, PretrainLog)> {
    cfg.validate()?;
    let prepared: Vec<Prepared> = graphs
        .iter()
        .map(|g| {
            Ok(Prepared {
                graph: g,
                projected: model.aligner.project(g.domain(), &raw_input(g)?)?,
                edges: RoutingEdges::from_graph(g),
            })
        })
        .collect::<Result<_>>()?;
    let shares = allocate(&graphs.iter().map(Graph::edge_count).collect::<Vec<_>>(), cfg.batch_size);

    let mut adam = AdamState::new(cfg.lr, cfg.weight_decay);
    let mut log = PretrainLog::default();
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let quads: Vec<Vec<Quadruple>> = graphs
            .iter()
            .zip(&shares)
            .enumerate()
            .map(|(i, (g, &share))| {
                if share == 0 {
                    Ok(Vec::new())
                } else {
                    sample_quadruples(g, share, seed::derive_path(cfg.seed, &[4, epoch as u64, i as u64]))
                }
            })
            .collect::<Result<_>>()?;
        let (tape, loss) = epoch_loss(&model, &prepared, &quads, cfg.lambda)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Contract(format!("pre-training loss became non-finite at epoch {epoch}")));
        }
        log.losses.push(value);
        if value < best_loss {
            best_loss = value;
            best = model.clone();
            log.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
        let mut grads = tape.backward(loss)?;
        fill_missing(&model, &mut grads);
        adam.step(&mut model, &grads)?;
    }
    if log.losses.is_empty() {
        best = model;
    }
    log::info!(
        "pre-training finished after {} epochs, best loss {:.5}",
        log.losses.len(),
        best_loss
    );
    Ok((best, log))
}

/// Versioned JSON checkpoint. `config` carries the run configuration that
/// produced it, opaque to this module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub lambda: f64,
    pub model: PretrainedModel,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: PretrainedModel, lambda: f64, config: serde_json::Value) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            lambda,
            model,
            config,
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
    let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let ckpt: Checkpoint =
        serde_json::from_value(raw).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
    let mut bad = None;
    ckpt.model.visit_params(&mut |name, t| {
        if !t.is_finite() && bad.is_none() {
            bad = Some(name.to_string());
        }
    });
    if let Some(name) = bad {
        return Err(Error::Corrupt(format!("parameter `{name}` holds non-finite values")));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::graph::{synth_motif_dataset, BackboneSpec, FeatureProfile, MotifKind, MotifSpec};

    fn plain(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::new(n, edges.iter().copied(), Tensor::ones(n, 2), BTreeMap::new(), 0, "d").unwrap()
    }

    fn small_cfg(seed: u64) -> PretrainConfig {
        PretrainConfig {
            max_epochs: 40,
            batch_size: 32,
            lr: 0.01,
            seed,
            encoder: EncoderConfig {
                input_dim: 8,
                hidden_dim: 16,
                channels: 4,
                iterations: 2,
                ..EncoderConfig::default()
            },
            ..PretrainConfig::default()
        }
    }

    fn motif_graph(seed: u64) -> Graph {
        let classes = [
            MotifSpec {
                kind: MotifKind::Triangle,
                repetitions: 6,
                attachment: Default::default(),
                feature_profile: FeatureProfile { mean: vec![1.0, 0.0, 0.0, 0.0], noise: 0.2 },
            },
            MotifSpec {
                kind: MotifKind::Ring { len: 5 },
                repetitions: 4,
                attachment: Default::default(),
                feature_profile: FeatureProfile { mean: vec![0.0, 1.0, 0.0, 0.0], noise: 0.2 },
            },
        ];
        synth_motif_dataset(&classes, &BackboneSpec::default(), "src", seed).unwrap()
    }

    #[test]
    fn two_node_path_has_no_negatives() {
        assert!(matches!(sample_quadruples(&plain(2, &[(0, 1)]), 4, 0), Err(Error::Sampling(_))));
        assert!(matches!(sample_quadruples(&plain(3, &[]), 4, 0), Err(Error::Sampling(_))));
    }

    #[test]
    fn triangle_negatives_are_forced() {
        let g = plain(4, &[(0, 1), (0, 2), (1, 2)]);
        let qs = sample_quadruples(&g, 10, 3).unwrap();
        assert_eq!(qs.len(), 6);
        assert!(qs.iter().all(|q| q.v_minus == 3 && g.has_edge(q.u, q.v_plus)));
        let pairs: BTreeSet<_> = qs.iter().map(|q| (q.u, q.v_plus)).collect();
        assert_eq!(pairs.len(), qs.len());
    }

    #[test]
    fn quadruples_reproducible() {
        let g = plain(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)]);
        let a = sample_quadruples(&g, 5, 17).unwrap();
        assert_eq!(a, sample_quadruples(&g, 5, 17).unwrap());
        for q in &a {
            assert!(g.has_edge(q.u, q.v_plus));
            assert!(!g.has_edge(q.u, q.v_minus) && q.u != q.v_minus);
        }
    }

    #[test]
    fn loss_examples() {
        assert!((contrastive_loss(&[0.7, -0.2], &[0.7, -0.2], 0.5) - 2f64.ln()).abs() < 1e-12);
        let expected = -((2f64).exp() / ((2f64).exp() + (-1f64).exp())).ln();
        assert!((pretrain_loss(&[2.0], &[-1.0], 1.0, 0.0, 9.0) - expected).abs() < 1e-12);
        assert!((pretrain_loss(&[2.0], &[-1.0], 1.0, 0.5, 2.0) - expected - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tape_contrastive_matches_scalar() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::matrix(2, 1, vec![2.0, 0.3]).unwrap());
        let n = tape.constant(Tensor::matrix(2, 1, vec![-1.0, 0.5]).unwrap());
        let s = contrastive_sum_on_tape(&mut tape, p, n, 0.5).unwrap();
        let want = 2.0 * contrastive_loss(&[2.0, 0.3], &[-1.0, 0.5], 0.5);
        assert!((tape.value(s).item() - want).abs() < 1e-12);
    }

    #[test]
    fn discriminator_tape_matches_scalar() {
        let d = Discriminator::new(5, 0.25, 4).unwrap();
        let mut tape = Tape::new();
        let vars = d.bind(&mut tape, false);
        let dots = tape.constant(Tensor::matrix(3, 1, vec![-1.0, 0.2, 3.0]).unwrap());
        let out = d.score_on_tape(&mut tape, &vars, dots).unwrap();
        for (i, x) in [-1.0, 0.2, 3.0].into_iter().enumerate() {
            assert!((tape.value(out).get(i, 0) - d.score_dot(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn allocation_sums_to_total() {
        assert_eq!(allocate(&[10, 30], 8), vec![2, 6]);
        assert_eq!(allocate(&[1, 1, 1], 4), vec![2, 1, 1]);
        assert_eq!(allocate(&[0, 5], 3), vec![0, 3]);
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let g = motif_graph(1);
        let mut cfg = small_cfg(3);
        cfg.max_epochs = 0;
        let (model, log) = pretrain(std::slice::from_ref(&g), &cfg).unwrap();
        assert_eq!(model, PretrainedModel::init(&[g], &cfg).unwrap());
        assert!(log.losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_bookkept() {
        let g = motif_graph(2);
        let cfg = small_cfg(5);
        let (a, log_a) = pretrain(std::slice::from_ref(&g), &cfg).unwrap();
        let (b, log_b) = pretrain(std::slice::from_ref(&g), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        let best = log_a.best_series();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
        assert!(best.last().unwrap() < &log_a.losses[0]);
    }

    #[test]
    fn early_stop_triggers_on_patience() {
        let g = motif_graph(2);
        let mut cfg = small_cfg(5);
        cfg.lr = 0.0;
        cfg.patience = 3;
        cfg.max_epochs = 100;
        let (_, log) = pretrain(&[g], &cfg).unwrap();
        assert!(log.stopped_early);
        assert!(log.losses.len() < 100);
    }

    #[test]
    fn contrastive_disc_gradient_ignores_lambda() {
        let g = motif_graph(4);
        let cfg = small_cfg(6);
        let model = PretrainedModel::init(std::slice::from_ref(&g), &cfg).unwrap();
        let prepared = vec![Prepared {
            graph: &g,
            projected: model.aligner.project(g.domain(), &raw_input(&g).unwrap()).unwrap(),
            edges: RoutingEdges::from_graph(&g),
        }];
        let quads = vec![sample_quadruples(&g, 16, 1).unwrap()];
        let grad = |lambda| {
            let (tape, loss) = epoch_loss(&model, &prepared, &quads, lambda).unwrap();
            tape.backward(loss).unwrap()
        };
        let (g0, g1) = (grad(0.0), grad(0.7));
        for name in ["disc.log_w1", "disc.b1", "disc.log_w2", "disc.b2"] {
            assert!(g0[name].max_abs_diff(&g1[name]) < 1e-12, "{name}");
        }
        assert!(g0["encoder.weight"].max_abs_diff(&g1["encoder.weight"]) > 0.0);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let g = motif_graph(1);
        let cfg = small_cfg(1);
        let model = PretrainedModel::init(&[g], &cfg).unwrap();
        let ckpt = Checkpoint::new(model, 0.5, serde_json::json!({"m": 1}));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);

        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt(_))));
        fs::write(&path, text.replacen("\"version\":1", "\"version\":7", 1)).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Version { found: 7, .. })));
    }
}

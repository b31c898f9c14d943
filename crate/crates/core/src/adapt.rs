//! Few-shot adaptation: MoE-CoE routing over the vocabulary bank, support
//! augmentation with composed vocabularies, a feature prompt, and
//! prototype classification with the frozen pre-trained encoder.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::align::{raw_input, Aligner, DomainAligner};
use crate::autodiff::{gaussian, AdamState, Axis, Gradients, Parameterized, Tape, Tensor, Var};
use crate::encoder::RoutingEdges;
use crate::error::{Error, Result};
use crate::graph::{ego_graph, max_degree_node, Graph};
use crate::pretrain::PretrainedModel;
use crate::seed;
use crate::vocab::{generate, FeatureGraphon, GeneratedVocab, StructureGraphon, VocabBank};

/// `S_M` over source domains and one `S_C` per domain over its classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingWeights {
    pub s_m: Vec<f64>,
    pub s_c: Vec<Vec<f64>>,
}

impl RoutingWeights {
    pub fn uniform(class_counts: &[usize]) -> Self {
        let n = class_counts.len();
        RoutingWeights {
            s_m: vec![1.0 / n as f64; n],
            s_c: class_counts.iter().map(|&c| vec![1.0 / c as f64; c]).collect(),
        }
    }

    /// Flattened `S_M[i]·S_C⁽ⁱ⁾[c]` in bank order.
    pub fn mixture(&self) -> Vec<f64> {
        self.s_m
            .iter()
            .zip(&self.s_c)
            .flat_map(|(&m, c)| c.iter().map(move |&w| m * w))
            .collect()
    }
}

/// Bank view used by the router: domain order, class lists and the
/// flattened graphon stacks.
#[derive(Clone, Debug)]
pub struct BankIndex {
    pub domains: Vec<String>,
    pub class_counts: Vec<usize>,
    pub n_prime: usize,
    pub feature_dim: usize,
    /// `1×d` mean of each domain's pooled feature graphons.
    domain_pools: Vec<Tensor>,
    structures: Vec<StructureGraphon>,
    /// `P × (n′·d)`, one flattened feature graphon per entry.
    feature_stack: Tensor,
}

impl BankIndex {
    pub fn new(bank: &VocabBank) -> Result<Self> {
        if bank.is_empty() {
            return Err(Error::Contract("vocabulary bank is empty".into()));
        }
        let domains = bank.domains();
        let mut class_counts = Vec::new();
        let mut domain_pools = Vec::new();
        let mut structures = Vec::new();
        let mut rows = Vec::new();
        for dom in &domains {
            let entries = bank.domain_entries(dom);
            class_counts.push(entries.len());
            let d = bank.feature_dim();
            let mut pool = vec![0.0; d];
            for e in &entries {
                for (p, v) in pool.iter_mut().zip(e.features.pooled()) {
                    *p += v / entries.len() as f64;
                }
                structures.push(e.structure.clone());
                rows.push(e.features.matrix().values().to_vec());
            }
            domain_pools.push(Tensor::row(pool));
        }
        Ok(BankIndex {
            domains,
            class_counts,
            n_prime: bank.n_prime(),
            feature_dim: bank.feature_dim(),
            domain_pools,
            structures,
            feature_stack: Tensor::from_rows(&rows)?,
        })
    }

    pub fn max_classes(&self) -> usize {
        self.class_counts.iter().copied().max().unwrap_or(0)
    }

    /// Convex mixture of the bank graphons under `weights`.
    pub fn mix(&self, weights: &RoutingWeights) -> Result<(StructureGraphon, FeatureGraphon)> {
        if weights.s_m.len() != self.domains.len()
            || weights.s_c.iter().map(Vec::len).ne(self.class_counts.iter().copied())
        {
            return Err(Error::Contract("routing weights do not match the bank layout".into()));
        }
        let w = weights.mixture();
        let n = self.n_prime;
        let mut a = Tensor::zeros(n, n);
        for (s, wt) in self.structures.iter().zip(&w) {
            a.add_assign(&s.matrix().scale(*wt))?;
        }
        let x = Tensor::row(w).matmul(&self.feature_stack)?.reshaped(n, self.feature_dim)?;
        Ok((StructureGraphon::new(a)?, FeatureGraphon::new(x)?))
    }
}

/// Router `φ` networks with the expert heads `W_M`, `W_C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoECoERouter {
    pub phi_m_weight: Tensor,
    pub phi_m_bias: Tensor,
    pub phi_m_slope: Tensor,
    /// `h_r × n`.
    pub w_m: Tensor,
    pub phi_c_weight: Tensor,
    pub phi_c_bias: Tensor,
    pub phi_c_slope: Tensor,
    /// `h_r × C_max`; domain `i` reads its first `C_i` columns.
    pub w_c: Tensor,
}

const ROUTER_NAMES: [&str; 8] = [
    "router.phi_m.weight",
    "router.phi_m.bias",
    "router.phi_m.slope",
    "router.w_m",
    "router.phi_c.weight",
    "router.phi_c.bias",
    "router.phi_c.slope",
    "router.w_c",
];

#[derive(Clone, Copy, Debug)]
struct RouterVars {
    phi_m_weight: Var,
    phi_m_bias: Var,
    phi_m_slope: Var,
    w_m: Var,
    phi_c_weight: Var,
    phi_c_bias: Var,
    phi_c_slope: Var,
    w_c: Var,
}

impl MoECoERouter {
    /// Expert heads start at zero, so the first routing is uniform.
    pub fn new(d: usize, hidden: usize, domains: usize, max_classes: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        MoECoERouter {
            phi_m_weight: gaussian(&mut rng, d, hidden, 1.0 / (d as f64).sqrt()),
            phi_m_bias: Tensor::zeros(1, hidden),
            phi_m_slope: Tensor::scalar(0.25),
            w_m: Tensor::zeros(hidden, domains),
            phi_c_weight: gaussian(&mut rng, 2 * d, hidden, 1.0 / (2.0 * d as f64).sqrt()),
            phi_c_bias: Tensor::zeros(1, hidden),
            phi_c_slope: Tensor::scalar(0.25),
            w_c: Tensor::zeros(hidden, max_classes),
        }
    }

    pub fn for_bank(index: &BankIndex, hidden: usize, seed: u64) -> Self {
        Self::new(index.feature_dim, hidden, index.domains.len(), index.max_classes(), seed)
    }

    fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.phi_m_weight,
            &self.phi_m_bias,
            &self.phi_m_slope,
            &self.w_m,
            &self.phi_c_weight,
            &self.phi_c_bias,
            &self.phi_c_slope,
            &self.w_c,
        ]
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> RouterVars {
        let v: Vec<Var> = ROUTER_NAMES
            .iter()
            .zip(self.tensors())
            .map(|(name, t)| {
                if trainable {
                    tape.param(name, t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        RouterVars {
            phi_m_weight: v[0],
            phi_m_bias: v[1],
            phi_m_slope: v[2],
            w_m: v[3],
            phi_c_weight: v[4],
            phi_c_bias: v[5],
            phi_c_slope: v[6],
            w_c: v[7],
        }
    }

    fn route_on_tape(&self, tape: &mut Tape, vars: &RouterVars, index: &BankIndex, x_hat: Var) -> Result<(Var, Vec<Var>)> {
        let pool = tape.mean_rows(x_hat)?;
        let z = tape.matmul(pool, vars.phi_m_weight)?;
        let z = tape.add_row(z, vars.phi_m_bias)?;
        let z = tape.prelu(z, vars.phi_m_slope)?;
        let logits = tape.matmul(z, vars.w_m)?;
        let s_m = tape.softmax_rows(logits, 1.0)?;
        let c_max = index.max_classes();
        let mut s_c = Vec::new();
        for (dom_pool, &c) in index.domain_pools.iter().zip(&index.class_counts) {
            let dp = tape.constant(dom_pool.clone());
            let input = tape.concat(&[pool, dp], Axis::Cols)?;
            let z = tape.matmul(input, vars.phi_c_weight)?;
            let z = tape.add_row(z, vars.phi_c_bias)?;
            let z = tape.prelu(z, vars.phi_c_slope)?;
            let mut logits = tape.matmul(z, vars.w_c)?;
            if c < c_max {
                let mut pick = Tensor::zeros(c_max, c);
                for k in 0..c {
                    pick.set(k, k, 1.0);
                }
                let pick = tape.constant(pick);
                logits = tape.matmul(logits, pick)?;
            }
            s_c.push(tape.softmax_rows(logits, 1.0)?);
        }
        Ok((s_m, s_c))
    }
}

impl Parameterized for MoECoERouter {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (name, t) in ROUTER_NAMES.iter().zip(self.tensors()) {
            f(name, t);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let MoECoERouter {
            phi_m_weight,
            phi_m_bias,
            phi_m_slope,
            w_m,
            phi_c_weight,
            phi_c_bias,
            phi_c_slope,
            w_c,
        } = self;
        let all = [phi_m_weight, phi_m_bias, phi_m_slope, w_m, phi_c_weight, phi_c_bias, phi_c_slope, w_c];
        for (name, t) in ROUTER_NAMES.iter().zip(all) {
            f(name, t);
        }
    }
}

/// Routing weights for one sample's aligned features.
pub fn route_weights(x_hat: &Tensor, index: &BankIndex, router: &MoECoERouter) -> Result<RoutingWeights> {
    let mut tape = Tape::new();
    let vars = router.bind(&mut tape, false);
    let x = tape.constant(x_hat.clone());
    let (s_m, s_c) = router.route_on_tape(&mut tape, &vars, index, x)?;
    Ok(RoutingWeights {
        s_m: tape.value(s_m).values().to_vec(),
        s_c: s_c.iter().map(|&v| tape.value(v).values().to_vec()).collect(),
    })
}

/// Mixes the bank graphons under `weights` and samples one vocabulary.
pub fn compose_vocabulary(index: &BankIndex, weights: &RoutingWeights, seed: u64) -> Result<GeneratedVocab> {
    let (a, x) = index.mix(weights)?;
    generate(&a, &x, seed)
}

/// How a vocabulary is glued onto a support graph: vocab hub `hub` merges
/// into support node `anchor`, the other vocab nodes are appended in id order.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPlan {
    pub anchor: usize,
    pub hub: usize,
    pub appended: Vec<usize>,
    pub node_count: usize,
    pub edges: Vec<(usize, usize)>,
}

pub fn augment_plan(support: &Graph, vocab: &GeneratedVocab) -> Result<AugmentPlan> {
    let anchor = max_degree_node(support)?;
    let n = vocab.node_count();
    let degree: Vec<f64> = (0..n).map(|i| vocab.adjacency.row_slice(i).iter().sum()).collect();
    let mut hub = 0;
    for i in 1..n {
        if degree[i] > degree[hub] {
            hub = i;
        }
    }
    let appended: Vec<usize> = (0..n).filter(|&i| i != hub).collect();
    let base = support.node_count();
    let map = |i: usize| {
        if i == hub {
            anchor
        } else {
            base + appended.binary_search(&i).expect("non-hub vocab node")
        }
    };
    let mut edges: Vec<(usize, usize)> = support.edges().to_vec();
    edges.extend(vocab.edges().into_iter().map(|(i, j)| {
        let (a, b) = (map(i), map(j));
        (a.min(b), a.max(b))
    }));
    edges.sort_unstable();
    edges.dedup();
    Ok(AugmentPlan {
        anchor,
        hub,
        node_count: base + appended.len(),
        appended,
        edges,
    })
}

/// `G ⊕ (Ã, X̃)`: overlap on the max-degree nodes, merged node keeps the
/// support features.
pub fn augment(support: &Graph, vocab: &GeneratedVocab) -> Result<Graph> {
    if vocab.features.cols() != support.feature_dim() {
        return Err(Error::shape("augment", support.features().shape(), vocab.features.shape()));
    }
    let plan = augment_plan(support, vocab)?;
    let mut rows: Vec<Vec<f64>> = (0..support.node_count()).map(|u| support.features().row_slice(u).to_vec()).collect();
    rows.extend(plan.appended.iter().map(|&i| vocab.features.row_slice(i).to_vec()));
    let features = Tensor::from_rows(&rows)?;
    Graph::new(
        plan.node_count,
        plan.edges,
        features,
        support.labels().clone(),
        support.class_count(),
        support.domain(),
    )
}

/// Additive feature prompt shared by every node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphPrompt {
    pub p: Tensor,
}

impl GraphPrompt {
    pub fn zeros(d: usize) -> Self {
        GraphPrompt { p: Tensor::zeros(1, d) }
    }
}

impl Parameterized for GraphPrompt {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("prompt", &self.p);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("prompt", &mut self.p);
    }
}

/// `X' = X + 1·pᵀ`.
pub fn apply_prompt(g: &Graph, prompt: &GraphPrompt) -> Result<Graph> {
    let d = g.feature_dim();
    if prompt.p.dims() != (1, d) {
        return Err(Error::shape("apply_prompt", prompt.p.shape(), &[1, d]));
    }
    let mut x = g.features().clone();
    for u in 0..x.rows() {
        for (v, p) in x.row_slice_mut(u).iter_mut().zip(prompt.p.values()) {
            *v += p;
        }
    }
    g.with_features(x)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `H(S_M) + n·mean_i H(S_C⁽ⁱ⁾)`, with `0·log 0 = 0`.
pub fn moe_coe_loss(s_m: &[f64], s_c: &[Vec<f64>], n: usize) -> f64 {
    let coe = if s_c.is_empty() {
        0.0
    } else {
        s_c.iter().map(|c| entropy(c)).sum::<f64>() / s_c.len() as f64
    };
    entropy(s_m) + n as f64 * coe
}

fn entropy_on_tape(tape: &mut Tape, s: Var) -> Result<Var> {
    let logs = tape.log(s)?;
    let prod = tape.mul(s, logs)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, -1.0))
}

fn moe_coe_on_tape(tape: &mut Tape, s_m: Var, s_c: &[Var]) -> Result<Var> {
    let n = tape.value(s_m).cols();
    let mut loss = entropy_on_tape(tape, s_m)?;
    if !s_c.is_empty() {
        let hs: Vec<Var> = s_c.iter().map(|&s| entropy_on_tape(tape, s)).collect::<Result<_>>()?;
        let stacked = tape.concat(&hs, Axis::Cols)?;
        let sum = tape.sum(stacked);
        let coe = tape.scale(sum, n as f64 / s_c.len() as f64);
        loss = tape.add(loss, coe)?;
    }
    Ok(loss)
}

/// Per-class mean of embedding rows; `labels[i]` is the class of row `i`.
pub fn class_prototypes(h: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.len() != h.rows() {
        return Err(Error::shape("class_prototypes", h.shape(), &[labels.len()]));
    }
    let mut out = Tensor::zeros(classes, h.cols());
    for c in 0..classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            return Err(Error::Contract(format!("class {c} has no support sample")));
        }
        for &i in &idx {
            for (o, v) in out.row_slice_mut(c).iter_mut().zip(h.row_slice(i)) {
                *o += v / idx.len() as f64;
            }
        }
    }
    Ok(out)
}

/// Mean over rows of `-log softmax_c(scores/τ)[label]`.
pub fn cls_loss(scores: &Tensor, labels: &[usize], tau: f64) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row: Vec<f64> = scores.row_slice(i).iter().map(|s| s / tau).collect();
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            m + row.iter().map(|r| (r - m).exp()).sum::<f64>().ln() - row[y]
        })
        .sum();
    total / labels.len().max(1) as f64
}

/// Argmax with ties to the smallest class id.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = c;
        }
    }
    best
}

/// One few-shot sample: a 2-hop ego-graph with raw inputs, center at 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub graph: Graph,
}

impl Sample {
    pub fn around(g: &Graph, u: usize, hops: usize) -> Result<Self> {
        let ego = ego_graph(g, u, hops)?;
        let raw = raw_input(g)?;
        let graph = Graph::new(
            ego.len(),
            ego.edges.iter().copied(),
            raw.select_rows(&ego.nodes),
            BTreeMap::new(),
            0,
            g.domain(),
        )?;
        Ok(Sample { graph })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub mu: f64,
    pub shots: usize,
    pub max_episodes: usize,
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub router_hidden: usize,
    pub hops: usize,
    /// Augmentation draws averaged into the inference prototypes.
    pub inference_draws: usize,
    pub seed: u64,
    pub sip_off: bool,
    pub va_off: bool,
    pub mc_uniform: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mu: 0.5,
            shots: 1,
            max_episodes: 1000,
            patience: 50,
            lr: 0.01,
            weight_decay: 0.0,
            router_hidden: 32,
            hops: 2,
            inference_draws: 4,
            seed: 0,
            sip_off: false,
            va_off: false,
            mc_uniform: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Param("shots must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Param("patience must be at least 1".into()));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::Param(format!("mu must be >= 0, got {}", self.mu)));
        }
        if self.hops == 0 || self.inference_draws == 0 {
            return Err(Error::Param("hops and inference draws must be positive".into()));
        }
        Ok(())
    }
}

/// Trained adapter plus the inference prototypes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptedState {
    pub target_domain: String,
    pub prompt: GraphPrompt,
    pub router: MoECoERouter,
    /// Trained aligner for a domain unseen during pre-training.
    pub target_aligner: Option<DomainAligner>,
    pub prototypes: Tensor,
    pub va_off: bool,
    pub mc_uniform: bool,
}

impl Parameterized for AdaptedState {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.prompt.visit_params(f);
        self.router.visit_params(f);
        if let Some(a) = &self.target_aligner {
            f(&Aligner::weight_name(&self.target_domain), &a.weight);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.prompt.visit_params_mut(f);
        self.router.visit_params_mut(f);
        if let Some(a) = &mut self.target_aligner {
            f(&Aligner::weight_name(&self.target_domain), &mut a.weight);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub losses: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    /// Episodes until the last training-accuracy improvement.
    pub episodes_to_converge: usize,
}

/// Frozen pieces shared by every forward pass of one fine-tuning run.
pub struct Adapter<'a> {
    pub model: &'a PretrainedModel,
    pub index: BankIndex,
    pub aligner: Aligner,
    pub cfg: FinetuneConfig,
}

struct Bound {
    enc: crate::encoder::EncoderVars,
    disc: crate::pretrain::DiscriminatorVars,
    router: RouterVars,
    prompt: Var,
    feature_stack: Var,
}

impl<'a> Adapter<'a> {
    /// Registers the target domain when it is unseen (basis fit on
    /// `target_raw`) and indexes the bank.
    pub fn new(model: &'a PretrainedModel, bank: &VocabBank, target_domain: &str, target_raw: &Tensor, cfg: FinetuneConfig) -> Result<Self> {
        cfg.validate()?;
        if bank.feature_dim() != model.encoder.config.input_dim {
            return Err(Error::shape("bank", &[bank.feature_dim()], &[model.encoder.config.input_dim]));
        }
        let mut aligner = model.aligner.clone();
        aligner.register(target_domain, target_raw, seed::derive(cfg.seed, 11))?;
        Ok(Adapter {
            model,
            index: BankIndex::new(bank)?,
            aligner,
            cfg,
        })
    }

    fn seen(&self, domain: &str) -> bool {
        self.model.aligner.contains(domain)
    }

    pub fn initial_state(&self, target_domain: &str) -> AdaptedState {
        AdaptedState {
            target_domain: target_domain.to_string(),
            prompt: GraphPrompt::zeros(self.model.encoder.config.input_dim),
            router: MoECoERouter::for_bank(&self.index, self.cfg.router_hidden, seed::derive(self.cfg.seed, 12)),
            target_aligner: if self.seen(target_domain) {
                None
            } else {
                self.aligner.domain(target_domain).cloned()
            },
            prototypes: Tensor::zeros(0, 0),
            va_off: self.cfg.va_off,
            mc_uniform: self.cfg.mc_uniform,
        }
    }

    fn bind(&self, tape: &mut Tape, state: &AdaptedState) -> Bound {
        Bound {
            enc: self.model.encoder.bind(tape, false),
            disc: self.model.discriminator.bind(tape, false),
            router: state.router.bind(tape, !state.mc_uniform && !state.va_off),
            prompt: tape.param("prompt", state.prompt.p.clone()),
            feature_stack: tape.constant(self.index.feature_stack.clone()),
        }
    }

    fn aligned_on_tape(&self, tape: &mut Tape, state: &AdaptedState, sample: &Sample) -> Result<Var> {
        let domain = sample.graph.domain();
        let proj = tape.constant(self.aligner.project(domain, sample.graph.features())?);
        match (&state.target_aligner, domain == state.target_domain) {
            (Some(a), true) => {
                let w = tape.param(&Aligner::weight_name(domain), a.weight.clone());
                let wt = tape.transpose(w);
                tape.matmul(proj, wt)
            }
            _ => self.aligner.apply_on_tape(tape, domain, proj, false),
        }
    }

    /// Center embedding of one sample, `1×h`, with optional augmentation.
    /// Returns the routing simplices when they were learned.
    fn embed_on_tape(
        &self,
        tape: &mut Tape,
        state: &AdaptedState,
        b: &Bound,
        sample: &Sample,
        augment_seed: Option<u64>,
    ) -> Result<(Var, Option<(Var, Vec<Var>)>)> {
        let x = self.aligned_on_tape(tape, state, sample)?;
        let mut feats = x;
        let mut nodes = sample.graph.node_count();
        let mut edges = sample.graph.edges().to_vec();
        let mut simplices = None;
        if let Some(s) = augment_seed {
            let (weights, mix) = if state.mc_uniform {
                let w = RoutingWeights::uniform(&self.index.class_counts);
                let mix = tape.constant(Tensor::row(w.mixture()));
                (w, mix)
            } else {
                let (s_m, s_c) = state.router.route_on_tape(tape, &b.router, &self.index, x)?;
                let parts: Vec<Var> = s_c
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let mut pick = Tensor::zeros(1, self.index.domains.len());
                        pick.set(0, i, 1.0);
                        let pick = tape.constant(pick);
                        let m_i = tape.mul(s_m, pick)?;
                        let m_i = tape.sum(m_i);
                        let ones = tape.constant(Tensor::ones(1, tape.value(c).cols()));
                        let spread = tape.matmul(m_i, ones)?;
                        tape.mul(spread, c)
                    })
                    .collect::<Result<_>>()?;
                let mix = tape.concat(&parts, Axis::Cols)?;
                let w = RoutingWeights {
                    s_m: tape.value(s_m).values().to_vec(),
                    s_c: s_c.iter().map(|&v| tape.value(v).values().to_vec()).collect(),
                };
                simplices = Some((s_m, s_c));
                (w, mix)
            };
            let (structure, features) = self.index.mix(&weights)?;
            let vocab = generate(&structure, &features, s)?;
            let plan = augment_plan(&sample.graph, &vocab)?;
            if !plan.appended.is_empty() {
                let flat = tape.matmul(mix, b.feature_stack)?;
                let grid = tape.reshape(flat, self.index.n_prime, self.index.feature_dim)?;
                let picked: Vec<usize> = plan.appended.iter().map(|&i| vocab.cells[i]).collect();
                let extra = tape.gather_rows(grid, &picked)?;
                feats = tape.concat(&[x, extra], Axis::Rows)?;
            }
            nodes = plan.node_count;
            edges = plan.edges;
        }
        let prompted = tape.add_row(feats, b.prompt)?;
        let routed = self
            .model
            .encoder
            .forward_on_tape(tape, &b.enc, prompted, &RoutingEdges::new(nodes, &edges))?;
        Ok((tape.gather_rows(routed.embeddings, &[0])?, simplices))
    }

    fn augment_seed(&self, epoch: u64, draw: u64, i: usize) -> Option<u64> {
        (!self.cfg.va_off).then(|| seed::derive_path(self.cfg.seed, &[13, epoch, draw, i as u64]))
    }

    /// Discriminator scores of every row of `h` against every prototype row.
    fn scores_on_tape(&self, tape: &mut Tape, b: &Bound, h: Var, protos: Var) -> Result<Var> {
        let (n, c) = (tape.value(h).rows(), tape.value(protos).rows());
        let pt = tape.transpose(protos);
        let dots = tape.matmul(h, pt)?;
        let col = tape.reshape(dots, n * c, 1)?;
        let g = self.model.discriminator.score_on_tape(tape, &b.disc, col)?;
        tape.reshape(g, n, c)
    }

    fn training_loss(
        &self,
        state: &AdaptedState,
        support: &[(Sample, usize)],
        classes: usize,
        epoch: u64,
    ) -> Result<(Tape, Var, f64)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, state);
        let mut rows = Vec::new();
        let mut moe = Vec::new();
        for (i, (s, _)) in support.iter().enumerate() {
            let (h, simplices) = self.embed_on_tape(&mut tape, state, &b, s, self.augment_seed(epoch, 0, i))?;
            rows.push(h);
            if let Some((s_m, s_c)) = simplices {
                moe.push(moe_coe_on_tape(&mut tape, s_m, &s_c)?);
            }
        }
        let h = tape.concat(&rows, Axis::Rows)?;
        let protos: Vec<Var> = (0..classes)
            .map(|c| {
                let idx: Vec<usize> = (0..support.len()).filter(|&i| support[i].1 == c).collect();
                let sel = tape.gather_rows(h, &idx)?;
                tape.mean_rows(sel)
            })
            .collect::<Result<_>>()?;
        let protos = tape.concat(&protos, Axis::Rows)?;
        let scores = self.scores_on_tape(&mut tape, &b, h, protos)?;
        let tau = self.model.encoder.config.tau;
        let p = tape.softmax_rows(scores, tau)?;
        let logp = tape.log(p)?;
        let mut mask = Tensor::zeros(support.len(), classes);
        for (i, (_, y)) in support.iter().enumerate() {
            mask.set(i, *y, 1.0);
        }
        let mask = tape.constant(mask);
        let picked = tape.mul(logp, mask)?;
        let total = tape.sum(picked);
        let mut loss = tape.scale(total, -1.0 / support.len() as f64);
        if !moe.is_empty() && self.cfg.mu > 0.0 {
            let stacked = tape.concat(&moe, Axis::Cols)?;
            let sum = tape.sum(stacked);
            let reg = tape.scale(sum, self.cfg.mu / moe.len() as f64);
            loss = tape.add(loss, reg)?;
        }
        let s = tape.value(scores);
        let correct = support
            .iter()
            .enumerate()
            .filter(|(i, (_, y))| argmax(s.row_slice(*i)) == *y)
            .count();
        let acc = correct as f64 / support.len() as f64;
        Ok((tape, loss, acc))
    }

    /// Inference embedding of a sample, `h`-vector. Support samples may be
    /// augmented with draw `draw`; queries never are.
    pub fn embed(&self, state: &AdaptedState, sample: &Sample, augment_seed: Option<u64>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, state);
        let (h, _) = self.embed_on_tape(&mut tape, state, &b, sample, augment_seed)?;
        Ok(tape.value(h).values().to_vec())
    }

    /// Prototypes from support embeddings averaged over the inference draws.
    pub fn prototypes(&self, state: &AdaptedState, support: &[(Sample, usize)], classes: usize) -> Result<Tensor> {
        let draws = if state.va_off { 1 } else { self.cfg.inference_draws };
        let mut rows = Vec::new();
        for (i, (s, _)) in support.iter().enumerate() {
            let mut acc: Vec<f64> = Vec::new();
            for r in 0..draws {
                let seed = (!state.va_off).then(|| seed::derive_path(self.cfg.seed, &[14, r as u64, i as u64]));
                let h = self.embed(state, s, seed)?;
                if acc.is_empty() {
                    acc = vec![0.0; h.len()];
                }
                for (a, v) in acc.iter_mut().zip(h) {
                    *a += v / draws as f64;
                }
            }
            rows.push(acc);
        }
        let labels: Vec<usize> = support.iter().map(|(_, y)| *y).collect();
        class_prototypes(&Tensor::from_rows(&rows)?, &labels, classes)
    }

    /// Scores of a query against the stored prototypes.
    pub fn query_scores(&self, state: &AdaptedState, query: &Sample) -> Result<Vec<f64>> {
        let h = self.embed(state, query, None)?;
        Ok((0..state.prototypes.rows())
            .map(|c| self.model.discriminator.score(&h, state.prototypes.row_slice(c)))
            .collect())
    }

    pub fn predict(&self, state: &AdaptedState, query: &Sample) -> Result<usize> {
        Ok(argmax(&self.query_scores(state, query)?))
    }

    /// Trains prompt, router and (for unseen domains) the target aligner on
    /// the support set, then fixes the prototypes.
    pub fn finetune(&self, target_domain: &str, support: &[(Sample, usize)]) -> Result<(AdaptedState, FinetuneLog)> {
        if support.is_empty() {
            return Err(Error::Contract("support set is empty".into()));
        }
        let classes = support.iter().map(|(_, y)| y + 1).max().unwrap_or(0);
        for c in 0..classes {
            if !support.iter().any(|(_, y)| *y == c) {
                return Err(Error::Contract(format!("class {c} has no support sample")));
            }
        }
        let mut state = self.initial_state(target_domain);
        let mut adam = AdamState::new(self.cfg.lr, self.cfg.weight_decay);
        let mut log = FinetuneLog::default();
        let mut best = f64::NEG_INFINITY;
        let mut stale = 0;
        for epoch in 0..self.cfg.max_episodes {
            let (tape, loss, acc) = self.training_loss(&state, support, classes, epoch as u64)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Contract(format!("fine-tuning loss became non-finite at episode {epoch}")));
            }
            log.losses.push(value);
            log.train_accuracy.push(acc);
            let mut grads = tape.backward(loss)?;
            fill_missing(&state, &mut grads);
            adam.step(&mut state, &grads)?;
            if acc > best {
                best = acc;
                stale = 0;
                log.episodes_to_converge = epoch + 1;
            } else {
                stale += 1;
                if stale >= self.cfg.patience {
                    break;
                }
            }
        }
        state.prototypes = self.prototypes(&state, support, classes)?;
        Ok((state, log))
    }
}

fn fill_missing(model: &dyn Parameterized, grads: &mut Gradients) {
    model.visit_params(&mut |name, p| {
        grads
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
    });
}

pub const STATE_VERSION: u32 = 1;

/// Fine-tuned state file, same container layout as checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFile {
    pub version: u32,
    pub state: AdaptedState,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub fn save_state(state: &AdaptedState, config: serde_json::Value, path: impl AsRef<std::path::Path>) -> Result<()> {
    let file = StateFile {
        version: STATE_VERSION,
        state: state.clone(),
        config,
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_state(path: impl AsRef<std::path::Path>) -> Result<StateFile> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)
        .map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
    let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != STATE_VERSION {
        return Err(Error::Version {
            found,
            expected: STATE_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::BankEntry;

    fn tri(features: Tensor) -> Graph {
        let n = features.rows();
        Graph::new(n, [(0, 1), (0, 2), (1, 2)], features, BTreeMap::new(), 0, "t").unwrap()
    }

    fn vocab_from(adj: &[(usize, usize)], n: usize, d: usize) -> GeneratedVocab {
        let mut a = Tensor::zeros(n, n);
        for &(i, j) in adj {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        GeneratedVocab {
            adjacency: a,
            features: Tensor::filled(n, d, 9.0),
            cells: (0..n).collect(),
        }
    }

    fn bank(entries: &[(&str, usize, f64)], n: usize, d: usize) -> VocabBank {
        let mut b = VocabBank::new(n, d);
        for &(dom, class, p) in entries {
            b.insert(BankEntry {
                domain: dom.into(),
                class,
                count: 1,
                structure: StructureGraphon::new(Tensor::filled(n, n, p)).unwrap(),
                features: FeatureGraphon::new(Tensor::filled(n, d, p)).unwrap(),
            })
            .unwrap();
        }
        b
    }

    #[test]
    fn zero_router_is_uniform() {
        let b = bank(&[("a", 0, 0.1), ("a", 1, 0.2), ("a", 2, 0.3), ("b", 0, 0.4), ("b", 1, 0.5)], 3, 2);
        let idx = BankIndex::new(&b).unwrap();
        let mut r = MoECoERouter::for_bank(&idx, 4, 0);
        let w = route_weights(&Tensor::ones(3, 2), &idx, &r).unwrap();
        assert_eq!(w.s_m, vec![0.5, 0.5]);
        assert!(w.s_c[0].iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(w.s_c[1], vec![0.5, 0.5]);

        // engineered W_M: logits = φ·W_M
        r.phi_m_weight = Tensor::matrix(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        r.w_m = Tensor::matrix(4, 2, vec![2.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.5, 3.0, 1.5, -3.0]).unwrap();
        // pooled x = [1, 0] → φ = [1, 0, 0, 0] → logits (2, -1)
        let w = route_weights(&x, &idx, &r).unwrap();
        let z = (2f64).exp() + (-1f64).exp();
        assert!((w.s_m[0] - (2f64).exp() / z).abs() < 1e-12);
        assert!((w.s_m[1] - (-1f64).exp() / z).abs() < 1e-12);
    }

    #[test]
    fn single_domain_gets_full_weight() {
        let b = bank(&[("a", 0, 0.2), ("a", 1, 0.5)], 3, 2);
        let idx = BankIndex::new(&b).unwrap();
        let mut r = MoECoERouter::for_bank(&idx, 4, 1);
        r.w_m = Tensor::filled(4, 1, 3.0);
        let w = route_weights(&Tensor::ones(2, 2), &idx, &r).unwrap();
        assert_eq!(w.s_m, vec![1.0]);
    }

    #[test]
    fn mixture_examples() {
        let b = bank(&[("a", 0, 0.0), ("a", 1, 1.0)], 4, 1);
        let idx = BankIndex::new(&b).unwrap();
        let (a, _) = idx
            .mix(&RoutingWeights {
                s_m: vec![1.0],
                s_c: vec![vec![0.5, 0.5]],
            })
            .unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(a.matrix().get(i, j), if i == j { 0.0 } else { 0.5 });
            }
        }

        let b = bank(&[("a", 0, 0.1), ("a", 1, 0.2), ("b", 0, 0.6), ("b", 1, 0.9)], 3, 2);
        let idx = BankIndex::new(&b).unwrap();
        let w = RoutingWeights {
            s_m: vec![0.3, 0.7],
            s_c: vec![vec![0.6, 0.4], vec![0.6, 0.4]],
        };
        let (a, x) = idx.mix(&w).unwrap();
        let want = 0.3 * (0.6 * 0.1 + 0.4 * 0.2) + 0.7 * (0.6 * 0.6 + 0.4 * 0.9);
        assert!((a.matrix().get(0, 1) - want).abs() < 1e-12);
        assert!((x.matrix().get(2, 1) - want).abs() < 1e-12);
    }

    #[test]
    fn one_hot_mixture_reproduces_entry() {
        let b = bank(&[("a", 0, 0.3), ("a", 1, 0.8)], 5, 2);
        let idx = BankIndex::new(&b).unwrap();
        let w = RoutingWeights {
            s_m: vec![1.0],
            s_c: vec![vec![0.0, 1.0]],
        };
        let got = compose_vocabulary(&idx, &w, 7).unwrap();
        let want = b.entry("a", 1).unwrap().generate(7).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn augmentation_examples() {
        let support = tri(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let empty = augment(&support, &vocab_from(&[], 4, 1)).unwrap();
        assert_eq!(empty.node_count(), 6);
        assert_eq!(empty.edge_count(), 3);

        let edge = augment(&support, &vocab_from(&[(0, 1)], 2, 1)).unwrap();
        assert_eq!(edge.node_count(), 4);
        assert_eq!(edge.edge_count(), 4);
        assert!(edge.has_edge(0, 3));

        let both = augment(&support, &vocab_from(&[(0, 1), (0, 2), (1, 2)], 3, 1)).unwrap();
        assert_eq!(both.node_count(), 5);
        assert_eq!(both.edge_count(), 6);
        assert_eq!(both.degree(0), 4);
        assert_eq!(both.features().get(0, 0), 1.0);
        assert_eq!(both.features().get(4, 0), 9.0);
    }

    #[test]
    fn prompt_examples() {
        let g = tri(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        assert_eq!(apply_prompt(&g, &GraphPrompt::zeros(2)).unwrap(), g);
        let shifted = apply_prompt(&g, &GraphPrompt { p: Tensor::row(vec![0.5, -1.0]) }).unwrap();
        assert_eq!(shifted.features().values(), &[1.5, 1.0, 3.5, 3.0, 5.5, 5.0]);
        assert!(apply_prompt(&g, &GraphPrompt::zeros(3)).is_err());
    }

    #[test]
    fn moe_coe_anchors() {
        assert_eq!(moe_coe_loss(&[1.0, 0.0], &[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]], 2), 0.0);
        let third = 1.0 / 3.0;
        let v = moe_coe_loss(&[0.5, 0.5], &[vec![third; 3], vec![third; 3]], 2);
        assert!((v - (2f64.ln() + 2.0 * 3f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn prototype_and_loss_examples() {
        let h = Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0], vec![7.0, 7.0]]).unwrap();
        let p = class_prototypes(&h, &[0, 0, 1], 2).unwrap();
        assert_eq!(p.row_slice(0), &[2.0, 4.0]);
        assert_eq!(p.row_slice(1), &[7.0, 7.0]);
        assert!(class_prototypes(&h, &[0, 0, 0], 2).is_err());

        let s = Tensor::row(vec![1.0, -1.0]);
        let want = -((1f64).exp() / ((1f64).exp() + (-1f64).exp())).ln();
        assert!((cls_loss(&s, &[0], 1.0) - want).abs() < 1e-12);
        assert!((cls_loss(&Tensor::row(vec![0.3; 4]), &[2], 0.5) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(cls_loss(&Tensor::row(vec![5.0]), &[0], 0.5), 0.0);
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax(&[0.2, 0.9, 0.9]), 1);
        assert_eq!(argmax(&[4.0]), 0);
    }

    #[test]
    fn entropy_on_tape_matches_scalar() {
        let mut tape = Tape::new();
        let s_m = tape.constant(Tensor::row(vec![0.2, 0.8]));
        let s_c = vec![tape.constant(Tensor::row(vec![0.1, 0.6, 0.3])), tape.constant(Tensor::row(vec![0.5, 0.5]))];
        let v = moe_coe_on_tape(&mut tape, s_m, &s_c).unwrap();
        let want = moe_coe_loss(&[0.2, 0.8], &[vec![0.1, 0.6, 0.3], vec![0.5, 0.5]], 2);
        assert!((tape.value(v).item() - want).abs() < 1e-12);
    }
}

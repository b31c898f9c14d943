//! Factor-aware ego-graph disentanglement.
//!
//! Each node is projected into `K` channels, normalised with a norm floor,
//! then refined for `T` rounds of neighbour soft-routing: every neighbour
//! distributes a unit of attention over the channels according to how well
//! it agrees with the receiving node in each channel, and every channel
//! absorbs its attention-weighted neighbour vectors before renormalising.

use serde::{Deserialize, Serialize};

use crate::autodiff::{gaussian, Axis, Parameterized, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{EgoGraph, Graph};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Aligned input width `d`.
    pub input_dim: usize,
    /// Total hidden width `h`, split evenly over the channels.
    pub hidden_dim: usize,
    pub channels: usize,
    pub iterations: usize,
    pub tau: f64,
    pub rho: f64,
    pub prelu_slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 64,
            hidden_dim: 256,
            channels: 4,
            iterations: 3,
            tau: 0.5,
            rho: 0.05,
            prelu_slope: 0.25,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden_dim % self.channels != 0 || self.hidden_dim == 0 {
            return Err(Error::Param(format!(
                "hidden width {} must be a positive multiple of the channel count {}",
                self.hidden_dim, self.channels
            )));
        }
        if !(self.tau > 0.0) || !(self.rho > 0.0) {
            return Err(Error::Param(format!(
                "temperature ({}) and norm floor ({}) must be positive",
                self.tau, self.rho
            )));
        }
        Ok(())
    }

    pub fn channel_dim(&self) -> usize {
        self.hidden_dim / self.channels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentangledEncoder {
    pub config: EncoderConfig,
    /// `d×h`; columns `[k·h_k, (k+1)·h_k)` form the channel projection `W_k`.
    pub weight: Tensor,
    /// `1×h`, the concatenated channel biases `b_k`.
    pub bias: Tensor,
    /// `1×1` PReLU slope.
    pub slope: Tensor,
}

/// Per-node channel vectors, `N×h` with channel `k` in columns
/// `[k·h_k, (k+1)·h_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelEmbeddings {
    pub channels: usize,
    pub values: Tensor,
    pub iteration: usize,
}

impl ChannelEmbeddings {
    pub fn node_count(&self) -> usize {
        self.values.rows()
    }

    pub fn channel_dim(&self) -> usize {
        self.values.cols() / self.channels
    }

    pub fn channel(&self, u: usize, k: usize) -> &[f64] {
        let hk = self.channel_dim();
        &self.values.row_slice(u)[k * hk..(k + 1) * hk]
    }

    /// All `K` channel vectors of node `u`.
    pub fn node_channels(&self, u: usize) -> Vec<Vec<f64>> {
        (0..self.channels).map(|k| self.channel(u, k).to_vec()).collect()
    }

    /// Number of `(node, channel)` vectors that are exactly zero.
    pub fn degenerate(&self) -> usize {
        (0..self.node_count())
            .flat_map(|u| (0..self.channels).map(move |k| (u, k)))
            .filter(|&(u, k)| self.channel(u, k).iter().all(|&v| v == 0.0))
            .count()
    }
}

/// Tape handles of the encoder parameters.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub weight: Var,
    pub bias: Var,
    pub slope: Var,
}

/// Message-passing view of an undirected edge list: `receivers[e]` gathers
/// from `senders[e]`, both directions of every edge present.
#[derive(Clone, Debug, Default)]
pub struct RoutingEdges {
    pub node_count: usize,
    pub receivers: Vec<usize>,
    pub senders: Vec<usize>,
}

impl RoutingEdges {
    pub fn new(node_count: usize, edges: &[(usize, usize)]) -> Self {
        let mut pairs: Vec<(usize, usize)> = edges.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
        pairs.sort_unstable();
        RoutingEdges {
            node_count,
            receivers: pairs.iter().map(|p| p.0).collect(),
            senders: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn from_graph(g: &Graph) -> Self {
        Self::new(g.node_count(), g.edges())
    }

    pub fn is_empty(&self) -> bool {
        self.receivers.is_empty()
    }
}

/// Output of a forward pass on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Routed {
    /// `N×h` final channel embeddings.
    pub embeddings: Var,
    /// `E×K` attention of the last routing round, rows aligned with
    /// [`RoutingEdges`]; `None` when no round ran over a non-empty edge set.
    pub attention: Option<Var>,
}

/// Attention produced by one routing round for the center of an ego-graph.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborAttention {
    /// Local indices (into the ego-graph) of the center's neighbours.
    pub neighbors: Vec<usize>,
    /// `|N(u)|×K`, rows summing to one.
    pub alpha: Tensor,
}

/// One factor-specific subgraph: the center plus the neighbours routed to
/// `channel`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisentangledVocab {
    /// Global node ids, center first.
    pub nodes: Vec<usize>,
    /// `n×n` 0/1 symmetric adjacency with zero diagonal.
    pub adjacency: Tensor,
    /// `n×d` aligned features.
    pub features: Tensor,
    pub class: usize,
    pub domain: String,
    pub channel: usize,
}

impl DisentangledVocab {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn block_indicator(h: usize, k: usize) -> Tensor {
    let hk = h / k;
    let mut b = Tensor::zeros(h, k);
    for j in 0..h {
        b.set(j, j / hk, 1.0);
    }
    b
}

impl DisentangledEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed);
        let weight = gaussian(&mut rng, config.input_dim, config.hidden_dim, 1.0 / (config.input_dim as f64).sqrt());
        let bias = gaussian(&mut rng, 1, config.hidden_dim, 0.1);
        let slope = Tensor::scalar(config.prelu_slope);
        Ok(DisentangledEncoder {
            config,
            weight,
            bias,
            slope,
        })
    }

    /// `W_k`, the `d×h_k` projection of channel `k`.
    pub fn channel_weight(&self, k: usize) -> Tensor {
        let hk = self.config.channel_dim();
        self.weight.col_block(k * hk, (k + 1) * hk)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        if trainable {
            EncoderVars {
                weight: tape.param("encoder.weight", self.weight.clone()),
                bias: tape.param("encoder.bias", self.bias.clone()),
                slope: tape.param("encoder.slope", self.slope.clone()),
            }
        } else {
            EncoderVars {
                weight: tape.constant(self.weight.clone()),
                bias: tape.constant(self.bias.clone()),
                slope: tape.constant(self.slope.clone()),
            }
        }
    }

    fn normalize_channels(&self, tape: &mut Tape, h: Var, n: usize) -> Result<Var> {
        let c = &self.config;
        let per_channel = tape.reshape(h, n * c.channels, c.channel_dim())?;
        let normed = tape.normalize_rows(per_channel, c.rho)?;
        tape.reshape(normed, n, c.hidden_dim)
    }

    /// `h⁽⁰⁾ = normalize_ρ(σ(X̂ W + b))` per channel.
    pub fn init_on_tape(&self, tape: &mut Tape, vars: &EncoderVars, x_hat: Var) -> Result<Var> {
        let (n, d) = tape.value(x_hat).dims();
        if d != self.config.input_dim {
            return Err(Error::shape("encoder", tape.value(x_hat).shape(), &[n, self.config.input_dim]));
        }
        let z = tape.matmul(x_hat, vars.weight)?;
        let z = tape.add_row(z, vars.bias)?;
        let z = tape.prelu(z, vars.slope)?;
        self.normalize_channels(tape, z, n)
    }

    /// One synchronous routing round over every receiver. Returns the `E×K`
    /// attention and the updated embeddings.
    pub fn route_on_tape(&self, tape: &mut Tape, h: Var, edges: &RoutingEdges) -> Result<(Var, Var)> {
        let c = &self.config;
        let n = edges.node_count;
        let block = tape.constant(block_indicator(c.hidden_dim, c.channels));
        let block_t = tape.constant(block_indicator(c.hidden_dim, c.channels).transpose());
        let hu = tape.gather_rows(h, &edges.receivers)?;
        let hv = tape.gather_rows(h, &edges.senders)?;
        let agreement = tape.mul(hu, hv)?;
        let scores = tape.matmul(agreement, block)?;
        let alpha = tape.softmax_rows(scores, c.tau)?;
        let spread = tape.matmul(alpha, block_t)?;
        let messages = tape.mul(spread, hv)?;
        let incoming = tape.scatter_add_rows(messages, &edges.receivers, n)?;
        let updated = tape.add(h, incoming)?;
        let h_next = self.normalize_channels(tape, updated, n)?;
        Ok((alpha, h_next))
    }

    /// Full forward: init plus `T` routing rounds.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &EncoderVars, x_hat: Var, edges: &RoutingEdges) -> Result<Routed> {
        let mut h = self.init_on_tape(tape, vars, x_hat)?;
        let mut attention = None;
        if !edges.is_empty() {
            for _ in 0..self.config.iterations {
                let (alpha, next) = self.route_on_tape(tape, h, edges)?;
                attention = Some(alpha);
                h = next;
            }
        }
        Ok(Routed { embeddings: h, attention })
    }

    /// Channel initialisation without a tape.
    pub fn init_channels(&self, x_hat: &Tensor) -> Result<ChannelEmbeddings> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(x_hat.clone());
        let h = self.init_on_tape(&mut tape, &vars, x)?;
        let emb = ChannelEmbeddings {
            channels: self.config.channels,
            values: tape.value(h).clone(),
            iteration: 0,
        };
        let zero = emb.degenerate();
        if zero > 0 {
            log::debug!("{zero} channel vectors have zero pre-norm and stay zero");
        }
        Ok(emb)
    }

    /// Channel embeddings of every node after `T` rounds over `edges`.
    pub fn embed(&self, x_hat: &Tensor, edges: &RoutingEdges) -> Result<ChannelEmbeddings> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(x_hat.clone());
        let routed = self.forward_on_tape(&mut tape, &vars, x, edges)?;
        Ok(ChannelEmbeddings {
            channels: self.config.channels,
            values: tape.value(routed.embeddings).clone(),
            iteration: if edges.is_empty() { 0 } else { self.config.iterations },
        })
    }

    /// One routing round on the nodes of `ego` (rows of `emb` follow
    /// `ego.nodes`); reports the attention of the center's neighbours.
    pub fn route_iteration(&self, emb: &ChannelEmbeddings, ego: &EgoGraph) -> Result<(NeighborAttention, ChannelEmbeddings)> {
        if emb.node_count() != ego.len() {
            return Err(Error::shape("route_iteration", emb.values.shape(), &[ego.len()]));
        }
        let edges = RoutingEdges::new(ego.len(), &ego.edges);
        let mut tape = Tape::new();
        let h = tape.constant(emb.values.clone());
        let (alpha, next) = if edges.is_empty() {
            (None, h)
        } else {
            let (a, n) = self.route_on_tape(&mut tape, h, &edges)?;
            (Some(a), n)
        };
        let mut neighbors = Vec::new();
        let mut rows = Vec::new();
        if let Some(a) = alpha {
            let a = tape.value(a);
            for (e, (&r, &s)) in edges.receivers.iter().zip(&edges.senders).enumerate() {
                if r == 0 {
                    neighbors.push(s);
                    rows.push(a.row_slice(e).to_vec());
                }
            }
        }
        let alpha = if rows.is_empty() {
            Tensor::zeros(0, self.config.channels)
        } else {
            Tensor::from_rows(&rows)?
        };
        Ok((
            NeighborAttention { neighbors, alpha },
            ChannelEmbeddings {
                channels: emb.channels,
                values: tape.value(next).clone(),
                iteration: emb.iteration + 1,
            },
        ))
    }

    /// `h_u = ‖_k h_{u,k}⁽ᵀ⁾` for the center of `ego`; `x_hat` holds the
    /// aligned features of the parent graph indexed by `ego.nodes`.
    pub fn encode(&self, ego: &EgoGraph, x_hat: &Tensor) -> Result<Vec<f64>> {
        if ego.is_empty() {
            return Err(Error::Contract("cannot encode an empty ego-graph".into()));
        }
        let local = x_hat.select_rows(&ego.nodes);
        let emb = self.embed(&local, &RoutingEdges::new(ego.len(), &ego.edges))?;
        Ok(emb.values.row_slice(0).to_vec())
    }

    /// Attention of `u`'s neighbours computed from final embeddings.
    fn neighbor_attention(&self, emb: &ChannelEmbeddings, u: usize, neighbors: &[usize]) -> Vec<Vec<f64>> {
        let k = self.config.channels;
        let tau = self.config.tau;
        neighbors
            .iter()
            .map(|&v| {
                let scores: Vec<f64> = (0..k)
                    .map(|c| {
                        emb.channel(u, c).iter().zip(emb.channel(v, c)).map(|(a, b)| a * b).sum::<f64>() / tau
                    })
                    .collect();
                let max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                exps.into_iter().map(|e| e / z).collect()
            })
            .collect()
    }

    /// Splits `u`'s one-hop neighbourhood into `K` vocabularies by hard
    /// argmax of the final routing attention (ties to the smaller channel).
    /// `emb` are final embeddings of the whole graph `g`, `x_hat` its aligned
    /// features.
    pub fn vocabularies_from_embeddings(
        &self,
        g: &Graph,
        x_hat: &Tensor,
        emb: &ChannelEmbeddings,
        u: usize,
    ) -> Result<Vec<DisentangledVocab>> {
        let class = g
            .label(u)
            .ok_or_else(|| Error::Contract(format!("node {u} has no label")))?;
        let neighbors = g.neighbors(u);
        let alpha = self.neighbor_attention(emb, u, neighbors);
        let k = self.config.channels;
        let mut members: Vec<Vec<usize>> = vec![vec![u]; k];
        for (&v, row) in neighbors.iter().zip(&alpha) {
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            members[best].push(v);
        }
        members
            .into_iter()
            .enumerate()
            .map(|(channel, nodes)| {
                let sub = g.induced(&nodes)?;
                let n = nodes.len();
                let mut adjacency = Tensor::zeros(n, n);
                for &(a, b) in sub.edges() {
                    adjacency.set(a, b, 1.0);
                    adjacency.set(b, a, 1.0);
                }
                Ok(DisentangledVocab {
                    features: x_hat.select_rows(&nodes),
                    nodes,
                    adjacency,
                    class,
                    domain: g.domain().to_string(),
                    channel,
                })
            })
            .collect()
    }

    /// Vocabularies of a single labelled node (embeds the whole graph).
    pub fn extract_vocabularies(&self, g: &Graph, x_hat: &Tensor, u: usize) -> Result<Vec<DisentangledVocab>> {
        if g.label(u).is_none() {
            return Err(Error::Contract(format!("node {u} has no label")));
        }
        let emb = self.embed(x_hat, &RoutingEdges::from_graph(g))?;
        self.vocabularies_from_embeddings(g, x_hat, &emb, u)
    }

    /// Vocabularies of every labelled node of `g`.
    pub fn extract_all_vocabularies(&self, g: &Graph, x_hat: &Tensor) -> Result<Vec<DisentangledVocab>> {
        let emb = self.embed(x_hat, &RoutingEdges::from_graph(g))?;
        let mut out = Vec::new();
        for &u in g.labels().keys() {
            out.extend(self.vocabularies_from_embeddings(g, x_hat, &emb, u)?);
        }
        Ok(out)
    }
}

impl Parameterized for DisentangledEncoder {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("encoder.weight", &self.weight);
        f("encoder.bias", &self.bias);
        f("encoder.slope", &self.slope);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("encoder.weight", &mut self.weight);
        f("encoder.bias", &mut self.bias);
        f("encoder.slope", &mut self.slope);
    }
}

/// Cross-channel InfoNCE estimate over a batch of node embeddings
/// (`B×h`, `K` channels): for every ordered channel pair `i ≠ j`, the mean
/// over nodes `u` of `-log softmax_v(⟨h_{u,i}, h_{v,j}⟩/τ)` at `v = u`.
pub fn mi_regularizer_on_tape(tape: &mut Tape, h: Var, channels: usize, tau: f64) -> Result<Var> {
    let (b, width) = tape.value(h).dims();
    if b == 0 {
        return Err(Error::Contract("mutual-information batch is empty".into()));
    }
    if channels == 0 || width % channels != 0 {
        return Err(Error::shape("mi_regularizer", tape.value(h).shape(), &[channels]));
    }
    if channels == 1 || b == 1 {
        // no channel pairs, or a softmax over a single candidate
        return Ok(tape.scalar(0.0));
    }
    let hk = width / channels;
    let per_channel = tape.reshape(h, b * channels, hk)?;
    let split: Vec<Var> = (0..channels)
        .map(|k| {
            let idx: Vec<usize> = (0..b).map(|u| u * channels + k).collect();
            tape.gather_rows(per_channel, &idx)
        })
        .collect::<Result<_>>()?;
    let diag = tape.constant(Tensor::eye(b));
    let mut terms = Vec::new();
    for i in 0..channels {
        for j in 0..channels {
            if i == j {
                continue;
            }
            let hj_t = tape.transpose(split[j]);
            let logits = tape.matmul(split[i], hj_t)?;
            let p = tape.softmax_rows(logits, tau)?;
            let logp = tape.log(p)?;
            let on_diag = tape.mul(logp, diag)?;
            terms.push(tape.sum(on_diag));
        }
    }
    let stacked = tape.concat(&terms, Axis::Cols)?;
    let total = tape.sum(stacked);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// Evaluates [`mi_regularizer_on_tape`] without keeping the tape.
pub fn mi_regularizer(h: &Tensor, channels: usize, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(h.clone());
    let out = mi_regularizer_on_tape(&mut tape, v, channels, tau)?;
    Ok(tape.value(out).item())
}

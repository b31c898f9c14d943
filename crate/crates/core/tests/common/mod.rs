#![allow(dead_code)]

use std::collections::BTreeMap;

use graver::autodiff::{gaussian, Axis, Tape, Tensor, Var};
use graver::graph::{Attachment, BackboneSpec, FeatureProfile, MotifKind, MotifSpec};
use graver::harness::{MotifSource, RunConfig, SourceSpec};
use graver::seed;
use rand::seq::IndexedRandom;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, 1e-3)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

#[derive(Clone, Debug)]
pub enum Op {
    MatMul(usize),
    Add(usize),
    Sub(usize),
    Mul(usize),
    AddRow(usize),
    Scale(f64),
    Softmax(f64),
    LogSoftmax(f64),
    Exp,
    Normalize(f64),
    Prelu(usize),
    Transpose,
    Reshape(usize, usize),
    Gather(Vec<usize>),
    Scatter(Vec<usize>, usize),
    Concat(usize, Axis),
    MeanRows,
    RowDot(usize),
    Mean,
}

/// A random operator chain over small parameter matrices ending in a
/// weighted sum, so every parameter entry gets a non-trivial gradient.
#[derive(Clone, Debug)]
pub struct Program {
    pub params: Vec<Tensor>,
    pub ops: Vec<Op>,
    pub weights: Tensor,
}

impl Program {
    pub fn random(seed: u64) -> Program {
        let mut rng = seed::rng(seed);
        let (mut r, mut c) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let mut params = vec![gaussian(&mut rng, r, c, 1.0)];
        let mut ops = Vec::new();
        let n_ops = rng.random_range(2..=6);
        while ops.len() < n_ops {
            let kinds = [
                "matmul", "add", "sub", "mul", "add_row", "scale", "softmax", "log_softmax", "exp", "normalize", "prelu",
                "transpose", "reshape", "gather", "scatter", "concat", "mean_rows", "row_dot",
            ];
            let kind = *kinds.choose(&mut rng).unwrap();
            let push_param = |t: Tensor, params: &mut Vec<Tensor>| {
                params.push(t);
                params.len() - 1
            };
            let op = match kind {
                "matmul" => {
                    let k = rng.random_range(1..=4);
                    let p = push_param(gaussian(&mut rng, c, k, 0.7), &mut params);
                    c = k;
                    Op::MatMul(p)
                }
                "add" => Op::Add(push_param(gaussian(&mut rng, r, c, 1.0), &mut params)),
                "sub" => Op::Sub(push_param(gaussian(&mut rng, r, c, 1.0), &mut params)),
                "mul" => Op::Mul(push_param(gaussian(&mut rng, r, c, 1.0), &mut params)),
                "add_row" => Op::AddRow(push_param(gaussian(&mut rng, 1, c, 1.0), &mut params)),
                "scale" => Op::Scale(rng.random_range(-2.0..2.0)),
                "softmax" => Op::Softmax(rng.random_range(0.3..2.0)),
                "log_softmax" => Op::LogSoftmax(rng.random_range(0.3..2.0)),
                "exp" => Op::Exp,
                "normalize" => Op::Normalize(rng.random_range(0.05..0.5)),
                "prelu" => {
                    let mut s = Tensor::zeros(1, 1);
                    s.set(0, 0, rng.random_range(0.05..0.5));
                    Op::Prelu(push_param(s, &mut params))
                }
                "transpose" => {
                    std::mem::swap(&mut r, &mut c);
                    Op::Transpose
                }
                "reshape" => {
                    let n = r * c;
                    let divisors: Vec<usize> = (1..=n).filter(|d| n % d == 0).collect();
                    let nr = *divisors.choose(&mut rng).unwrap();
                    r = nr;
                    c = n / nr;
                    Op::Reshape(r, c)
                }
                "gather" => {
                    let k = rng.random_range(1..=4);
                    let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..r)).collect();
                    r = k;
                    Op::Gather(idx)
                }
                "scatter" => {
                    let out = rng.random_range(1..=4);
                    let idx: Vec<usize> = (0..r).map(|_| rng.random_range(0..out)).collect();
                    r = out;
                    Op::Scatter(idx, out)
                }
                "concat" => {
                    if rng.random::<bool>() {
                        let k = rng.random_range(1..=3);
                        let p = push_param(gaussian(&mut rng, k, c, 1.0), &mut params);
                        r += k;
                        Op::Concat(p, Axis::Rows)
                    } else {
                        let k = rng.random_range(1..=3);
                        let p = push_param(gaussian(&mut rng, r, k, 1.0), &mut params);
                        c += k;
                        Op::Concat(p, Axis::Cols)
                    }
                }
                "mean_rows" => {
                    r = 1;
                    Op::MeanRows
                }
                _ => {
                    let p = push_param(gaussian(&mut rng, r, c, 1.0), &mut params);
                    c = 1;
                    Op::RowDot(p)
                }
            };
            ops.push(op);
        }
        if rng.random::<f64>() < 0.2 {
            ops.push(Op::Mean);
            r = 1;
            c = 1;
        }
        let weights = gaussian(&mut rng, r, c, 1.0);
        Program { params, ops, weights }
    }

    fn name(i: usize) -> String {
        format!("p{i}")
    }

    /// Builds the loss on `tape`; `bump` shifts one parameter entry.
    pub fn build(&self, tape: &mut Tape, bump: Option<(usize, usize, f64)>) -> Var {
        let vars: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if let Some((p, k, h)) = bump {
                    if p == i {
                        t.values_mut()[k] += h;
                    }
                }
                tape.param(&Self::name(i), t)
            })
            .collect();
        let mut x = vars[0];
        for op in &self.ops {
            x = match op {
                Op::MatMul(p) => tape.matmul(x, vars[*p]).unwrap(),
                Op::Add(p) => tape.add(x, vars[*p]).unwrap(),
                Op::Sub(p) => tape.sub(x, vars[*p]).unwrap(),
                Op::Mul(p) => tape.mul(x, vars[*p]).unwrap(),
                Op::AddRow(p) => tape.add_row(x, vars[*p]).unwrap(),
                Op::Scale(s) => tape.scale(x, *s),
                Op::Softmax(t) => tape.softmax_rows(x, *t).unwrap(),
                Op::LogSoftmax(t) => {
                    let s = tape.softmax_rows(x, *t).unwrap();
                    tape.log(s).unwrap()
                }
                Op::Exp => {
                    let s = tape.scale(x, 0.3);
                    tape.exp(s)
                }
                Op::Normalize(rho) => tape.normalize_rows(x, *rho).unwrap(),
                Op::Prelu(p) => tape.prelu(x, vars[*p]).unwrap(),
                Op::Transpose => tape.transpose(x),
                Op::Reshape(r, c) => tape.reshape(x, *r, *c).unwrap(),
                Op::Gather(idx) => tape.gather_rows(x, idx).unwrap(),
                Op::Scatter(idx, n) => tape.scatter_add_rows(x, idx, *n).unwrap(),
                Op::Concat(p, axis) => tape.concat(&[x, vars[*p]], *axis).unwrap(),
                Op::MeanRows => tape.mean_rows(x).unwrap(),
                Op::RowDot(p) => tape.row_dot(x, vars[*p]).unwrap(),
                Op::Mean => tape.mean(x),
            };
        }
        let w = tape.constant(self.weights.clone());
        let y = tape.mul(x, w).unwrap();
        tape.sum(y)
    }

    pub fn loss(&self, bump: Option<(usize, usize, f64)>) -> f64 {
        let mut tape = Tape::new();
        let l = self.build(&mut tape, bump);
        tape.value(l).item()
    }

    /// Largest relative error between tape gradients and central differences.
    pub fn max_rel_err(&self) -> f64 {
        let mut tape = Tape::new();
        let l = self.build(&mut tape, None);
        let grads = tape.backward(l).unwrap();
        let mut worst: f64 = 0.0;
        for (i, p) in self.params.iter().enumerate() {
            let g = grads.get(&Self::name(i));
            for k in 0..p.len() {
                let analytic = g.map_or(0.0, |g| g.values()[k]);
                let numeric = (self.loss(Some((i, k, FD_STEP))) - self.loss(Some((i, k, -FD_STEP)))) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(analytic, numeric));
            }
        }
        worst
    }
}

fn motif(kind: MotifKind, repetitions: usize, mean: Vec<f64>, noise: f64) -> MotifSpec {
    MotifSpec {
        kind,
        repetitions,
        attachment: Attachment::Anchor,
        feature_profile: FeatureProfile { mean, noise },
    }
}

/// A config small enough for debug-build tests.
pub fn tiny_config(seed: u64) -> RunConfig {
    RunConfig {
        d: 8,
        h: 16,
        k: 2,
        t: 2,
        n_prime: 5,
        pretrain_epochs: 30,
        patience: 10,
        batch_size: 32,
        runs: 3,
        max_episodes: 40,
        inference_draws: 2,
        seed,
        ..RunConfig::default()
    }
}

/// Two classes with orthogonal, noise-free features.
pub fn separable_config(seed: u64) -> RunConfig {
    let src = MotifSource {
        domain: "sep_src".into(),
        classes: vec![
            motif(MotifKind::Triangle, 6, vec![3.0, 0.0, 0.0, 0.0], 0.0),
            motif(MotifKind::Star { leaves: 3 }, 5, vec![0.0, 3.0, 0.0, 0.0], 0.0),
        ],
        backbone: BackboneSpec::default(),
        seed: None,
    };
    let tgt = MotifSource {
        domain: "sep_tgt".into(),
        classes: vec![
            motif(MotifKind::Triangle, 4, vec![0.0, 0.0, 3.0, 0.0], 0.0),
            motif(MotifKind::Triangle, 4, vec![0.0, 0.0, 0.0, 3.0], 0.0),
        ],
        backbone: BackboneSpec { density: 0.0 },
        seed: None,
    };
    RunConfig {
        sources: vec![SourceSpec::Motif(src)],
        target: SourceSpec::Motif(tgt),
        d: 4,
        hops: 1,
        ..tiny_config(seed)
    }
}

pub fn label_map(pairs: &[(usize, usize)]) -> BTreeMap<usize, usize> {
    pairs.iter().copied().collect()
}

//! WebAssembly bindings for the static demo page. Every call returns a JSON
//! string the page renders.

use std::path::Path;

use graver::adapt::{moe_coe_loss, BankIndex, RoutingWeights};
use graver::autodiff::Tensor;
use graver::harness::RunConfig;
use graver::pretrain::PretrainedModel;
use graver::theory::{bound_b, check_bound};
use graver::vocab::{generate, BankEntry, FeatureGraphon, StructureGraphon, VocabBank};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const TOY_N: usize = 6;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn js(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

/// Two-block step graphon: cells in the same half connect with `p_in`.
pub fn block_graphon(n: usize, p_in: f64, p_out: f64) -> graver::Result<StructureGraphon> {
    let mut w = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                w.set(i, j, if (2 * i < n) == (2 * j < n) { p_in } else { p_out });
            }
        }
    }
    StructureGraphon::new(w)
}

/// Samples one vocabulary of `n` nodes from a two-block graphon.
pub fn sample_graphon_json(p_in: f64, p_out: f64, n: usize, seed: u32) -> Result<Value, String> {
    if n == 0 || n > 64 {
        return Err("node count must be in 1..=64".into());
    }
    let w = block_graphon(n, p_in, p_out).map_err(err)?;
    let x = FeatureGraphon::new(Tensor::zeros(n, 1)).map_err(err)?;
    let v = generate(&w, &x, seed as u64).map_err(err)?;
    Ok(json!({
        "n": n,
        "graphon": rows(w.matrix()),
        "cells": v.cells,
        "edges": v.edges(),
    }))
}

#[wasm_bindgen]
pub fn sample_graphon(p_in: f64, p_out: f64, n: usize, seed: u32) -> Result<String, JsError> {
    js(sample_graphon_json(p_in, p_out, n, seed))
}

fn edges_graphon(edges: &[(usize, usize)], p: f64) -> Tensor {
    let mut w = Tensor::filled(TOY_N, TOY_N, 0.05);
    for i in 0..TOY_N {
        w.set(i, i, 0.0);
    }
    for &(a, b) in edges {
        w.set(a, b, p);
        w.set(b, a, p);
    }
    w
}

/// Two domains with two classes each; graphons shaped like a triangle with
/// a tail, a star, a path and a ring.
pub fn toy_bank() -> graver::Result<VocabBank> {
    let shapes: [(&str, usize, Vec<(usize, usize)>, [f64; 2]); 4] = [
        ("shapes", 0, vec![(0, 1), (0, 2), (1, 2), (0, 3), (3, 4), (4, 5)], [1.0, 0.0]),
        ("shapes", 1, (1..TOY_N).map(|j| (0, j)).collect(), [0.0, 1.0]),
        ("chains", 0, (0..TOY_N - 1).map(|i| (i, i + 1)).collect(), [-1.0, 0.0]),
        ("chains", 1, (0..TOY_N).map(|i| (i, (i + 1) % TOY_N)).collect(), [0.0, -1.0]),
    ];
    let mut bank = VocabBank::new(TOY_N, 2);
    for (domain, class, edges, mean) in shapes {
        let feats = Tensor::from_rows(&vec![mean.to_vec(); TOY_N])?;
        bank.insert(BankEntry {
            domain: domain.into(),
            class,
            count: 1,
            structure: StructureGraphon::new(edges_graphon(&edges, 0.9))?,
            features: FeatureGraphon::new(feats)?,
        })?;
    }
    Ok(bank)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Routes the toy bank with the given logits (2 domain logits, then 2 class
/// logits per domain), mixes the graphons and samples one vocabulary.
pub fn mix_vocabulary_json(domain_logits: &[f64], class_logits: &[f64], seed: u32) -> Result<Value, String> {
    let bank = toy_bank().map_err(err)?;
    let index = BankIndex::new(&bank).map_err(err)?;
    let n = index.domains.len();
    if domain_logits.len() != n || class_logits.len() != index.class_counts.iter().sum::<usize>() {
        return Err("expected 2 domain logits and 4 class logits".into());
    }
    let mut s_c = Vec::new();
    let mut at = 0;
    for &c in &index.class_counts {
        s_c.push(softmax(&class_logits[at..at + c]));
        at += c;
    }
    let weights = RoutingWeights { s_m: softmax(domain_logits), s_c };
    let (structure, features) = index.mix(&weights).map_err(err)?;
    let v = generate(&structure, &features, seed as u64).map_err(err)?;
    Ok(json!({
        "domains": index.domains,
        "s_m": weights.s_m,
        "s_c": weights.s_c,
        "loss": moe_coe_loss(&weights.s_m, &weights.s_c, n),
        "graphon": rows(structure.matrix()),
        "features": rows(&v.features),
        "edges": v.edges(),
    }))
}

#[wasm_bindgen]
pub fn mix_vocabulary(domain_logits: &[f64], class_logits: &[f64], seed: u32) -> Result<String, JsError> {
    js(mix_vocabulary_json(domain_logits, class_logits, seed))
}

/// Closed-form bound for the given constants.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn bound_value(eps: f64, k: usize, c_sigma: f64, l_w: f64, l_s: f64, rho: f64, tau: f64, t: usize) -> Result<f64, JsError> {
    bound_b(eps, k, c_sigma, l_w, l_s, rho, tau, t).map_err(|e| JsError::new(&e.to_string()))
}

/// Perturbs `pairs` random nodes of a small motif graph and checks each
/// embedding shift against the bound, with a freshly initialised encoder.
pub fn check_random_encoder_json(pairs: usize, channels: usize, iterations: usize, seed: u32) -> Result<Value, String> {
    if pairs == 0 || pairs > 500 {
        return Err("pairs must be in 1..=500".into());
    }
    let cfg = RunConfig {
        d: 8,
        h: 4 * channels.max(1),
        k: channels,
        t: iterations,
        seed: seed as u64,
        ..RunConfig::default()
    };
    cfg.validate().map_err(err)?;
    let sources = cfg.load_sources(Path::new(".")).map_err(err)?;
    let model = PretrainedModel::init(&sources[..1], &cfg.pretrain_config()).map_err(err)?;
    let g = &sources[0];
    let x_hat = model.aligned_features(g).map_err(err)?;
    let report = check_bound(&model.encoder, g, &x_hat, pairs, seed as u64).map_err(err)?;
    Ok(json!({
        "pass": report.pass_count(),
        "total": report.pairs.len(),
        "lipschitz": report.lipschitz,
        "rho": report.rho,
        "tau": report.tau,
        "pairs": report.pairs,
    }))
}

#[wasm_bindgen]
pub fn check_random_encoder(pairs: usize, channels: usize, iterations: usize, seed: u32) -> Result<String, JsError> {
    js(check_random_encoder_json(pairs, channels, iterations, seed))
}

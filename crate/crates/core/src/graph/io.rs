//! Plain-text dataset directories:
//!
//! ```text
//! meta.json            {"nodes": N, "feature_dim": d, "classes": C, "domain": "..."}
//! edges.tsv            u<TAB>v per line, 0-based
//! features.csv         N lines of d comma-separated decimals
//! labels.tsv           node<TAB>class (optional)
//! text_embeddings.csv  N lines of decimals (optional)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Graph;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub nodes: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub classes: usize,
    pub domain: String,
}

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_index(file: &Path, line: usize, tok: &str) -> Result<usize> {
    tok.trim()
        .parse()
        .map_err(|_| parse_err(file, line, format!("expected a non-negative integer, got `{tok}`")))
}

fn parse_matrix(file: &Path, text: &str, rows: usize, cols: Option<usize>) -> Result<Tensor> {
    let mut values = Vec::new();
    let mut width = cols;
    let mut count = 0;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(file, lineno, format!("bad decimal `{}`", t.trim())))
            })
            .collect::<Result<_>>()?;
        match width {
            Some(w) if w != row.len() => {
                return Err(parse_err(file, lineno, format!("expected {w} values, found {}", row.len())))
            }
            None => width = Some(row.len()),
            _ => {}
        }
        values.extend(row);
        count += 1;
    }
    if count != rows {
        return Err(parse_err(file, count, format!("expected {rows} rows, found {count}")));
    }
    Tensor::matrix(rows, width.unwrap_or(0), values)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Graph> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta = serde_json::from_str(&read(&meta_path)?)?;

    let edges_path = dir.join("edges.tsv");
    let mut edges = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in read(&edges_path)?.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split('\t');
        let (Some(a), Some(b), None) = (toks.next(), toks.next(), toks.next()) else {
            return Err(parse_err(&edges_path, lineno, "expected `u<TAB>v`"));
        };
        let u = parse_index(&edges_path, lineno, a)?;
        let v = parse_index(&edges_path, lineno, b)?;
        if u == v {
            return Err(parse_err(&edges_path, lineno, format!("self-loop at node {u}")));
        }
        if u >= meta.nodes || v >= meta.nodes {
            return Err(parse_err(&edges_path, lineno, format!("node id out of range 0..{}", meta.nodes)));
        }
        if !seen.insert((u.min(v), u.max(v))) {
            return Err(parse_err(&edges_path, lineno, format!("duplicate edge ({u}, {v})")));
        }
        edges.push((u, v));
    }

    let feat_path = dir.join("features.csv");
    let features = parse_matrix(&feat_path, &read(&feat_path)?, meta.nodes, Some(meta.feature_dim))?;

    let mut labels = BTreeMap::new();
    let labels_path = dir.join("labels.tsv");
    if labels_path.exists() {
        for (i, line) in read(&labels_path)?.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut toks = line.split('\t');
            let (Some(a), Some(b), None) = (toks.next(), toks.next(), toks.next()) else {
                return Err(parse_err(&labels_path, lineno, "expected `node<TAB>class`"));
            };
            let node = parse_index(&labels_path, lineno, a)?;
            let class = parse_index(&labels_path, lineno, b)?;
            if node >= meta.nodes {
                return Err(parse_err(&labels_path, lineno, format!("node {node} out of range")));
            }
            if class >= meta.classes {
                return Err(parse_err(
                    &labels_path,
                    lineno,
                    format!("class {class} outside 0..{}", meta.classes),
                ));
            }
            labels.insert(node, class);
        }
    }

    let mut g = Graph::new(meta.nodes, edges, features, labels, meta.classes, meta.domain)?;
    let text_path = dir.join("text_embeddings.csv");
    if text_path.exists() {
        let text = parse_matrix(&text_path, &read(&text_path)?, meta.nodes, None)?;
        g = g.with_text_embeddings(text)?;
    }
    Ok(g)
}

fn write_matrix(t: &Tensor) -> String {
    let mut s = String::new();
    for i in 0..t.rows() {
        let row: Vec<String> = t.row_slice(i).iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Writes `g` in the directory layout read by [`load_dataset`].
pub fn save_dataset(g: &Graph, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        nodes: g.node_count(),
        feature_dim: g.feature_dim(),
        classes: g.class_count(),
        domain: g.domain().to_string(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    let mut edges = String::new();
    for &(u, v) in g.edges() {
        let _ = writeln!(edges, "{u}\t{v}");
    }
    fs::write(dir.join("edges.tsv"), edges)?;
    fs::write(dir.join("features.csv"), write_matrix(g.features()))?;
    if !g.labels().is_empty() {
        let mut s = String::new();
        for (u, c) in g.labels() {
            let _ = writeln!(s, "{u}\t{c}");
        }
        fs::write(dir.join("labels.tsv"), s)?;
    }
    if let Some(t) = g.text_embeddings() {
        fs::write(dir.join("text_embeddings.csv"), write_matrix(t))?;
    }
    Ok(dir.to_path_buf())
}

//! Matched vs mismatched motif case study and the (λ, μ) sweep.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, SourceSpec};
use super::eval::{bank_from_model, evaluate_prepared, run_once, Metrics, Prepared};
use super::svg::{heat_map, line_plot, Series};
use crate::adapt::FinetuneLog;
use crate::error::{Error, Result};
use crate::graph::MotifKind;
use crate::pretrain::pretrain;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaseStudySpec {
    /// Motif seen during pre-training.
    pub matched: MotifKind,
    /// Motif absent from pre-training.
    pub mismatched: MotifKind,
    /// Target class whose motif is swapped.
    pub class: usize,
    pub seeds: usize,
}

impl Default for CaseStudySpec {
    fn default() -> Self {
        CaseStudySpec {
            matched: MotifKind::Triangle,
            mismatched: MotifKind::Ladder { rungs: 3 },
            class: 0,
            seeds: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRun {
    pub seed_index: usize,
    pub accuracy: f64,
    pub log: FinetuneLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyReport {
    pub matched: Vec<CaseRun>,
    pub mismatched: Vec<CaseRun>,
}

impl CaseStudyReport {
    /// Seeds where the matched run's accuracy is at least the mismatched one.
    pub fn matched_wins(&self) -> usize {
        self.matched
            .iter()
            .zip(&self.mismatched)
            .filter(|(a, b)| a.accuracy >= b.accuracy)
            .count()
    }

    pub fn curves_csv(&self) -> String {
        let mut out = String::from("variant,seed,episode,loss,train_accuracy\n");
        for (name, runs) in [("matched", &self.matched), ("mismatched", &self.mismatched)] {
            for r in runs {
                for (e, (l, a)) in r.log.losses.iter().zip(&r.log.train_accuracy).enumerate() {
                    let _ = writeln!(out, "{name},{},{},{l},{a}", r.seed_index, e + 1);
                }
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("variant,seed,accuracy,episodes_to_converge\n");
        for (name, runs) in [("matched", &self.matched), ("mismatched", &self.mismatched)] {
            for r in runs {
                let _ = writeln!(out, "{name},{},{},{}", r.seed_index, r.accuracy, r.log.episodes_to_converge);
            }
        }
        out
    }

    /// Per-episode mean over seeds; shorter runs hold their last value.
    fn mean_curve(runs: &[CaseRun], pick: fn(&FinetuneLog) -> &[f64]) -> Vec<(f64, f64)> {
        let len = runs.iter().map(|r| pick(&r.log).len()).max().unwrap_or(0);
        (0..len)
            .map(|e| {
                let vals: Vec<f64> = runs
                    .iter()
                    .filter_map(|r| {
                        let c = pick(&r.log);
                        c.get(e).or(c.last()).copied()
                    })
                    .collect();
                ((e + 1) as f64, vals.iter().sum::<f64>() / vals.len().max(1) as f64)
            })
            .collect()
    }

    pub fn plot(&self, pick: fn(&FinetuneLog) -> &[f64], y_label: &str) -> String {
        line_plot(
            &format!("{y_label} per episode"),
            "episode",
            y_label,
            &[
                Series { name: "matched", points: Self::mean_curve(&self.matched, pick) },
                Series { name: "mismatched", points: Self::mean_curve(&self.mismatched, pick) },
            ],
        )
    }

    /// Writes curves.csv, summary.csv, loss.svg and accuracy.svg.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let files = [
            ("curves.csv", self.curves_csv()),
            ("summary.csv", self.summary_csv()),
            ("loss.svg", self.plot(|l| &l.losses, "loss")),
            ("accuracy.svg", self.plot(|l| &l.train_accuracy, "training accuracy")),
        ];
        let mut out = Vec::new();
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            out.push(p);
        }
        Ok(out)
    }
}

fn with_motif(cfg: &RunConfig, class: usize, kind: &MotifKind) -> Result<SourceSpec> {
    match &cfg.target {
        SourceSpec::Motif(m) => {
            let mut m = m.clone();
            let spec = m
                .classes
                .get_mut(class)
                .ok_or_else(|| Error::Param(format!("case study class {class} is not a target class")))?;
            spec.kind = kind.clone();
            Ok(SourceSpec::Motif(m))
        }
        SourceSpec::Path(_) => Err(Error::Param("the case study needs an inline motif target".into())),
    }
}

/// Fine-tunes on a target whose class `spec.class` uses the matched motif,
/// then on one using the mismatched motif; same pre-trained model and bank.
pub fn case_study(cfg: &RunConfig, spec: &CaseStudySpec, prep: &Prepared, base: &Path) -> Result<CaseStudyReport> {
    let mut variants = Vec::new();
    for kind in [&spec.matched, &spec.mismatched] {
        let mut c = cfg.clone();
        c.target = with_motif(cfg, spec.class, kind)?;
        let p = Prepared {
            target: c.load_target(base)?,
            ..prep.clone()
        };
        let runs = crate::par::map((0..spec.seeds).collect(), |i| {
            run_once(&c, &p, i).map(|(row, log)| CaseRun {
                seed_index: i,
                accuracy: row.accuracy,
                log,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        variants.push(runs);
    }
    let mismatched = variants.pop().expect("two variants");
    let matched = variants.pop().expect("two variants");
    Ok(CaseStudyReport { matched, mismatched })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub lambdas: Vec<f64>,
    pub mus: Vec<f64>,
    /// `cells[i][j]` for `lambdas[i]`, `mus[j]`.
    pub cells: Vec<Vec<Metrics>>,
}

impl SweepReport {
    pub fn mean_matrix(&self) -> Vec<Vec<f64>> {
        self.cells.iter().map(|r| r.iter().map(|m| m.mean).collect()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda");
        for mu in &self.mus {
            let _ = write!(out, ",mu={mu}");
        }
        out.push('\n');
        for (l, row) in self.lambdas.iter().zip(self.mean_matrix()) {
            let _ = write!(out, "{l}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn heat_map(&self) -> String {
        heat_map(
            "mean accuracy",
            "lambda",
            "mu",
            &self.lambdas.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
            &self.mus.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
            &self.mean_matrix(),
        )
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let csv = dir.join("sweep.csv");
        let svg = dir.join("sweep.svg");
        std::fs::write(&csv, self.to_csv())?;
        std::fs::write(&svg, self.heat_map())?;
        Ok(vec![csv, svg])
    }
}

/// One pre-training per λ, one evaluation per (λ, μ).
pub fn sweep(cfg: &RunConfig, base: &Path, lambdas: &[f64], mus: &[f64]) -> Result<SweepReport> {
    if lambdas.is_empty() || mus.is_empty() {
        return Err(Error::Param("sweep grid needs at least one λ and one μ".into()));
    }
    if cfg.checkpoint.is_some() || cfg.bank.is_some() {
        log::warn!("sweep retrains per lambda; the configured checkpoint and bank are ignored");
    }
    cfg.validate()?;
    let sources = cfg.load_sources(base)?;
    let target = cfg.load_target(base)?;
    let mut cells = Vec::new();
    for &lambda in lambdas {
        let mut c = cfg.clone();
        c.lambda = lambda;
        c.checkpoint = None;
        c.bank = None;
        c.validate()?;
        let (model, log) = pretrain(&sources, &c.pretrain_config())?;
        let bank = bank_from_model(&model, &sources, c.n_prime)?;
        let prep = Prepared {
            sources: sources.clone(),
            target: target.clone(),
            model,
            bank,
            pretrain_log: Some(log),
        };
        let mut row = Vec::new();
        for &mu in mus {
            c.mu = mu;
            c.validate()?;
            row.push(evaluate_prepared(&c, &prep)?.metrics);
        }
        cells.push(row);
    }
    Ok(SweepReport {
        lambdas: lambdas.to_vec(),
        mus: mus.to_vec(),
        cells,
    })
}

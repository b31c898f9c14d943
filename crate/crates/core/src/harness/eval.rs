//! Episodic m-shot evaluation.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::episode::{sample_episode, Episode, LabelSource};
use crate::adapt::{Adapter, FinetuneLog, Sample};
use crate::align::raw_input;
use crate::error::{Error, Result};
use crate::graph::{inject_feature_noise, perturb_edges, Graph};
use crate::pretrain::{load_checkpoint, pretrain, PretrainLog, PretrainedModel};
use crate::seed;
use crate::vocab::{build_bank, load_bank, VocabBank};

pub const RESULTS_HEADER: &str = "run,seed,m,accuracy,episodes_to_converge,wall_ms";

/// Vocabularies of every labelled source node, estimated into a bank.
pub fn bank_from_model(model: &PretrainedModel, sources: &[Graph], n_prime: usize) -> Result<VocabBank> {
    let mut vocabs = Vec::new();
    for g in sources {
        let x_hat = model.aligned_features(g)?;
        vocabs.extend(model.encoder.extract_all_vocabularies(g, &x_hat)?);
    }
    build_bank(&vocabs, n_prime)
}

/// Everything shared read-only by the runs of one evaluation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sources: Vec<Graph>,
    pub target: Graph,
    pub model: PretrainedModel,
    pub bank: VocabBank,
    pub pretrain_log: Option<PretrainLog>,
}

/// Loads data, then loads or trains the model and the bank.
pub fn prepare(cfg: &RunConfig, base: &Path) -> Result<Prepared> {
    cfg.validate()?;
    let sources = cfg.load_sources(base)?;
    let target = cfg.load_target(base)?;
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let (model, pretrain_log) = match &cfg.checkpoint {
        Some(p) => (load_checkpoint(resolve(p))?.model, None),
        None => {
            let (m, log) = pretrain(&sources, &cfg.pretrain_config())?;
            (m, Some(log))
        }
    };
    let bank = match &cfg.bank {
        Some(p) => load_bank(resolve(p))?,
        None => bank_from_model(&model, &sources, cfg.n_prime)?,
    };
    Ok(Prepared {
        sources,
        target,
        model,
        bank,
        pretrain_log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run: usize,
    pub seed: u64,
    pub m: usize,
    pub accuracy: f64,
    pub episodes_to_converge: usize,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over runs.
    pub std: f64,
    pub mean_episodes_to_converge: f64,
    pub wall_ms: u64,
}

impl Metrics {
    pub fn from_rows(rows: &[RunRow]) -> Self {
        let accuracies: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
        let n = accuracies.len().max(1) as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        Metrics {
            mean,
            std: var.sqrt(),
            mean_episodes_to_converge: rows.iter().map(|r| r.episodes_to_converge as f64).sum::<f64>() / n,
            wall_ms: rows.iter().map(|r| r.wall_ms).sum(),
            accuracies,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<RunRow>,
    pub metrics: Metrics,
}

/// Predictions of one fitted episode plus its fine-tuning log.
#[derive(Clone, Debug)]
pub struct EpisodeFit {
    pub predictions: Vec<usize>,
    pub log: FinetuneLog,
}

/// Support samples with optional feature/edge noise; labels come from `labels`.
pub fn support_samples(
    cfg: &RunConfig,
    g: &Graph,
    episode: &Episode,
    labels: &dyn LabelSource,
) -> Result<Vec<(Sample, usize)>> {
    episode
        .support_pairs()
        .into_iter()
        .enumerate()
        .map(|(i, (u, _))| {
            let y = labels
                .label(u)
                .ok_or_else(|| Error::Contract(format!("support node {u} is unlabelled")))?;
            let mut s = Sample::around(g, u, cfg.hops)?;
            let noise_seed = seed::derive_path(episode.seed, &[30, i as u64]);
            s.graph = inject_feature_noise(&s.graph, cfg.lambda_f, seed::derive(noise_seed, 0))?;
            s.graph = perturb_edges(&s.graph, cfg.lambda_s, seed::derive(noise_seed, 1))?;
            Ok((s, y))
        })
        .collect()
}

/// Fine-tunes on the support set and predicts every query. Reads only
/// support labels.
pub fn fit_and_predict(
    cfg: &RunConfig,
    prep: &Prepared,
    episode: &Episode,
    labels: &dyn LabelSource,
) -> Result<EpisodeFit> {
    let g = &prep.target;
    let support = support_samples(cfg, g, episode, labels)?;
    let adapter = Adapter::new(
        &prep.model,
        &prep.bank,
        g.domain(),
        &raw_input(g)?,
        cfg.finetune_config(seed::derive(episode.seed, 31)),
    )?;
    let (state, log) = adapter.finetune(g.domain(), &support)?;
    let predictions = episode
        .query
        .iter()
        .map(|&u| adapter.predict(&state, &Sample::around(g, u, cfg.hops)?))
        .collect::<Result<_>>()?;
    Ok(EpisodeFit { predictions, log })
}

/// Query accuracy; the only place query labels are read.
pub fn score(episode: &Episode, predictions: &[usize], labels: &dyn LabelSource) -> Result<f64> {
    if predictions.len() != episode.query.len() {
        return Err(Error::shape("score", &[predictions.len()], &[episode.query.len()]));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let correct = episode
        .query
        .iter()
        .zip(predictions)
        .filter(|(&u, &p)| labels.label(u) == Some(p))
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Seed of run `r`, split from the master seed.
pub fn run_seed(master: u64, run: usize) -> u64 {
    seed::derive_path(master, &[300, run as u64])
}

pub fn run_once(cfg: &RunConfig, prep: &Prepared, run: usize) -> Result<(RunRow, FinetuneLog)> {
    let start = Instant::now();
    let seed = run_seed(cfg.seed, run);
    let episode = sample_episode(&prep.target, cfg.task, cfg.m, seed)?;
    let fit = fit_and_predict(cfg, prep, &episode, &prep.target)?;
    let accuracy = score(&episode, &fit.predictions, &prep.target)?;
    let row = RunRow {
        run,
        seed,
        m: cfg.m,
        accuracy,
        episodes_to_converge: fit.log.episodes_to_converge,
        wall_ms: if cfg.record_wall_time { start.elapsed().as_millis() as u64 } else { 0 },
    };
    Ok((row, fit.log))
}

/// All runs in parallel, rows in run order.
pub fn evaluate_prepared(cfg: &RunConfig, prep: &Prepared) -> Result<EvalReport> {
    let rows = crate::par::map((0..cfg.runs).collect(), |r| run_once(cfg, prep, r).map(|(row, _)| row))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    for r in &rows {
        log::info!("run {} seed {} accuracy {:.4}", r.run, r.seed, r.accuracy);
    }
    Ok(EvalReport {
        metrics: Metrics::from_rows(&rows),
        rows,
    })
}

pub fn evaluate(cfg: &RunConfig, base: &Path) -> Result<EvalReport> {
    let prep = prepare(cfg, base)?;
    evaluate_prepared(cfg, &prep)
}

pub fn results_csv(rows: &[RunRow]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.run, r.seed, r.m, r.accuracy, r.episodes_to_converge, r.wall_ms
        );
    }
    out
}

pub fn write_results(rows: &[RunRow], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, results_csv(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(run: usize, acc: f64) -> RunRow {
        RunRow {
            run,
            seed: run as u64,
            m: 1,
            accuracy: acc,
            episodes_to_converge: 3,
            wall_ms: 0,
        }
    }

    #[test]
    fn single_run_has_zero_std() {
        let m = Metrics::from_rows(&[row(0, 0.7)]);
        assert_eq!(m.std, 0.0);
        assert_eq!(m.mean, 0.7);
    }

    #[test]
    fn population_std() {
        let m = Metrics::from_rows(&[row(0, 0.5), row(1, 1.0)]);
        assert!((m.std - 0.25).abs() < 1e-15);
    }

    #[test]
    fn csv_schema() {
        let csv = results_csv(&[row(0, 0.5)]);
        assert_eq!(csv, "run,seed,m,accuracy,episodes_to_converge,wall_ms\n0,0,1,0.5,3,0\n");
    }
}

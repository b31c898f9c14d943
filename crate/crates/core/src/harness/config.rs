//! JSON run configuration. Every field is a top-level key; missing keys take
//! the defaults below, unknown keys are reported and ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::study::CaseStudySpec;
use crate::adapt::FinetuneConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::{load_dataset, synth_motif_dataset, Attachment, BackboneSpec, FeatureProfile, Graph, MotifKind, MotifSpec};
use crate::pretrain::PretrainConfig;
use crate::seed;

pub const SEED_ENV: &str = "GRAVER_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Node,
    Graph,
}

/// A synthetic motif graph described inline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotifSource {
    pub domain: String,
    pub classes: Vec<MotifSpec>,
    #[serde(default)]
    pub backbone: BackboneSpec,
    /// Fixed generator seed; derived from the master seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

/// A dataset directory path or an inline motif description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SourceSpec {
    Path(PathBuf),
    Motif(MotifSource),
}

impl SourceSpec {
    /// `base` resolves relative paths; `seed` feeds motif sources without one.
    pub fn load(&self, base: &Path, seed: u64) -> Result<Graph> {
        match self {
            SourceSpec::Path(p) => load_dataset(if p.is_absolute() { p.clone() } else { base.join(p) }),
            SourceSpec::Motif(m) => synth_motif_dataset(&m.classes, &m.backbone, &m.domain, m.seed.unwrap_or(seed)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub sources: Vec<SourceSpec>,
    pub target: SourceSpec,
    pub task: Task,
    pub m: usize,
    pub runs: usize,
    pub lambda_f: f64,
    pub lambda_s: f64,
    pub sip_off: bool,
    pub va_off: bool,
    pub mc_uniform: bool,
    /// Aligned width `d`.
    pub d: usize,
    /// Encoder width `h`.
    pub h: usize,
    /// Channels `K`.
    pub k: usize,
    /// Routing rounds `T`.
    pub t: usize,
    pub n_prime: usize,
    pub tau: f64,
    pub rho: f64,
    pub prelu_slope: f64,
    pub lambda: f64,
    pub mu: f64,
    pub lr: f64,
    pub finetune_lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub pretrain_epochs: usize,
    pub max_episodes: usize,
    pub batch_size: usize,
    pub disc_hidden: usize,
    pub router_hidden: usize,
    pub hops: usize,
    pub inference_draws: usize,
    pub seed: u64,
    /// Fill `wall_ms`; off by default so results files stay byte-stable.
    pub record_wall_time: bool,
    /// Reuse a checkpoint instead of pre-training.
    pub checkpoint: Option<PathBuf>,
    /// Reuse a bank instead of rebuilding it.
    pub bank: Option<PathBuf>,
    pub case_study: CaseStudySpec,
}

fn motif(kind: MotifKind, repetitions: usize, mean: Vec<f64>, noise: f64) -> MotifSpec {
    MotifSpec {
        kind,
        repetitions,
        attachment: Attachment::Anchor,
        feature_profile: FeatureProfile { mean, noise },
    }
}

fn one_hot(dim: usize, hot: &[(usize, f64)]) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for &(i, x) in hot {
        v[i] = x;
    }
    v
}

/// Two source domains and one unseen target domain that reuses their motifs
/// with shifted feature means.
pub fn motif_benchmark() -> (Vec<SourceSpec>, SourceSpec) {
    let dim = 8;
    let noise = 0.6;
    let src_a = MotifSource {
        domain: "motif_a".into(),
        classes: vec![
            motif(MotifKind::Triangle, 30, one_hot(dim, &[(0, 1.0)]), noise),
            motif(MotifKind::Ladder { rungs: 3 }, 14, one_hot(dim, &[(1, 1.0)]), noise),
            motif(MotifKind::Star { leaves: 4 }, 16, one_hot(dim, &[(2, 1.0)]), noise),
        ],
        backbone: BackboneSpec::default(),
        seed: None,
    };
    let src_b = MotifSource {
        domain: "motif_b".into(),
        classes: vec![
            motif(MotifKind::Ring { len: 5 }, 16, one_hot(dim, &[(3, 1.0)]), noise),
            motif(MotifKind::Grid { rows: 2, cols: 3 }, 14, one_hot(dim, &[(4, 1.0)]), noise),
            motif(MotifKind::Tree { depth: 2, branching: 2 }, 12, one_hot(dim, &[(5, 1.0)]), noise),
        ],
        backbone: BackboneSpec::default(),
        seed: None,
    };
    let target = MotifSource {
        domain: "motif_target".into(),
        classes: vec![
            motif(MotifKind::Triangle, 10, one_hot(dim, &[(0, 0.5), (6, 0.5)]), noise),
            motif(MotifKind::Ladder { rungs: 3 }, 5, one_hot(dim, &[(1, 0.5), (6, 0.5)]), noise),
            motif(MotifKind::Ring { len: 5 }, 6, one_hot(dim, &[(3, 0.5), (7, 0.5)]), noise),
        ],
        backbone: BackboneSpec::default(),
        seed: None,
    };
    (vec![SourceSpec::Motif(src_a), SourceSpec::Motif(src_b)], SourceSpec::Motif(target))
}

impl Default for RunConfig {
    fn default() -> Self {
        let (sources, target) = motif_benchmark();
        let enc = EncoderConfig::default();
        let pre = PretrainConfig::default();
        let ft = FinetuneConfig::default();
        RunConfig {
            sources,
            target,
            task: Task::Node,
            m: 1,
            runs: 20,
            lambda_f: 0.0,
            lambda_s: 0.0,
            sip_off: false,
            va_off: false,
            mc_uniform: false,
            d: enc.input_dim,
            h: enc.hidden_dim,
            k: enc.channels,
            t: enc.iterations,
            n_prime: crate::vocab::DEFAULT_N_PRIME,
            tau: enc.tau,
            rho: enc.rho,
            prelu_slope: enc.prelu_slope,
            lambda: pre.lambda,
            mu: ft.mu,
            lr: pre.lr,
            finetune_lr: ft.lr,
            weight_decay: pre.weight_decay,
            patience: pre.patience,
            pretrain_epochs: pre.max_epochs,
            max_episodes: ft.max_episodes,
            batch_size: pre.batch_size,
            disc_hidden: pre.disc_hidden,
            router_hidden: ft.router_hidden,
            hops: ft.hops,
            inference_draws: ft.inference_draws,
            seed: 0,
            record_wall_time: false,
            checkpoint: None,
            bank: None,
            case_study: CaseStudySpec::default(),
        }
    }
}

/// A parsed configuration plus the keys that were ignored.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub unknown_keys: Vec<String>,
    /// Directory relative dataset paths resolve against.
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Param("runs must be at least 1".into()));
        }
        if self.m == 0 {
            return Err(Error::Param("m must be at least 1".into()));
        }
        if self.sources.is_empty() {
            return Err(Error::Param("at least one source dataset is required".into()));
        }
        if self.n_prime == 0 {
            return Err(Error::Param("n_prime must be at least 1".into()));
        }
        self.pretrain_config().validate()?;
        self.finetune_config(self.seed).validate()
    }

    /// Parses JSON text; unknown keys are returned, not rejected.
    pub fn from_json(text: &str) -> Result<(Self, Vec<String>)> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Param("configuration must be a JSON object".into()))?;
        let known = serde_json::to_value(RunConfig::default())?;
        let known = known.as_object().expect("struct serialises to an object");
        let unknown: Vec<String> = obj.keys().filter(|k| !known.contains_key(*k)).cloned().collect();
        for k in &unknown {
            log::warn!("ignoring unknown configuration key `{k}`");
        }
        let cfg: RunConfig = serde_json::from_value(value)?;
        Ok((cfg, unknown))
    }

    /// Reads a config file and applies the `GRAVER_SEED` override.
    pub fn load(path: impl AsRef<Path>) -> Result<LoadedConfig> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let (mut config, unknown_keys) = Self::from_json(&std::fs::read_to_string(path)?)?;
        config.apply_env()?;
        config.validate()?;
        Ok(LoadedConfig {
            config,
            unknown_keys,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::Param(format!("{SEED_ENV} must be an unsigned integer, got `{raw}`")))?;
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.d,
            hidden_dim: self.h,
            channels: self.k,
            iterations: self.t,
            tau: self.tau,
            rho: self.rho,
            prelu_slope: self.prelu_slope,
        }
    }

    /// Pre-training settings; `sip_off` zeroes the MI weight.
    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            lambda: if self.sip_off { 0.0 } else { self.lambda },
            max_epochs: self.pretrain_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            disc_hidden: self.disc_hidden,
            seed: seed::derive(self.seed, 100),
            encoder: self.encoder_config(),
        }
    }

    pub fn finetune_config(&self, run_seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            mu: self.mu,
            shots: self.m,
            max_episodes: self.max_episodes,
            patience: self.patience,
            lr: self.finetune_lr,
            weight_decay: self.weight_decay,
            router_hidden: self.router_hidden,
            hops: self.hops,
            inference_draws: self.inference_draws,
            seed: run_seed,
            sip_off: self.sip_off,
            va_off: self.va_off,
            mc_uniform: self.mc_uniform,
        }
    }

    /// Source graphs, motif generators seeded from the master seed.
    pub fn load_sources(&self, base: &Path) -> Result<Vec<Graph>> {
        self.sources
            .iter()
            .enumerate()
            .map(|(i, s)| s.load(base, seed::derive_path(self.seed, &[200, i as u64])))
            .collect()
    }

    pub fn load_target(&self, base: &Path) -> Result<Graph> {
        self.target.load(base, seed::derive(self.seed, 201))
    }
}

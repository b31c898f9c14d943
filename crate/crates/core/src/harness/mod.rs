//! Episodic evaluation, configuration, case study, sweep and plots.

mod config;
mod episode;
mod eval;
mod study;
pub mod svg;

pub use config::{motif_benchmark, LoadedConfig, MotifSource, RunConfig, SourceSpec, Task, SEED_ENV};
pub use episode::{sample_episode, Episode, LabelSource, LoggingLabels};
pub use eval::{
    bank_from_model, evaluate, evaluate_prepared, fit_and_predict, prepare, results_csv, run_once, run_seed, score,
    support_samples, write_results, EpisodeFit, EvalReport, Metrics, Prepared, RunRow, RESULTS_HEADER,
};
pub use study::{case_study, sweep, CaseRun, CaseStudyReport, CaseStudySpec, SweepReport};

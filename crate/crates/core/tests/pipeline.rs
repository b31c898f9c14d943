mod common;

use std::path::Path;

use common::{separable_config, tiny_config};
use graver::adapt::{argmax, load_state, save_state, Adapter, Sample};
use graver::align::raw_input;
use graver::encoder::RoutingEdges;
use graver::error::Error;
use graver::harness::{
    case_study, evaluate, evaluate_prepared, fit_and_predict, prepare, run_seed, sample_episode, score, support_samples,
    sweep, CaseStudySpec, LoggingLabels, RunConfig,
};
use graver::pretrain::{load_checkpoint, save_checkpoint, Checkpoint};
use graver::seed;
use graver::vocab::{load_bank, save_bank};

fn here() -> &'static Path {
    Path::new(".")
}

#[test]
fn artifacts_round_trip() {
    let cfg = tiny_config(3);
    let prep = prepare(&cfg, here()).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let ck = dir.path().join("model.json");
    save_checkpoint(&Checkpoint::new(prep.model.clone(), cfg.lambda, serde_json::json!({"k": cfg.k})), &ck).unwrap();
    assert_eq!(load_checkpoint(&ck).unwrap().model, prep.model);

    let bk = dir.path().join("bank.json");
    save_bank(&prep.bank, &bk).unwrap();
    assert_eq!(load_bank(&bk).unwrap(), prep.bank);

    let g = &prep.target;
    let episode = sample_episode(g, cfg.task, cfg.m, run_seed(cfg.seed, 0)).unwrap();
    let support = support_samples(&cfg, g, &episode, g).unwrap();
    let adapter = Adapter::new(&prep.model, &prep.bank, g.domain(), &raw_input(g).unwrap(), cfg.finetune_config(5)).unwrap();
    let (state, _) = adapter.finetune(g.domain(), &support).unwrap();
    assert!(state.target_aligner.is_some(), "target domain is unseen, its aligner is trained");
    let st = dir.path().join("state.json");
    save_state(&state, serde_json::Value::Null, &st).unwrap();
    assert_eq!(load_state(&st).unwrap().state, state);

    std::fs::write(&st, r#"{"version": 99, "state": {}}"#).unwrap();
    assert!(matches!(load_state(&st), Err(Error::Version { found: 99, .. })));
}

#[test]
fn zero_episodes_leave_adapter_untouched() {
    let mut cfg = tiny_config(4);
    cfg.max_episodes = 0;
    let prep = prepare(&cfg, here()).unwrap();
    let g = &prep.target;
    let episode = sample_episode(g, cfg.task, cfg.m, 11).unwrap();
    let support = support_samples(&cfg, g, &episode, g).unwrap();
    let adapter = Adapter::new(&prep.model, &prep.bank, g.domain(), &raw_input(g).unwrap(), cfg.finetune_config(2)).unwrap();
    let (state, log) = adapter.finetune(g.domain(), &support).unwrap();
    let init = adapter.initial_state(g.domain());
    assert!(log.losses.is_empty());
    assert_eq!(state.prompt, init.prompt);
    assert_eq!(state.router, init.router);
    assert_eq!(state.target_aligner, init.target_aligner);
}

#[test]
fn ablated_untrained_path_is_plain_prototype_matching() {
    let mut cfg = tiny_config(5);
    cfg.max_episodes = 0;
    cfg.va_off = true;
    cfg.mc_uniform = true;
    let prep = prepare(&cfg, here()).unwrap();
    let g = &prep.target;
    let episode = sample_episode(g, cfg.task, 2, 12).unwrap();
    let support = support_samples(&cfg, g, &episode, g).unwrap();
    let adapter = Adapter::new(&prep.model, &prep.bank, g.domain(), &raw_input(g).unwrap(), cfg.finetune_config(3)).unwrap();
    let (state, _) = adapter.finetune(g.domain(), &support).unwrap();

    let embed = |s: &Sample| {
        let x = adapter.aligner.apply(g.domain(), s.graph.features()).unwrap();
        let emb = prep.model.encoder.embed(&x, &RoutingEdges::from_graph(&s.graph)).unwrap();
        emb.values.row_slice(0).to_vec()
    };
    let classes = episode.classes;
    let mut protos = vec![vec![0.0; cfg.h]; classes];
    for (s, y) in &support {
        for (p, v) in protos[*y].iter_mut().zip(embed(s)) {
            *p += v / 2.0;
        }
    }
    for &u in episode.query.iter().take(25) {
        let q = Sample::around(g, u, cfg.hops).unwrap();
        let h = embed(&q);
        let scores: Vec<f64> = protos.iter().map(|p| prep.model.discriminator.score(&h, p)).collect();
        assert_eq!(adapter.predict(&state, &q).unwrap(), argmax(&scores));
    }
}

#[test]
fn training_accuracy_does_not_drop() {
    let mut cfg = tiny_config(6);
    cfg.m = 2;
    cfg.max_episodes = 200;
    cfg.patience = 200;
    let prep = prepare(&cfg, here()).unwrap();
    let mut ok = 0;
    for s in 0..10 {
        let (_, log) = graver::harness::run_once(&cfg, &prep, s).unwrap();
        if log.train_accuracy.last() >= log.train_accuracy.first() {
            ok += 1;
        }
    }
    assert!(ok >= 9, "training accuracy ended at or above its start in {ok}/10 runs");
}

#[test]
fn query_labels_are_read_only_when_scoring() {
    let cfg = tiny_config(7);
    let prep = prepare(&cfg, here()).unwrap();
    let episode = sample_episode(&prep.target, cfg.task, cfg.m, 21).unwrap();
    let labels = LoggingLabels::new(&prep.target);
    let fit = fit_and_predict(&cfg, &prep, &episode, &labels).unwrap();
    let mut read = labels.reads();
    read.sort_unstable();
    let mut support: Vec<usize> = episode.support.iter().flatten().copied().collect();
    support.sort_unstable();
    assert_eq!(read, support);

    labels.clear();
    score(&episode, &fit.predictions, &labels).unwrap();
    assert_eq!(labels.reads(), episode.query);
}

#[test]
fn separable_task_is_solved() {
    let cfg = separable_config(8);
    let report = evaluate(&cfg, here()).unwrap();
    for r in &report.rows {
        assert_eq!(r.accuracy, 1.0, "run {} scored {}", r.run, r.accuracy);
    }
}

#[test]
fn evaluation_is_deterministic() {
    let cfg = tiny_config(9);
    let prep = prepare(&cfg, here()).unwrap();
    let a = evaluate_prepared(&cfg, &prep).unwrap();
    let b = evaluate(&cfg, here()).unwrap();
    assert_eq!(a.rows, b.rows);
    assert!(a.rows.iter().all(|r| r.wall_ms == 0));
    let one = RunConfig { runs: 1, ..cfg };
    assert_eq!(evaluate_prepared(&one, &prep).unwrap().metrics.std, 0.0);
}

#[test]
fn case_study_writes_parseable_reports() {
    let cfg = tiny_config(10);
    let prep = prepare(&cfg, here()).unwrap();
    let same = CaseStudySpec { seeds: 2, mismatched: graver::graph::MotifKind::Triangle, ..Default::default() };
    let r = case_study(&cfg, &same, &prep, here()).unwrap();
    assert_eq!(r.matched, r.mismatched);

    let spec = CaseStudySpec { seeds: 2, ..Default::default() };
    let report = case_study(&cfg, &spec, &prep, here()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = report.write(dir.path()).unwrap();
    assert_eq!(files.len(), 4);
    let curves = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    let rows: Vec<&str> = curves.lines().collect();
    assert_eq!(rows[0], "variant,seed,episode,loss,train_accuracy");
    let total: usize = report.matched.iter().chain(&report.mismatched).map(|r| r.log.losses.len()).sum();
    assert_eq!(rows.len(), total + 1);
    for line in &rows[1..] {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 5);
        assert!(f[3].parse::<f64>().unwrap().is_finite());
    }
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    let svg = std::fs::read_to_string(dir.path().join("loss.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn sweep_grid_is_reproducible() {
    let cfg = RunConfig { runs: 2, ..tiny_config(11) };
    let single = sweep(&cfg, here(), &[0.4], &[0.2]).unwrap();
    let direct = evaluate(&RunConfig { lambda: 0.4, mu: 0.2, ..cfg.clone() }, here()).unwrap();
    assert_eq!(single.cells[0][0], direct.metrics);

    let start = std::time::Instant::now();
    let a = sweep(&cfg, here(), &[0.0, 0.5], &[0.0, 0.5]).unwrap();
    let elapsed = start.elapsed();
    let b = sweep(&cfg, here(), &[0.0, 0.5], &[0.0, 0.5]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_csv().lines().count(), 3);
    assert!(elapsed.as_secs() < 120, "2x2 sweep took {elapsed:?}");
}

#[test]
fn seen_target_domain_reuses_its_aligner() {
    let mut cfg = tiny_config(12);
    cfg.target = cfg.sources[0].clone();
    let prep = prepare(&cfg, here()).unwrap();
    let g = &prep.target;
    let adapter = Adapter::new(&prep.model, &prep.bank, g.domain(), &raw_input(g).unwrap(), cfg.finetune_config(1)).unwrap();
    assert!(adapter.initial_state(g.domain()).target_aligner.is_none());
    let episode = sample_episode(g, cfg.task, 1, seed::derive(1, 2)).unwrap();
    let fit = fit_and_predict(&cfg, &prep, &episode, g).unwrap();
    assert_eq!(fit.predictions.len(), episode.query.len());
}

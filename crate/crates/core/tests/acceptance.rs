//! End-to-end acceptance checks. Each criterion writes one PASS/FAIL line to
//! stderr (bypassing the test harness capture) and the test fails if any
//! criterion does.

mod common;

use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use graver::adapt::moe_coe_loss;
use graver::autodiff::{gaussian, Tensor};
use graver::encoder::{mi_regularizer, DisentangledEncoder, EncoderConfig, RoutingEdges};
use graver::graph::{ego_graph, Graph};
use graver::harness::{evaluate_prepared, prepare, Metrics, RunConfig};
use graver::pretrain::pretrain;
use graver::seed;
use graver::theory::check_bound;
use graver::vocab::{estimate_graphons, generate, generate_with, tv_distance, FeatureGraphon, LatentLaw, StructureGraphon, TvMode};
use graver::encoder::DisentangledVocab;
use rand::Rng;

const C1_COMPOSITIONS: u64 = 200;
const C1_MAX_SECS: u64 = 30;
const C2_CALLS: u64 = 1000;
const C2_TOL: f64 = 1e-9;
const C3_PAIRS: usize = 100;
const C3_MAX_SECS: u64 = 60;
const C4_SIZES: [usize; 4] = [4, 16, 64, 256];
const C4_SEEDS: u64 = 10;
const C4_SELF_SAMPLES: u64 = 10_000;
const C4_EXACT_TOL: f64 = 0.05;
const C5_GENERATIONS: u64 = 10_000;
const C5_SE: f64 = 3.0;
const C5_MIN_FRACTION: f64 = 0.95;
const C6_TOL: f64 = 1e-12;
const C7_STD_RATIO: f64 = 0.8;
const C7_MAX_SECS: u64 = 600;
const C8_LAMBDA: f64 = 0.5;
const C8_MIN_WINS: usize = 7;
const C9_MIN_SEEDS: usize = 2;
const BENCH_SEEDS: [u64; 3] = [1, 2, 3];

fn report(results: &mut Vec<(usize, bool)>, id: usize, name: &str, pass: bool, detail: String) {
    let line = format!("C{id} {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    results.push((id, pass));
}

fn random_graph(n: usize, p: f64, d: usize, rng: &mut impl Rng) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let labels = (0..n).map(|u| (u, 0)).collect();
    Graph::new(n, edges, gaussian(rng, n, d, 1.0), labels, 1, "acc").unwrap()
}

fn c1(results: &mut Vec<(usize, bool)>) {
    let start = Instant::now();
    let worst = (0..C1_COMPOSITIONS)
        .map(|s| common::Program::random(seed::derive(17, s)).max_rel_err())
        .fold(0.0, f64::max);
    let took = start.elapsed();
    let pass = worst <= common::GRAD_REL_TOL && took < Duration::from_secs(C1_MAX_SECS);
    report(results, 1, "gradient correctness", pass, format!("max rel err {worst:.2e}, {took:.1?}"));
}

fn c2(results: &mut Vec<(usize, bool)>) {
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for s in 0..C2_CALLS {
        let mut rng = seed::rng(seed::derive(21, s));
        let n = rng.random_range(2..12);
        let d = rng.random_range(1..6);
        let k = rng.random_range(1..5);
        let g = random_graph(n, rng.random_range(0.2..0.9), d, &mut rng);
        let cfg = EncoderConfig {
            input_dim: d,
            hidden_dim: k * rng.random_range(1..4),
            channels: k,
            tau: rng.random_range(0.1..2.0),
            ..Default::default()
        };
        let enc = DisentangledEncoder::new(cfg, s).unwrap();
        let ego = ego_graph(&g, rng.random_range(0..n), 2).unwrap();
        let emb = enc.init_channels(&g.features().select_rows(&ego.nodes)).unwrap();
        let (att, _) = enc.route_iteration(&emb, &ego).unwrap();
        for i in 0..att.alpha.rows() {
            worst = worst.max((att.alpha.row_slice(i).iter().sum::<f64>() - 1.0).abs());
            rows += 1;
        }
    }
    report(results, 2, "routing simplex", worst <= C2_TOL, format!("{rows} rows, max |sum-1| {worst:.1e}"));
}

fn c3(results: &mut Vec<(usize, bool)>) {
    let start = Instant::now();
    let cfg = RunConfig { d: 16, h: 32, k: 4, t: 2, pretrain_epochs: 100, batch_size: 64, seed: 3, ..RunConfig::default() };
    let sources = cfg.load_sources(Path::new(".")).unwrap();
    let pcfg = cfg.pretrain_config();
    let (trained, _) = pretrain(&sources, &pcfg).unwrap();
    let random = graver::pretrain::PretrainedModel::init(&sources, &pcfg).unwrap();
    let g = &sources[0];
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, model) in [("random", &random), ("trained", &trained)] {
        let x_hat = model.aligned_features(g).unwrap();
        let r = check_bound(&model.encoder, g, &x_hat, C3_PAIRS, 5).unwrap();
        pass &= r.pass_count() == C3_PAIRS && r.pairs.len() == C3_PAIRS;
        parts.push(format!("{name} {}/{}", r.pass_count(), r.pairs.len()));
    }
    let took = start.elapsed();
    pass &= took < Duration::from_secs(C3_MAX_SECS);
    report(results, 3, "transferability bound", pass, format!("{}, {took:.1?}", parts.join(", ")));
}

fn planted() -> StructureGraphon {
    // expected degrees 2.4, 1.7, 1.4, 1.1 keep the degree ordering mostly stable
    let mut w = Tensor::zeros(4, 4);
    for (i, j, p) in [(0, 1, 0.9), (0, 2, 0.8), (0, 3, 0.7), (1, 2, 0.5), (1, 3, 0.3), (2, 3, 0.1)] {
        w.set(i, j, p);
        w.set(j, i, p);
    }
    StructureGraphon::new(w).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn c4(results: &mut Vec<(usize, bool)>) {
    let truth = planted();
    let zeros = FeatureGraphon::new(Tensor::zeros(4, 1)).unwrap();
    let medians: Vec<f64> = C4_SIZES
        .iter()
        .map(|&n_c| {
            let tvs = (0..C4_SEEDS)
                .map(|s| {
                    let base = seed::derive_path(41, &[n_c as u64, s]);
                    let vocabs: Vec<DisentangledVocab> = (0..n_c as u64)
                        .map(|i| {
                            let v = generate_with(&truth, &zeros, LatentLaw::FixedGrid, seed::derive(base, i)).unwrap();
                            DisentangledVocab {
                                nodes: (0..4).collect(),
                                adjacency: v.adjacency,
                                features: v.features,
                                class: 0,
                                domain: "planted".into(),
                                channel: 0,
                            }
                        })
                        .collect();
                    let (est, est_x) = estimate_graphons(&vocabs, 4).unwrap();
                    let draws: Vec<Tensor> = (0..2000)
                        .map(|i| generate_with(&est, &est_x, LatentLaw::FixedGrid, seed::derive_path(base, &[1, i])).unwrap().adjacency)
                        .collect();
                    tv_distance(&draws, &truth, TvMode::EdgeMarginal, LatentLaw::FixedGrid).unwrap()
                })
                .collect();
            median(tvs)
        })
        .collect();

    let mut w = Tensor::zeros(3, 3);
    for (i, j, p) in [(0, 1, 0.7), (0, 2, 0.4), (1, 2, 0.2)] {
        w.set(i, j, p);
        w.set(j, i, p);
    }
    let model = StructureGraphon::new(w).unwrap();
    let x = FeatureGraphon::new(Tensor::zeros(3, 1)).unwrap();
    let samples: Vec<Tensor> = (0..C4_SELF_SAMPLES).map(|s| generate(&model, &x, seed::derive(43, s)).unwrap().adjacency).collect();
    let exact = tv_distance(&samples, &model, TvMode::Exact, LatentLaw::Sampled).unwrap();

    let pass = medians[medians.len() - 1] < medians[0] && exact < C4_EXACT_TOL;
    let trend: Vec<String> = C4_SIZES.iter().zip(&medians).map(|(n, m)| format!("N={n}:{m:.4}")).collect();
    report(results, 4, "graphon convergence", pass, format!("median TV {}, exact self TV {exact:.4}", trend.join(" ")));
}

fn c5(results: &mut Vec<(usize, bool)>) {
    let n = 10;
    let mut w = Tensor::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let p = 0.1 * (k % 9 + 1) as f64;
            w.set(i, j, p);
            w.set(j, i, p);
            k += 1;
        }
    }
    let model = StructureGraphon::new(w.clone()).unwrap();
    let x = FeatureGraphon::new(Tensor::zeros(n, 1)).unwrap();
    let mut counts = Tensor::zeros(n, n);
    for s in 0..C5_GENERATIONS {
        counts.add_assign(&generate_with(&model, &x, LatentLaw::FixedGrid, seed::derive(51, s)).unwrap().adjacency).unwrap();
    }
    let trials = C5_GENERATIONS as f64;
    let (mut within, mut total) = (0, 0);
    for i in 0..n {
        for j in i + 1..n {
            let p = w.get(i, j);
            let se = (p * (1.0 - p) / trials).sqrt();
            if (counts.get(i, j) / trials - p).abs() <= C5_SE * se {
                within += 1;
            }
            total += 1;
        }
    }
    let frac = within as f64 / total as f64;
    report(results, 5, "sampler calibration", frac >= C5_MIN_FRACTION, format!("{within}/{total} entries within {C5_SE} SE"));
}

fn c6(results: &mut Vec<(usize, bool)>) {
    let mut worst: f64 = 0.0;
    for n in 1..=5 {
        for c in 1..=6 {
            let mut hot_m = vec![0.0; n];
            hot_m[n - 1] = 1.0;
            let mut hot_c = vec![0.0; c];
            hot_c[0] = 1.0;
            worst = worst.max(moe_coe_loss(&hot_m, &[hot_c], n).abs());
            let uni = moe_coe_loss(&vec![1.0 / n as f64; n], &[vec![1.0 / c as f64; c]], n);
            let want = (n as f64).ln() + n as f64 * (c as f64).ln();
            worst = worst.max((uni - want).abs());
        }
    }
    report(results, 6, "entropy anchors", worst <= C6_TOL, format!("max deviation {worst:.1e}"));
}

/// Fixed before any result was looked at: the motif benchmark at a scale
/// that keeps the three seeds under the time budget.
fn bench_config(seed: u64) -> RunConfig {
    RunConfig {
        d: 16,
        h: 32,
        k: 4,
        t: 2,
        n_prime: 8,
        pretrain_epochs: 200,
        batch_size: 64,
        hops: 1,
        m: 1,
        runs: 20,
        seed,
        ..RunConfig::default()
    }
}

struct Ablation {
    full: Metrics,
    va_off: Metrics,
    mc_uniform: Metrics,
}

fn c7_c9(results: &mut Vec<(usize, bool)>) {
    let start = Instant::now();
    let runs: Vec<Ablation> = BENCH_SEEDS
        .iter()
        .map(|&s| {
            let cfg = bench_config(s);
            let prep = prepare(&cfg, Path::new(".")).unwrap();
            let eval = |c: RunConfig| evaluate_prepared(&c, &prep).unwrap().metrics;
            Ablation {
                full: eval(cfg.clone()),
                va_off: eval(RunConfig { va_off: true, ..cfg.clone() }),
                mc_uniform: eval(RunConfig { mc_uniform: true, ..cfg.clone() }),
            }
        })
        .collect();
    let took = start.elapsed();

    let fmt = |m: &Metrics| format!("{:.3}±{:.3}", m.mean, m.std);
    let stable = runs
        .iter()
        .filter(|a| a.full.std <= C7_STD_RATIO * a.va_off.std && a.full.mean >= a.va_off.mean)
        .count();
    let detail: Vec<String> = BENCH_SEEDS
        .iter()
        .zip(&runs)
        .map(|(s, a)| format!("seed {s}: full {} va_off {} mc_uniform {}", fmt(&a.full), fmt(&a.va_off), fmt(&a.mc_uniform)))
        .collect();
    let pass7 = stable * 2 > runs.len() && took < Duration::from_secs(C7_MAX_SECS);
    report(
        results,
        7,
        "augmentation stability",
        pass7,
        format!("{stable}/{} seeds with std ratio <= {C7_STD_RATIO} and mean not lower, {took:.1?}; {}", runs.len(), detail.join("; ")),
    );

    let ordered = runs
        .iter()
        .filter(|a| a.full.mean >= a.mc_uniform.mean && a.full.mean >= a.va_off.mean)
        .count();
    report(
        results,
        9,
        "ablation ordering",
        ordered >= C9_MIN_SEEDS,
        format!("{ordered}/{} seeds with full >= mc_uniform and full >= va_off", runs.len()),
    );
}

fn channel_mi(cfg: &RunConfig, lambda: f64) -> f64 {
    let sources = cfg.load_sources(Path::new(".")).unwrap();
    let pcfg = graver::pretrain::PretrainConfig { lambda, ..cfg.pretrain_config() };
    let (model, _) = pretrain(&sources, &pcfg).unwrap();
    sources
        .iter()
        .map(|g| {
            let x = model.aligned_features(g).unwrap();
            let h = model.encoder.embed(&x, &RoutingEdges::from_graph(g)).unwrap();
            mi_regularizer(&h.values, cfg.k, cfg.tau).unwrap()
        })
        .sum()
}

fn c8(results: &mut Vec<(usize, bool)>) {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for s in 0..10 {
        let cfg = RunConfig { d: 8, h: 16, k: 4, t: 2, pretrain_epochs: 100, batch_size: 64, seed: 80 + s, ..RunConfig::default() };
        let (with, without) = (channel_mi(&cfg, C8_LAMBDA), channel_mi(&cfg, 0.0));
        if with < without {
            wins += 1;
        }
        pairs.push(format!("{with:.3}/{without:.3}"));
    }
    report(results, 8, "MI regularizer effect", wins >= C8_MIN_WINS, format!("{wins}/10 seeds lower with lambda {C8_LAMBDA}; {}", pairs.join(" ")));
}

fn c10(results: &mut Vec<(usize, bool)>) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { d: 8, h: 16, k: 2, t: 2, n_prime: 5, pretrain_epochs: 30, batch_size: 32, runs: 5, max_episodes: 40, seed: 101, ..RunConfig::default() };
    let config = dir.path().join("config.json");
    std::fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_graver"))
            .args(["eval", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .env_remove("GRAVER_SEED")
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        std::fs::read(out).unwrap()
    };
    let (a, b) = (run("a.csv"), run("b.csv"));
    report(results, 10, "determinism", a == b && !a.is_empty(), format!("{} bytes, identical: {}", a.len(), a == b));
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    c1(&mut results);
    c2(&mut results);
    c3(&mut results);
    c4(&mut results);
    c5(&mut results);
    c6(&mut results);
    c7_c9(&mut results);
    c8(&mut results);
    c10(&mut results);
    results.sort_by_key(|r| r.0);
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

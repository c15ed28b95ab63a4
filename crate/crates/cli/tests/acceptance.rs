//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mpc_portfolio::configspace::{Configuration, ConfigurationSpace, HyperparameterSpec, Value};
use mpc_portfolio::dynamics::{self, Family, Split, SystemSpec, Trajectory};
use mpc_portfolio::portfolio::{coverage, greedy_columns, portfolio_from_matrix, CandidateSet, PerformanceMatrix};
use mpc_portfolio::report::{gain_percent, welch_t_test, ALPHA};
use mpc_portfolio::rng;
use mpc_portfolio::sysid::{self, model_config_space, ModelScore, Predictor};
use mpc_portfolio::tuner::{self, expected_improvement};
use mpc_portfolio_cli::experiments::{self, DatasetSpec, ExperimentConfig, WarmstartReport};
use mpc_portfolio_cli::Global;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, pass: String, fail: String) -> Outcome {
    if cond {
        Ok(pass)
    } else {
        Err(fail)
    }
}

// Criterion 1 -------------------------------------------------------------

fn table_gains() -> Outcome {
    let rows: [(f64, f64, f64); 10] = [
        (0.5987, 0.5944, 0.7182),
        (12.9722, 12.7447, 1.7538),
        (1.2506, 1.2395, 0.8876),
        (2.5899, 2.5499, 1.5445),
        (0.8803, 0.8573, 2.6127),
        (5.5249, 5.4808, 0.7982),
        (2.5504, 2.5358, 0.5725),
        (0.8194, 0.8090, 1.2692),
        (0.8656, 0.8085, 6.5966),
        (8.4000, 7.1600, 14.7619),
    ];
    let mut worst: f64 = 0.0;
    for (b, m, g) in rows {
        let got = gain_percent(b, m).map_err(|e| e.to_string())?;
        worst = worst.max((got - g).abs());
    }
    check(
        worst <= 1e-4,
        format!("10 printed gains reproduced, max error {worst:.1e}"),
        format!("max gain error {worst:.3e} > 1e-4"),
    )
}

// Criterion 2 -------------------------------------------------------------

fn two_loop_rmse<P: Predictor>(model: &P, data: &[Trajectory]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for traj in data {
        for t in 0..traj.controls.len() {
            let pred = model.predict(&traj.states[t], &traj.controls[t]);
            for i in 0..pred.len() {
                let e = pred[i] - traj.states[t + 1][i];
                sum += e * e;
                count += 1;
            }
        }
    }
    (sum / count as f64).sqrt()
}

fn linear_trajectories(seed: u64) -> Vec<Trajectory> {
    let a = [[0.95, 0.1], [-0.05, 0.9]];
    let b = [0.0, 0.2];
    let mut r = rng::rng(seed);
    (0..9)
        .map(|_| {
            let mut x = vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            let mut states = vec![x.clone()];
            let mut controls = Vec::new();
            for _ in 0..30 {
                let u: f64 = r.gen_range(-1.0..1.0);
                x = (0..2).map(|i| a[i][0] * x[0] + a[i][1] * x[1] + b[i] * u).collect();
                states.push(x.clone());
                controls.push(vec![u]);
            }
            Trajectory { states, controls, dt: 0.05 }
        })
        .collect()
}

fn model_score_oracle() -> Outcome {
    let space = model_config_space();
    let mut r = rng::rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let family = if r.gen_bool(0.5) { Family::Pendulum } else { Family::Cartpole };
        let ds = dynamics::generate_dataset("d", &SystemSpec::of_family(family), 9, 20, r.gen(), Split::default())
            .map_err(|e| e.to_string())?;
        let config = space.sample(r.gen());
        let model = sysid::train(&config, ds.train()).map_err(|e| e.to_string())?;
        let got = sysid::score(&model, ds.test()).map_err(|e| e.to_string())?.rmse.ok_or("failed score")?;
        worst = worst.max((got - two_loop_rmse(&model, ds.test())).abs());

        let k = 3;
        let seed = r.gen();
        let folds = sysid::fold_assignment(ds.train().len(), k, seed);
        let mut total = 0.0;
        for held in &folds {
            let train: Vec<Trajectory> = (0..ds.train().len())
                .filter(|i| !held.contains(i))
                .map(|i| ds.train()[i].clone())
                .collect();
            let test: Vec<Trajectory> = held.iter().map(|&i| ds.train()[i].clone()).collect();
            let m = sysid::train(&config, &train).map_err(|e| e.to_string())?;
            total += two_loop_rmse(&m, &test);
        }
        let cv = sysid::cv_score(&config, ds.train(), k, seed).map_err(|e| e.to_string())?;
        worst = worst.max((cv.rmse.ok_or("failed cv")? - total / k as f64).abs());
    }
    let linear = space
        .parse_flat("model_class=linear;linear:ridge_lambda=1e-8")
        .map_err(|e| e.to_string())?;
    let cv = sysid::cv_score(&linear, &linear_trajectories(1), 3, 0)
        .map_err(|e| e.to_string())?
        .rmse
        .ok_or("failed linear cv")?;
    check(
        worst <= 1e-12 && cv <= 1e-8,
        format!("5 pairs within {worst:.1e} of the two-loop reference; linear cv rmse {cv:.1e}"),
        format!("max deviation {worst:.3e} (tol 1e-12), linear cv rmse {cv:.3e} (tol 1e-8)"),
    )
}

// Criterion 3 -------------------------------------------------------------

fn oracle_greedy(m: &[Vec<f64>], p: usize) -> Vec<usize> {
    let cols = m[0].len();
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..p.min(cols) {
        let mut best: Option<(f64, usize)> = None;
        for j in (0..cols).filter(|j| !chosen.contains(j)) {
            let phi: f64 = m
                .iter()
                .map(|row| chosen.iter().chain([&j]).map(|&c| row[c]).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / m.len() as f64;
            if best.map_or(true, |(b, _)| phi < b) {
                best = Some((phi, j));
            }
        }
        chosen.push(best.expect("columns left").1);
    }
    chosen
}

fn greedy_correctness() -> Outcome {
    let mut r = rng::rng(77);
    for case in 0..100 {
        let m: Vec<Vec<f64>> = (0..6).map(|_| (0..8).map(|_| r.gen_range(0.0..1.0)).collect()).collect();
        for p in [1, 3, 8] {
            let (cols, trace) = greedy_columns(&m, p).map_err(|e| e.to_string())?;
            if cols != oracle_greedy(&m, p) {
                return Err(format!("matrix {case}, p={p}: {cols:?} differs from the oracle"));
            }
            if trace.windows(2).any(|w| w[1] > w[0]) {
                return Err(format!("matrix {case}: trace increases {trace:?}"));
            }
            if (trace[trace.len() - 1] - coverage(&m, &cols)).abs() > 1e-15 {
                return Err(format!("matrix {case}: final trace entry is not the coverage"));
            }
        }
    }
    // Nesting: one 5 x 24 matrix, sizes 5..20.
    let space = ConfigurationSpace::new("x", vec![HyperparameterSpec::continuous("x", 0.0, 1.0, false, 0.5)])
        .map_err(|e| e.to_string())?;
    let ids: Vec<String> = (0..5).map(|i| format!("d{i}")).collect();
    let cands = CandidateSet::from_incumbents((0..24).map(|j| (format!("d{}", j % 5), Some(space.sample(j)))))
        .map_err(|e| e.to_string())?;
    let n = cands.len();
    let cells = (0..5).map(|_| (0..n).map(|_| Some(r.gen_range(0.1..5.0))).collect()).collect();
    let matrix = PerformanceMatrix::from_cells(ids, &cands, cells).map_err(|e| e.to_string())?;
    let ps: Vec<Vec<Configuration>> = [5, 10, 15, 20]
        .iter()
        .map(|&p| portfolio_from_matrix(&matrix, p).map(|pf| pf.configs))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let nested = ps.windows(2).all(|w| w[0][..] == w[1][..w[0].len()]);
    check(
        nested && ps[3].len() == 20.min(n),
        "100 random 6x8 matrices match the oracle; trace non-increasing; sizes 5/10/15/20 prefix-nested".into(),
        "portfolios across sizes are not prefix-nested".into(),
    )
}

// Criterion 4 -------------------------------------------------------------

fn bowl(c: &Configuration, _seed: u64) -> ModelScore {
    let v = |n: &str| c.get(n).and_then(Value::as_f64).unwrap();
    ModelScore::from_rmse((v("a") - 0.3).powi(2) + (v("b") - 0.7).powi(2) + (v("c") - 0.55).powi(2))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    (v[(n - 1) / 2] + v[n / 2]) / 2.0
}

fn bo_sanity() -> Outcome {
    // Standard normal table values at 0.5 and 0.
    let (cdf, pdf, pdf0) = (0.6914624612740131, 0.3520653267642995, 0.3989422804014327);
    let spots = [
        (0.0, 1.0, 0.5, 0.5 * cdf + pdf),
        (1.0, 2.0, 0.0, -(1.0 - cdf) + 2.0 * pdf),
        (0.2, 0.5, 0.2, 0.5 * pdf0),
    ];
    let ei_err = spots
        .iter()
        .map(|(m, s, b, want)| (expected_improvement(*m, *s, *b) - want).abs())
        .fold(0.0, f64::max);
    let space = ConfigurationSpace::new(
        "cube",
        ["a", "b", "c"]
            .iter()
            .map(|n| HyperparameterSpec::continuous(n, 0.0, 1.0, false, 0.5))
            .collect(),
    )
    .map_err(|e| e.to_string())?;
    let mut bo = Vec::new();
    let mut rs = Vec::new();
    for seed in 0..20 {
        bo.push(tuner::tune(&space, bowl, 50, &[], seed).map_err(|e| e.to_string())?.incumbent_score.rmse.unwrap());
        rs.push(tuner::random_search(&space, bowl, 50, seed).map_err(|e| e.to_string())?.incumbent_score.rmse.unwrap());
    }
    let (mb, mr) = (median(bo), median(rs));
    check(
        mb < mr && ei_err <= 1e-6,
        format!("median best-at-50 BO {mb:.3e} < random {mr:.3e}; EI error {ei_err:.1e}"),
        format!("median BO {mb:.3e} vs random {mr:.3e}; EI error {ei_err:.3e}"),
    )
}

// Criteria 5 and 6 --------------------------------------------------------

fn warmstart_config(out: PathBuf) -> ExperimentConfig {
    let (n, l) = (30, 60);
    ExperimentConfig {
        meta: vec![
            DatasetSpec::new("pendulum-g0.5", "pendulum", (0.5, 1.0, 1.0), n, l, 11),
            DatasetSpec::new("pendulum-g1.5", "pendulum", (1.5, 1.0, 1.0), n, l, 12),
            DatasetSpec::new("pendulum-big", "pendulum", (1.0, 1.5, 1.25), n, l, 13),
            DatasetSpec::new("pendulum-small", "pendulum", (1.0, 0.75, 0.75), n, l, 14),
        ],
        test: vec![
            DatasetSpec::new("pendulum-g0.75", "pendulum", (0.75, 1.0, 1.0), n, l, 21),
            DatasetSpec::new("pendulum-long", "pendulum", (1.0, 1.0, 1.5), n, l, 22),
        ],
        seeds: (0..10).collect(),
        ..ExperimentConfig::desk_pendulum(out)
    }
}

fn warmstart_effect(r: &WarmstartReport) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for d in &r.datasets {
        let wins = d.warm_not_worse_at_p();
        let n = d.seeds.len();
        let pure = d.pure_summary().map_err(|e| e.to_string())?.mean;
        let warm = d.portfolio_summary().map_err(|e| e.to_string())?.mean;
        ok &= wins * 10 >= 6 * n && warm <= pure;
        lines.push(format!(
            "{}: |P|={} not worse at |P| on {wins}/{n}, mean final {warm:.4e} vs {pure:.4e}",
            d.dataset_id, d.portfolio_len
        ));
    }
    check(ok, lines.join("; "), lines.join("; "))
}

fn stability(r: &WarmstartReport) -> Outcome {
    let identical = r.datasets.iter().all(|d| d.prefixes_identical());
    let lower = r
        .datasets
        .iter()
        .filter(|d| d.in_distribution)
        .filter(|d| {
            let (pure, warm) = d.std_at_p();
            warm <= pure
        })
        .count();
    let total = r.datasets.iter().filter(|d| d.in_distribution).count();
    check(
        identical && 2 * lower >= total,
        format!("first |P| configs identical across seeds; std at |P| lower on {lower}/{total}"),
        format!("identical prefixes {identical}; std at |P| lower on {lower}/{total}"),
    )
}

// Criterion 7 -------------------------------------------------------------

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()))
        .collect()
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn run_pipeline(root: &Path) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_mpc-portfolio");
    let s = |p: PathBuf| p.display().to_string();
    let run = |args: Vec<String>| -> Result<(), String> {
        let out = Command::new(bin)
            .arg("--canonical")
            .arg("--out-root")
            .arg(root)
            .args(&args)
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
        }
    };
    let args = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    for (i, g) in ["0.7", "1.3"].iter().enumerate() {
        let data = s(root.join(format!("meta/m{i}.dataset")));
        run(args(&["gen-data", "--system", "cartpole", "--gravity-scale", g, "--n-traj", "10", "--length", "30", "--seed", &i.to_string(), "--out", &data]))?;
        run(args(&["tune", "--data", &data, "--budget", "4", "--k-folds", "2", "--out", &s(root.join(format!("cands/m{i}")))]))?;
    }
    let test = s(root.join("test.dataset"));
    run(args(&["gen-data", "--system", "cartpole", "--n-traj", "10", "--length", "30", "--seed", "9", "--out", &test]))?;
    run(args(&[
        "portfolio", "--candidates-dir", &s(root.join("cands")), "--meta-dir", &s(root.join("meta")),
        "--size", "1,2", "--k-folds", "2", "--out", &s(root.join("pf")),
    ]))?;
    let init = format!("portfolio:{}", s(root.join("pf/portfolio-p2.json")));
    for (method, init) in [("bo", "random".to_string()), ("pf", init)] {
        for seed in ["0", "1"] {
            run(args(&[
                "tune", "--data", &test, "--init", &init, "--budget", "4", "--k-folds", "2", "--seed", seed,
                "--out", &s(root.join(format!("runs/{method}/{seed}"))),
            ]))?;
        }
    }
    for seed in ["0", "1"] {
        run(args(&[
            "control-eval", "--model", &s(root.join(format!("runs/pf/{seed}/model.json"))), "--task",
            "cartpole-balance", "--horizon", "5", "--samples", "20", "--seed", seed,
            "--out", &s(root.join("runs/control.jsonl")),
        ]))?;
    }
    run(args(&["report", "--dir", &s(root.join("runs")), "--plot"]))?;
    run(args(&["report", "--dir", &s(root.join("runs")), "--format", "csv"]))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("p");
    run_pipeline(&root)?;
    let first = snapshot(&root);
    fs::remove_dir_all(&root).map_err(|e| e.to_string())?;
    run_pipeline(&root)?;
    let second = snapshot(&root);
    let differing: Vec<_> = first
        .iter()
        .filter(|(k, v)| second.get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    check(
        differing.is_empty() && first.len() == second.len(),
        format!("{} output files byte-identical across reruns", first.len()),
        format!("differing files: {differing:?}"),
    )
}

// Criterion 8 -------------------------------------------------------------

fn control_direction(global: &Global, out: PathBuf) -> Outcome {
    let mut cfg = ExperimentConfig::desk_cartpole(out);
    for d in cfg.meta.iter_mut().chain(cfg.test.iter_mut()) {
        d.n_traj = 30;
        d.length = 60;
    }
    cfg.control.sizes = vec![0, 10];
    cfg.seeds = (0..5).collect();
    let r = experiments::run_control_study(&cfg, global).map_err(|e| e.to_string())?;
    let (pure, warm) = (&r.rows[0], &r.rows[1]);
    check(
        warm.mean <= pure.mean && warm.mean < 10.0 && pure.mean < 10.0,
        format!("size=10 mean {:.4} <= size=0 mean {:.4}, both below 10", warm.mean, pure.mean),
        format!("size=10 mean {:.4}, size=0 mean {:.4} (need <= and both < 10)", warm.mean, pure.mean),
    )
}

// Criterion 9 -------------------------------------------------------------

fn statistics() -> Outcome {
    // scipy.stats.ttest_ind(a, b, equal_var=False)
    let a = [1.0288568739519013, 1.6419200406711503, 1.1467195295966137, -0.9731795154745656, -1.3928000963768683];
    let b = [0.5671963550710972, 1.3613509179404262, 1.009186798845688, 2.3102855742952833, 1.2508434731539184];
    let r = welch_t_test(&a, &b, ALPHA).map_err(|e| e.to_string())?;
    let same = welch_t_test(&a, &a, ALPHA).map_err(|e| e.to_string())?;
    let err = (r.p - 0.18968883898420988).abs().max((r.t - -1.4897230360827578).abs());
    check(
        err <= 1e-6 && same.p == 1.0,
        format!("p {:.6} matches reference within {err:.1e}; identical samples give p = 1", r.p),
        format!("reference error {err:.3e}; identical-sample p {}", same.p),
    )
}

fn report(n: usize, name: &str, started: Instant, outcome: &Outcome) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(msg) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {msg}"),
        Err(msg) => println!("criterion {n} ({name}): FAIL [{secs:.1}s] {msg}"),
    }
    outcome.is_ok()
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let global = Global {
        canonical: true,
        out_root: dir.path().to_path_buf(),
    };
    let mut all = true;
    let t = Instant::now();
    all &= report(1, "table gain arithmetic", t, &table_gains());
    let t = Instant::now();
    all &= report(2, "model-score oracle", t, &model_score_oracle());
    let t = Instant::now();
    all &= report(3, "greedy portfolio", t, &greedy_correctness());
    let t = Instant::now();
    all &= report(4, "BO sanity", t, &bo_sanity());
    let t = Instant::now();
    let study = experiments::run_warmstart_study(&warmstart_config(dir.path().join("warmstart")), &global)
        .map_err(|e| e.to_string());
    match &study {
        Ok(r) => {
            all &= report(5, "warmstart effect", t, &warmstart_effect(r));
            all &= report(6, "stability", t, &stability(r));
        }
        Err(e) => {
            all &= report(5, "warmstart effect", t, &Err(e.clone()));
            all &= report(6, "stability", t, &Err(e.clone()));
        }
    }
    let t = Instant::now();
    all &= report(7, "determinism", t, &determinism());
    let t = Instant::now();
    all &= report(8, "control direction", t, &control_direction(&global, dir.path().join("control")));
    let t = Instant::now();
    all &= report(9, "statistics", t, &statistics());
    if !all {
        std::process::exit(1);
    }
}

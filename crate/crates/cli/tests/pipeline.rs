use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mpc_portfolio::portfolio::{PerformanceMatrix, Portfolio};
use mpc_portfolio::sysid::model_config_space;
use mpc_portfolio::tuner::trace::read_trace;

fn bin(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpc-portfolio"))
        .arg("--canonical")
        .arg("--out-root")
        .arg(root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> Output {
    let out = bin(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn gen(root: &Path, system: &str, g: f64, seed: u64, out: &Path) {
    ok(
        root,
        &[
            "gen-data",
            "--system",
            system,
            "--gravity-scale",
            &g.to_string(),
            "--n-traj",
            "12",
            "--length",
            "30",
            "--seed",
            &seed.to_string(),
            "--out",
            out.to_str().unwrap(),
        ],
    );
}

fn tune(root: &Path, data: &Path, init: &str, budget: usize, seed: u64, out: &Path) -> Output {
    ok(
        root,
        &[
            "tune",
            "--data",
            data.to_str().unwrap(),
            "--init",
            init,
            "--budget",
            &budget.to_string(),
            "--k-folds",
            "2",
            "--seed",
            &seed.to_string(),
            "--out",
            out.to_str().unwrap(),
        ],
    )
}

/// Three meta datasets with harvested incumbents, one held-out dataset.
fn pipeline(root: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let meta = root.join("meta");
    let cands = root.join("cands");
    for (i, g) in [0.6, 1.0, 1.4].iter().enumerate() {
        let path = meta.join(format!("m{i}.dataset"));
        gen(root, "pendulum", *g, 10 + i as u64, &path);
        tune(root, &path, "random", 6, 0, &cands.join(format!("m{i}")));
    }
    let test = root.join("test.dataset");
    gen(root, "pendulum", 0.8, 99, &test);
    (meta, cands, test)
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.dataset");
    let b = dir.path().join("b.dataset");
    gen(dir.path(), "cartpole", 1.2, 5, &a);
    gen(dir.path(), "cartpole", 1.2, 5, &b);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ds = mpc_portfolio::dynamics::read_dataset(&a).unwrap();
    assert_eq!(ds.trajectories.len(), 12);
    assert!(ds.trajectories.iter().all(|t| t.controls.len() == 30 && t.states.len() == 31));
    let c = dir.path().join("c.dataset");
    gen(dir.path(), "cartpole", 1.2, 6, &c);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn tune_portfolio_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (meta, cands, test) = pipeline(root);
    let space = model_config_space();

    let trace = read_trace(&cands.join("m0").join("trace.jsonl"), &space).unwrap();
    assert_eq!(trace.entries.len(), 6);
    assert!(cands.join("m0").join("model.json").exists());

    let pdir = root.join("pf");
    ok(
        root,
        &[
            "portfolio",
            "--candidates-dir",
            cands.to_str().unwrap(),
            "--meta-dir",
            meta.to_str().unwrap(),
            "--size",
            "1,2,5",
            "--k-folds",
            "2",
            "--out",
            pdir.to_str().unwrap(),
        ],
    );
    let matrix = PerformanceMatrix::read(&pdir.join("matrix.json")).unwrap();
    assert_eq!(matrix.n_datasets(), 3);
    let n_cands = matrix.n_configs();
    assert!((1..=3).contains(&n_cands));
    let ps: Vec<Portfolio> = [1, 2, 5]
        .iter()
        .map(|p| Portfolio::read(&pdir.join(format!("portfolio-p{p}.json"))).unwrap())
        .collect();
    for (p, pf) in [1, 2, 5].iter().zip(&ps) {
        assert_eq!(pf.len(), (*p).min(n_cands));
        assert_eq!(pf.matrix_hash, matrix.hash());
    }
    for w in ps.windows(2) {
        assert_eq!(w[0].configs[..], w[1].configs[..w[0].len()]);
    }

    // Warmstarted runs evaluate the portfolio first, in order.
    let p2 = pdir.join("portfolio-p2.json");
    let init = format!("portfolio:{}", p2.display());
    for seed in [1, 2] {
        let out = root.join(format!("runs/pf/seed-{seed}"));
        tune(root, &test, &init, 5, seed, &out);
        let t = read_trace(&out.join("trace.jsonl"), &space).unwrap();
        assert_eq!(t.entries.len(), 5);
        for (e, c) in t.entries.iter().zip(&ps[1].configs) {
            assert_eq!(&e.config, c);
        }
        tune(root, &test, "random", 5, seed, &root.join(format!("runs/bo/seed-{seed}")));
    }

    // Canonical reruns are byte-identical.
    let again = root.join("again");
    tune(root, &test, &init, 5, 1, &again);
    for f in ["trace.jsonl", "incumbent.json", "model.json"] {
        assert_eq!(
            fs::read(again.join(f)).unwrap(),
            fs::read(root.join("runs/pf/seed-1").join(f)).unwrap(),
            "{f}"
        );
    }

    let out = ok(root, &["report", "--dir", root.join("runs").to_str().unwrap(), "--format", "csv"]);
    assert!(out.status.success());
    let csv = fs::read_to_string(root.join("runs/report/comparisons.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "{csv}");
    assert!(lines[1].contains(",pure_bo,portfolio("));
    ok(root, &["report", "--dir", root.join("runs").to_str().unwrap(), "--plot"]);
    let summary = fs::read_to_string(root.join("runs/report/summary.txt")).unwrap();
    assert!(summary.contains("gain_pct"));
    assert!(fs::read_dir(root.join("runs/report"))
        .unwrap()
        .any(|e| e.unwrap().path().extension().map_or(false, |x| x == "svg")));
}

#[test]
fn control_eval_scores() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("cp.dataset");
    gen(root, "cartpole", 1.0, 3, &data);
    tune(root, &data, "random", 2, 0, &root.join("run"));
    let model = root.join("run/model.json");
    let eval = |m: &str, out: &str| {
        ok(
            root,
            &[
                "control-eval",
                "--model",
                m,
                "--task",
                "cartpole-balance",
                "--horizon",
                "5",
                "--samples",
                "20",
                "--out",
                root.join(out).to_str().unwrap(),
            ],
        );
        let text = fs::read_to_string(root.join(out)).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        v
    };
    let a = eval(model.to_str().unwrap(), "a.jsonl");
    let b = eval(model.to_str().unwrap(), "b.jsonl");
    assert_eq!(a, b);
    let s = a["score"].as_f64().unwrap();
    assert!((0.0..=10.0).contains(&s));
    let z = eval("zero", "z.jsonl");
    assert_eq!(z["score"].as_f64().unwrap(), 10.0);
    // Appends rather than overwrites.
    eval("zero", "z.jsonl");
    assert_eq!(fs::read_to_string(root.join("z.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("d.dataset");
    gen(root, "pendulum", 1.0, 1, &data);
    let code = |args: &[&str]| bin(root, args).status.code().unwrap();

    assert_eq!(code(&["tune", "--data", root.join("nope.dataset").to_str().unwrap()]), 3);
    assert_eq!(code(&["tune", "--data", data.to_str().unwrap(), "--budget", "0"]), 2);
    assert_eq!(code(&["tune", "--data", data.to_str().unwrap(), "--k-folds", "1"]), 2);
    assert_eq!(code(&["tune", "--data", data.to_str().unwrap(), "--init", "grid"]), 2);
    assert_eq!(code(&["gen-data", "--system", "acrobot"]), 2);
    assert_eq!(code(&["control-eval", "--model", "zero", "--task", "nope"]), 2);
    assert_eq!(
        code(&[
            "tune",
            "--data",
            data.to_str().unwrap(),
            "--budget",
            "2",
            "--k-folds",
            "2",
            "--timeout-s",
            "1e-9",
            "--out",
            root.join("failed").to_str().unwrap(),
        ]),
        4
    );
    let inc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("failed/incumbent.json")).unwrap()).unwrap();
    assert!(inc["config"].is_null());
    assert_eq!(code(&["report", "--dir", root.join("missing").to_str().unwrap()]), 3);
}

#[test]
fn tune_control_feeds_control_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = root.join("ctl");
    ok(
        root,
        &["tune-control", "--model", "true", "--task", "cartpole-balance", "--budget", "2", "--out", out.to_str().unwrap()],
    );
    let trace = read_trace(&out.join("trace.jsonl"), &mpc_portfolio::control::mpc_config_space()).unwrap();
    assert_eq!(trace.entries.len(), 2);
    let results = root.join("c.jsonl");
    ok(
        root,
        &[
            "control-eval",
            "--model",
            "true",
            "--task",
            "cartpole-balance",
            "--mpc",
            out.join("mpc.json").to_str().unwrap(),
            "--out",
            results.to_str().unwrap(),
        ],
    );
    let rec: serde_json::Value = serde_json::from_str(fs::read_to_string(&results).unwrap().trim()).unwrap();
    let tuned: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("mpc.json")).unwrap()).unwrap();
    assert_eq!(rec["mpc"], tuned);
    assert_eq!(bin(root, &["tune-control", "--model", "zero", "--budget", "1"]).status.code(), Some(2));
}

#[test]
fn size_sweep_study() {
    use mpc_portfolio_cli::experiments::{DatasetSpec, ExperimentConfig};
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut cfg = ExperimentConfig::desk_pendulum(root.join("sweep"));
    cfg.meta = vec![
        DatasetSpec::new("m1", "pendulum", (0.6, 1.0, 1.0), 9, 20, 1),
        DatasetSpec::new("m2", "pendulum", (1.4, 1.0, 1.0), 9, 20, 2),
        DatasetSpec::new("m3", "pendulum", (1.0, 0.75, 0.75), 9, 20, 3),
    ];
    cfg.test = vec![DatasetSpec::new("t", "pendulum", (0.8, 1.0, 1.0), 9, 20, 4)];
    cfg.budget = 4;
    cfg.harvest_budget = 4;
    cfg.k_folds = 2;
    cfg.portfolio_size = 2;
    cfg.portfolio_sizes = vec![1, 2, 3];
    cfg.control.sizes = vec![0, 2];
    cfg.seeds = vec![0, 1];
    let path = root.join("sweep.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    ok(root, &["study", "--kind", "sizes", "--config", path.to_str().unwrap()]);
    let text = fs::read_to_string(root.join("sweep/report/size_sweep.txt")).unwrap();
    assert!(text.contains("Prefix-nested: true"), "{text}");
    assert!(text.lines().any(|l| l.starts_with('t')), "{text}");
    let pf: Vec<Portfolio> = [1, 2, 3]
        .iter()
        .map(|p| Portfolio::read(&root.join(format!("sweep/portfolio/portfolio-p{p}.json"))).unwrap())
        .collect();
    assert_eq!(pf[0].configs[..], pf[2].configs[..1]);
    // p=0 runs are plain BO runs.
    let t = read_trace(&root.join("sweep/runs/t/pure_bo/seed-1/trace.jsonl"), &model_config_space()).unwrap();
    assert_eq!(t.method, "pure_bo");

    cfg.budget = 1;
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    assert_eq!(bin(root, &["study", "--kind", "sizes", "--config", path.to_str().unwrap()]).status.code(), Some(2));
}

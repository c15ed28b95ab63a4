use std::time::Duration;

use mpc_portfolio::configspace::ConfigurationSpace;
use mpc_portfolio::dynamics::{generate_dataset, Split, SystemSpec};
use mpc_portfolio::portfolio::{
    build_matrix, build_matrix_with, coverage, greedy_columns, greedy_select, normalize_rows,
    CandidateSet, EvalSettings, PerformanceMatrix,
};
use mpc_portfolio::rng;
use mpc_portfolio::sysid::{self, ModelScore};
use rand::Rng;

/// Straightforward greedy: recompute the objective from scratch for every
/// trial set.
fn oracle(m: &[Vec<f64>], p: usize) -> Vec<usize> {
    let cols = m[0].len();
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..p.min(cols) {
        let mut best_j = usize::MAX;
        let mut best_v = f64::INFINITY;
        for j in 0..cols {
            if chosen.contains(&j) {
                continue;
            }
            let mut total = 0.0;
            for row in m {
                let mut lo = row[j];
                for &h in &chosen {
                    if row[h] < lo {
                        lo = row[h];
                    }
                }
                total += lo;
            }
            let v = total / m.len() as f64;
            if v < best_v {
                best_v = v;
                best_j = j;
            }
        }
        chosen.push(best_j);
    }
    chosen
}

fn random_matrix(seed: u64, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let mut r = rng::rng(seed);
    (0..rows)
        .map(|_| (0..cols).map(|_| r.gen::<f64>()).collect())
        .collect()
}

fn candidates(n: usize) -> CandidateSet {
    let space = sysid::model_config_space();
    let mut seed = 0;
    let mut configs = Vec::new();
    while configs.len() < n {
        let c = space.sample(seed);
        seed += 1;
        if !configs.contains(&c) {
            configs.push(c);
        }
    }
    CandidateSet::from_incumbents(
        configs
            .into_iter()
            .enumerate()
            .map(|(i, c)| (format!("d{i}"), Some(c))),
    )
    .unwrap()
}

fn as_matrix(scores: Vec<Vec<f64>>) -> PerformanceMatrix {
    let ids = (0..scores.len()).map(|i| format!("d{i}")).collect();
    let set = candidates(scores[0].len());
    PerformanceMatrix::from_cells(
        ids,
        &set,
        scores
            .into_iter()
            .map(|r| r.into_iter().map(Some).collect())
            .collect(),
    )
    .unwrap()
}

#[test]
fn greedy_matches_oracle_on_small_matrix() {
    let m = vec![
        vec![0.9, 0.1, 0.5, 0.4],
        vec![0.2, 0.8, 0.5, 0.4],
        vec![0.6, 0.7, 0.0, 0.3],
    ];
    let (cols, trace) = greedy_columns(&m, 2).unwrap();
    assert_eq!(cols, oracle(&m, 2));
    assert_eq!(cols, vec![2, 1]);
    assert!((trace[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((trace[1] - 0.6 / 3.0).abs() < 1e-15);
}

#[test]
fn greedy_matches_oracle_on_random_matrices() {
    for seed in 0..100 {
        let m = random_matrix(seed, 6, 8);
        for p in [1, 2, 5, 8] {
            let (cols, trace) = greedy_columns(&m, p).unwrap();
            assert_eq!(cols, oracle(&m, p), "seed {seed} p {p}");
            assert!(trace.windows(2).all(|w| w[1] <= w[0]));
            for (k, v) in trace.iter().enumerate() {
                assert!((coverage(&m, &cols[..=k]) - v).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn greedy_against_exhaustive_pairs() {
    let mut optimal = 0;
    for seed in 0..100 {
        let m = random_matrix(1000 + seed, 6, 8);
        let (cols, _) = greedy_columns(&m, 2).unwrap();
        let phi = coverage(&m, &cols);
        let mut best = f64::INFINITY;
        for a in 0..8 {
            for b in a + 1..8 {
                best = best.min(coverage(&m, &[a, b]));
            }
        }
        assert!(phi >= best - 1e-15);
        assert!(phi <= best + 1.0);
        if phi <= best + 1e-15 {
            optimal += 1;
        }
    }
    assert!(optimal > 50, "greedy optimal on {optimal}/100");
}

#[test]
fn portfolios_are_prefix_nested() {
    let m = normalize_rows(&as_matrix(random_matrix(7, 5, 24)));
    let sizes = [5, 10, 15, 20];
    let ports: Vec<_> = sizes
        .iter()
        .map(|&p| greedy_select(&m, p).unwrap())
        .collect();
    for (p, port) in sizes.iter().zip(&ports) {
        assert_eq!(port.len(), *p);
        assert_eq!(port.matrix_hash, m.hash());
    }
    for w in ports.windows(2) {
        assert_eq!(w[0].configs[..], w[1].configs[..w[0].len()]);
        assert_eq!(w[0].selection_trace[..], w[1].selection_trace[..w[0].len()]);
    }
}

#[test]
fn matrix_cells_match_independent_cv_scores() {
    let meta: Vec<_> = [1.0, 1.5]
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let sys = SystemSpec::pendulum().make_variant(*g, 1.0, 1.0).unwrap();
            generate_dataset(
                &format!("pendulum-g{g}"),
                &sys,
                12,
                20,
                i as u64,
                Split::default(),
            )
            .unwrap()
        })
        .collect();
    let set = candidates(4);
    let settings = EvalSettings {
        folds: 3,
        seed: 5,
        timeout: Duration::from_secs(60),
    };
    let m = build_matrix(&set, &meta, &settings).unwrap();
    assert_eq!(m.n_datasets(), 2);
    assert_eq!(m.n_configs(), 4);
    let mut r = rng::rng(3);
    for _ in 0..3 {
        let (i, j) = (r.gen_range(0..2), r.gen_range(0..4));
        let direct = sysid::cv_score(&set.candidates[j].config, meta[i].train(), 3, 5).unwrap();
        assert_eq!(Some(m.scores[i][j]), direct.rmse);
    }
    // Serial evaluation assembles the same matrix.
    let ids: Vec<String> = meta.iter().map(|d| d.id.clone()).collect();
    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| {
            build_matrix_with(&set, &ids, |c, i| {
                sysid::evaluate_with_timeout(c, meta[i].train(), 3, 5, Duration::from_secs(60))
            })
            .unwrap()
        });
    assert_eq!(serial, m);
}

#[test]
fn timed_out_cell_is_imputed() {
    let set = candidates(3);
    let ids = vec!["a".to_string(), "b".to_string()];
    let m = build_matrix_with(&set, &ids, |c, i| {
        if i == 1 && *c == set.candidates[2].config {
            ModelScore::failed()
        } else {
            ModelScore::from_rmse(
                1.0 + i as f64 + set.candidates.iter().position(|k| k.config == *c).unwrap() as f64,
            )
        }
    })
    .unwrap();
    assert_eq!(m.scores[1], vec![2.0, 3.0, 6.0]);
    assert_eq!(m.imputed[1], vec![false, false, true]);
    assert!(m.imputed[0].iter().all(|b| !b));
}

#[test]
fn matrix_and_portfolio_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = as_matrix(random_matrix(2, 3, 5));
    let path = dir.path().join("matrix.json");
    m.write(&path).unwrap();
    let back = PerformanceMatrix::read(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.hash(), m.hash());
    let port = mpc_portfolio::portfolio::portfolio_from_matrix(&m, 3).unwrap();
    assert_eq!(port.matrix_hash, m.hash());
    let ppath = dir.path().join("portfolio.json");
    port.write(&ppath).unwrap();
    assert_eq!(
        mpc_portfolio::portfolio::Portfolio::read(&ppath).unwrap(),
        port
    );
    let space: ConfigurationSpace = sysid::model_config_space();
    for c in &port.configs {
        assert!(space.validate(c).is_empty());
    }
}

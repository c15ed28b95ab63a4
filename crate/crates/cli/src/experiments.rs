//! Scripted studies built from the pipeline commands: warmstart effect,
//! portfolio-size sweep and model-to-controller transfer.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mpc_portfolio::dynamics::Family;
use mpc_portfolio::portfolio::{Portfolio, PORTFOLIO_SIZES};
use mpc_portfolio::report::{self, Comparison, ControlRow, RunSummary};
use mpc_portfolio::tuner::TuningTrace;

use crate::commands::{
    self, ControlEvalArgs, ControlRecord, GenDataArgs, PortfolioArgs, TuneArgs, TuneOutcome, DATASET_EXT, MODEL_FILE,
    PURE_BO,
};
use crate::{CliError, CliResult, ExitKind, Global};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub id: String,
    pub system: String,
    #[serde(default = "one")]
    pub gravity_scale: f64,
    #[serde(default = "one")]
    pub mass_scale: f64,
    #[serde(default = "one")]
    pub length_scale: f64,
    pub n_traj: usize,
    pub length: usize,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl DatasetSpec {
    pub fn new(id: &str, system: &str, scales: (f64, f64, f64), n_traj: usize, length: usize, seed: u64) -> Self {
        Self {
            id: id.into(),
            system: system.into(),
            gravity_scale: scales.0,
            mass_scale: scales.1,
            length_scale: scales.2,
            n_traj,
            length,
            seed,
        }
    }

    fn same_source(&self, other: &Self) -> bool {
        self.system == other.system
            && self.gravity_scale == other.gravity_scale
            && self.mass_scale == other.mass_scale
            && self.length_scale == other.length_scale
            && self.seed == other.seed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSettings {
    pub task: String,
    pub episodes: usize,
    pub sizes: Vec<usize>,
}

impl Default for ControlSettings {
    fn default() -> Self {
        Self {
            task: "cartpole-swingup".into(),
            episodes: 1,
            sizes: vec![0, 5, 10],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub meta: Vec<DatasetSpec>,
    pub test: Vec<DatasetSpec>,
    pub k_folds: usize,
    /// Tuning budget of every compared run.
    pub budget: usize,
    /// Budget of the per-meta-dataset tuning that harvests candidates.
    pub harvest_budget: usize,
    #[serde(default)]
    pub harvest_seed: u64,
    pub portfolio_size: usize,
    pub portfolio_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub timeout_s: f64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub control: ControlSettings,
}

impl ExperimentConfig {
    /// Desk-scale pendulum study: four gravity/morphology variants for the
    /// portfolio, two held-out pendulum variants and one cartpole test set.
    pub fn desk_pendulum(out_dir: PathBuf) -> Self {
        let (n, l) = (100, 200);
        Self {
            meta: vec![
                DatasetSpec::new("pendulum-g0.5", "pendulum", (0.5, 1.0, 1.0), n, l, 11),
                DatasetSpec::new("pendulum-g1.5", "pendulum", (1.5, 1.0, 1.0), n, l, 12),
                DatasetSpec::new("pendulum-big", "pendulum", (1.0, 1.5, 1.25), n, l, 13),
                DatasetSpec::new("pendulum-small", "pendulum", (1.0, 0.75, 0.75), n, l, 14),
            ],
            test: vec![
                DatasetSpec::new("pendulum-g0.75", "pendulum", (0.75, 1.0, 1.0), n, l, 21),
                DatasetSpec::new("pendulum-long", "pendulum", (1.0, 1.0, 1.5), n, l, 22),
                DatasetSpec::new("cartpole", "cartpole", (1.0, 1.0, 1.0), n, l, 23),
            ],
            k_folds: 3,
            budget: 40,
            harvest_budget: 40,
            harvest_seed: 0,
            portfolio_size: 10,
            portfolio_sizes: PORTFOLIO_SIZES.to_vec(),
            seeds: (0..5).collect(),
            timeout_s: 60.0,
            out_dir,
            control: ControlSettings::default(),
        }
    }

    /// Cartpole variants for the portfolio; the nominal cartpole is both the
    /// tuning target and the control plant.
    pub fn desk_cartpole(out_dir: PathBuf) -> Self {
        let (n, l) = (100, 200);
        Self {
            meta: vec![
                DatasetSpec::new("cartpole-g0.5", "cartpole", (0.5, 1.0, 1.0), n, l, 31),
                DatasetSpec::new("cartpole-g1.5", "cartpole", (1.5, 1.0, 1.0), n, l, 32),
                DatasetSpec::new("cartpole-big", "cartpole", (1.0, 1.5, 1.25), n, l, 33),
                DatasetSpec::new("cartpole-small", "cartpole", (1.0, 0.75, 0.75), n, l, 34),
            ],
            test: vec![DatasetSpec::new("cartpole", "cartpole", (1.0, 1.0, 1.0), n, l, 41)],
            ..Self::desk_pendulum(out_dir)
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::invalid("experiment needs at least one seed"));
        }
        if self.meta.is_empty() || self.test.is_empty() {
            return Err(CliError::invalid("experiment needs meta and test datasets"));
        }
        let largest = self
            .portfolio_sizes
            .iter()
            .chain(&self.control.sizes)
            .chain([&self.portfolio_size])
            .max()
            .copied()
            .unwrap_or(0);
        if self.budget < largest {
            return Err(CliError::invalid(format!(
                "budget {} is smaller than the largest portfolio size {largest}",
                self.budget
            )));
        }
        assert_disjoint(&self.meta, &self.test)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.exists() {
            return Err(CliError::missing(format!("experiment config {} does not exist", path.display())));
        }
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
    }

    fn meta_dir(&self) -> PathBuf {
        self.out_dir.join("data").join("meta")
    }

    fn test_path(&self, spec: &DatasetSpec) -> PathBuf {
        self.out_dir.join("data").join("test").join(format!("{}.{DATASET_EXT}", spec.id))
    }

    fn portfolio_dir(&self) -> PathBuf {
        self.out_dir.join("portfolio")
    }

    fn report_dir(&self) -> PathBuf {
        self.out_dir.join("report")
    }

    fn meta_families(&self) -> BTreeSet<String> {
        self.meta.iter().map(|m| m.system.clone()).collect()
    }
}

/// Meta and test datasets must not share ids or generating sources.
pub fn assert_disjoint(meta: &[DatasetSpec], test: &[DatasetSpec]) -> CliResult<()> {
    let mut ids = BTreeSet::new();
    for s in meta.iter().chain(test) {
        if !ids.insert(s.id.as_str()) {
            return Err(CliError::invalid(format!("dataset id {} is used twice", s.id)));
        }
    }
    for t in test {
        if let Some(m) = meta.iter().find(|m| m.same_source(t)) {
            return Err(CliError::invalid(format!(
                "test dataset {} duplicates meta dataset {}",
                t.id, m.id
            )));
        }
    }
    Ok(())
}

fn gen_args(spec: &DatasetSpec, out: PathBuf) -> GenDataArgs {
    GenDataArgs {
        system: spec.system.clone(),
        gravity_scale: spec.gravity_scale,
        mass_scale: spec.mass_scale,
        length_scale: spec.length_scale,
        n_traj: spec.n_traj,
        length: spec.length,
        dt: None,
        seed: spec.seed,
        id: Some(spec.id.clone()),
        out: Some(out),
    }
}

/// Writes every meta and test dataset file.
pub fn generate_data(cfg: &ExperimentConfig, global: &Global) -> CliResult<()> {
    let meta_dir = cfg.meta_dir();
    if meta_dir.exists() {
        fs::remove_dir_all(&meta_dir)?;
    }
    let jobs: Vec<(DatasetSpec, PathBuf)> = cfg
        .meta
        .iter()
        .map(|m| (m.clone(), meta_dir.join(format!("{}.{DATASET_EXT}", m.id))))
        .chain(cfg.test.iter().map(|t| (t.clone(), cfg.test_path(t))))
        .collect();
    jobs.par_iter()
        .map(|(spec, path)| commands::gen_data(&gen_args(spec, path.clone()), global).map(|_| ()))
        .collect()
}

fn tune_args(cfg: &ExperimentConfig, data: PathBuf, init: String, budget: usize, seed: u64, out: PathBuf) -> TuneArgs {
    TuneArgs {
        data,
        init,
        budget,
        k_folds: cfg.k_folds,
        seed,
        timeout_s: cfg.timeout_s,
        out: Some(out),
    }
}

/// Tunes every meta dataset with the random initial design. Runs whose
/// evaluations all fail still leave an incumbent file without a config.
pub fn harvest(cfg: &ExperimentConfig, global: &Global) -> CliResult<PathBuf> {
    let dir = cfg.out_dir.join("candidates");
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    cfg.meta
        .par_iter()
        .map(|m| {
            let args = tune_args(
                cfg,
                cfg.meta_dir().join(format!("{}.{DATASET_EXT}", m.id)),
                "random".into(),
                cfg.harvest_budget,
                cfg.harvest_seed,
                dir.join(&m.id),
            );
            match commands::tune(&args, global) {
                Err(e) if e.kind == ExitKind::AllFailed => {
                    log::warn!("{e}");
                    Ok(())
                }
                other => other.map(|_| ()),
            }
        })
        .collect::<CliResult<()>>()?;
    Ok(dir)
}

/// Portfolios of each requested size from one shared matrix.
pub fn build_portfolios(cfg: &ExperimentConfig, sizes: &[usize], global: &Global) -> CliResult<Vec<(usize, PathBuf, Portfolio)>> {
    let args = PortfolioArgs {
        candidates_dir: cfg.out_dir.join("candidates"),
        meta_dir: cfg.meta_dir(),
        size: sizes.to_vec(),
        k_folds: cfg.k_folds,
        seed: cfg.harvest_seed,
        timeout_s: cfg.timeout_s,
        out: Some(cfg.portfolio_dir()),
    };
    Ok(commands::portfolio(&args, global)?.portfolios)
}

fn method_dir(p: usize) -> String {
    if p == 0 {
        PURE_BO.into()
    } else {
        format!("portfolio-p{p}")
    }
}

/// One tuning run per (test dataset, portfolio size, seed); size 0 is pure BO.
fn run_grid(
    cfg: &ExperimentConfig,
    tests: &[DatasetSpec],
    portfolios: &[(usize, PathBuf)],
    global: &Global,
) -> CliResult<Vec<(String, usize, u64, TuneOutcome)>> {
    let mut jobs = Vec::new();
    for t in tests {
        for (p, path) in portfolios {
            for &seed in &cfg.seeds {
                jobs.push((t.clone(), *p, path.clone(), seed));
            }
        }
    }
    jobs.par_iter()
        .map(|(t, p, path, seed)| {
            let init = if *p == 0 {
                "random".to_string()
            } else {
                format!("portfolio:{}", path.display())
            };
            let out = cfg
                .out_dir
                .join("runs")
                .join(&t.id)
                .join(method_dir(*p))
                .join(format!("seed-{seed}"));
            let args = tune_args(cfg, cfg.test_path(t), init, cfg.budget, *seed, out);
            let outcome = match commands::tune(&args, global) {
                Err(e) if e.kind == ExitKind::AllFailed => {
                    log::warn!("{e}");
                    let trace = read_run_trace(args.out.as_ref().expect("explicit output"))?;
                    TuneOutcome {
                        dir: args.out.clone().expect("explicit output"),
                        incumbent: commands::IncumbentFile {
                            dataset_id: trace.dataset_id.clone(),
                            method: trace.method.clone(),
                            seed: *seed,
                            config: None,
                            score: None,
                            per_fold: Vec::new(),
                        },
                        trace,
                    }
                }
                other => other?,
            };
            Ok((t.id.clone(), *p, *seed, outcome))
        })
        .collect()
}

fn read_run_trace(dir: &Path) -> CliResult<TuningTrace> {
    let space = mpc_portfolio::sysid::model_config_space();
    Ok(mpc_portfolio::tuner::trace::read_trace(&dir.join(commands::TRACE_FILE), &space)?)
}

/// Paired pure-BO and warmstarted runs on one test dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedRunResult {
    pub dataset_id: String,
    pub in_distribution: bool,
    /// Number of portfolio configurations actually used.
    pub portfolio_len: usize,
    pub seeds: Vec<u64>,
    pub pure_final: Vec<Option<f64>>,
    pub portfolio_final: Vec<Option<f64>>,
    pub pure_at_p: Vec<Option<f64>>,
    pub portfolio_at_p: Vec<Option<f64>>,
    /// Median of the pure-BO final scores.
    pub threshold: Option<f64>,
    pub pure_iterations_to_threshold: Vec<Option<usize>>,
    pub portfolio_iterations_to_threshold: Vec<Option<usize>>,
    /// Configurations of the first `portfolio_len` evaluations of each
    /// warmstarted run, as flat strings.
    pub portfolio_prefixes: Vec<Vec<String>>,
}

fn finite(xs: &[Option<f64>]) -> Vec<f64> {
    xs.iter().flatten().copied().collect()
}

/// First iteration (1-based) whose incumbent reaches `threshold`.
pub fn iterations_to_threshold(trace: &TuningTrace, threshold: f64) -> Option<usize> {
    trace
        .entries
        .iter()
        .position(|e| e.incumbent.map_or(false, |s| s <= threshold))
        .map(|i| i + 1)
}

impl PairedRunResult {
    /// Seeds on which the warmstarted incumbent at iteration |P| is no worse
    /// than pure BO's at the same iteration.
    pub fn warm_not_worse_at_p(&self) -> usize {
        self.pure_at_p
            .iter()
            .zip(&self.portfolio_at_p)
            .filter(|(a, b)| match (a, b) {
                (_, None) => false,
                (None, Some(_)) => true,
                (Some(a), Some(b)) => b <= a,
            })
            .count()
    }

    pub fn pure_summary(&self) -> CliResult<RunSummary> {
        Ok(RunSummary::from_scores(&self.dataset_id, PURE_BO, finite(&self.pure_final))?)
    }

    pub fn portfolio_summary(&self) -> CliResult<RunSummary> {
        Ok(RunSummary::from_scores(
            &self.dataset_id,
            &commands::portfolio_method(self.portfolio_len),
            finite(&self.portfolio_final),
        )?)
    }

    pub fn std_at_p(&self) -> (f64, f64) {
        (
            report::sample_std(&finite(&self.pure_at_p)),
            report::sample_std(&finite(&self.portfolio_at_p)),
        )
    }

    /// Whether every warmstarted run started with the same configurations.
    pub fn prefixes_identical(&self) -> bool {
        self.portfolio_prefixes.windows(2).all(|w| w[0] == w[1])
    }
}

fn paired_result(
    dataset_id: &str,
    in_distribution: bool,
    portfolio_len: usize,
    seeds: &[u64],
    pure: &[&TuningTrace],
    warm: &[&TuningTrace],
) -> PairedRunResult {
    let at = |ts: &[&TuningTrace], n: usize| ts.iter().map(|t| t.incumbent_after(n)).collect::<Vec<_>>();
    let pure_final: Vec<Option<f64>> = pure.iter().map(|t| t.final_incumbent()).collect();
    let threshold = report::median(&finite(&pure_final));
    let itt = |ts: &[&TuningTrace]| {
        ts.iter()
            .map(|t| threshold.and_then(|th| iterations_to_threshold(t, th)))
            .collect::<Vec<_>>()
    };
    PairedRunResult {
        dataset_id: dataset_id.into(),
        in_distribution,
        portfolio_len,
        seeds: seeds.to_vec(),
        portfolio_final: warm.iter().map(|t| t.final_incumbent()).collect(),
        pure_at_p: at(pure, portfolio_len),
        portfolio_at_p: at(warm, portfolio_len),
        threshold,
        pure_iterations_to_threshold: itt(pure),
        portfolio_iterations_to_threshold: itt(warm),
        portfolio_prefixes: warm
            .iter()
            .map(|t| t.entries.iter().take(portfolio_len).map(|e| e.config.to_flat()).collect())
            .collect(),
        pure_final,
    }
}

#[derive(Clone, Debug)]
pub struct WarmstartReport {
    pub portfolio: Portfolio,
    pub datasets: Vec<PairedRunResult>,
    pub comparisons: Vec<Comparison>,
    pub text: String,
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("-".into(), |x| x.to_string())
}

fn warmstart_text(datasets: &[PairedRunResult], comparisons: &[Comparison]) -> String {
    let mut text = String::from(
        "Warmstart study: final incumbent RMSE (every objective call counts as one iteration; * marks p < 0.1)\n",
    );
    text += &report::format_comparison_table(comparisons);
    text += "\nIterations to reach the pure-BO median final score (per seed; - = never)\n";
    for d in datasets {
        let _ = writeln!(
            text,
            "{} [{}] threshold {}: pure_bo {:?} portfolio {:?}",
            d.dataset_id,
            if d.in_distribution { "in-distribution" } else { "out-of-distribution" },
            d.threshold.map_or("-".into(), |t| format!("{t:.6e}")),
            d.pure_iterations_to_threshold.iter().map(fmt_opt).collect::<Vec<_>>(),
            d.portfolio_iterations_to_threshold.iter().map(fmt_opt).collect::<Vec<_>>(),
        );
    }
    text += "\nIncumbent at iteration |P|\n";
    for d in datasets {
        let (sp, sw) = d.std_at_p();
        let _ = writeln!(
            text,
            "{}: |P|={} warmstart no worse on {}/{} seeds; std pure_bo {:.6e} portfolio {:.6e}",
            d.dataset_id,
            d.portfolio_len,
            d.warm_not_worse_at_p(),
            d.seeds.len(),
            sp,
            sw
        );
    }
    text
}

/// Pure BO against portfolio-warmstarted BO on every test dataset with
/// paired seeds and equal budgets.
pub fn run_warmstart_study(cfg: &ExperimentConfig, global: &Global) -> CliResult<WarmstartReport> {
    cfg.validate()?;
    generate_data(cfg, global)?;
    harvest(cfg, global)?;
    let (_, path, portfolio) = build_portfolios(cfg, &[cfg.portfolio_size], global)?
        .pop()
        .expect("one portfolio per size");
    let p = portfolio.len();
    let runs = run_grid(cfg, &cfg.test, &[(0, PathBuf::new()), (p.max(1), path)], global)?;
    let families = cfg.meta_families();
    let mut datasets = Vec::new();
    let mut comparisons = Vec::new();
    for t in &cfg.test {
        let pick = |size: usize| -> Vec<&TuningTrace> {
            cfg.seeds
                .iter()
                .map(|s| {
                    &runs
                        .iter()
                        .find(|(id, q, seed, _)| *id == t.id && *q == size && seed == s)
                        .expect("every grid cell ran")
                        .3
                        .trace
                })
                .collect()
        };
        let d = paired_result(&t.id, families.contains(&t.system), p, &cfg.seeds, &pick(0), &pick(p.max(1)));
        if let (Ok(a), Ok(b)) = (d.pure_summary(), d.portfolio_summary()) {
            comparisons.push(report::compare(&a, &b)?);
        }
        datasets.push(d);
    }
    let text = warmstart_text(&datasets, &comparisons);
    write_report(cfg, "warmstart.txt", &text)?;
    fs::write(
        cfg.report_dir().join("warmstart.json"),
        serde_json::to_string_pretty(&datasets)? + "\n",
    )?;
    Ok(WarmstartReport {
        portfolio,
        datasets,
        comparisons,
        text,
    })
}

fn write_report(cfg: &ExperimentConfig, name: &str, text: &str) -> CliResult<()> {
    fs::create_dir_all(cfg.report_dir())?;
    fs::write(cfg.report_dir().join(name), text)?;
    print!("{text}");
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SizeSweepReport {
    /// Requested sizes, starting with 0 for pure BO.
    pub sizes: Vec<usize>,
    pub portfolios: Vec<Portfolio>,
    /// Per test dataset: gain of each size over pure BO.
    pub gains: Vec<(String, Vec<f64>)>,
    /// Mean final score per dataset and size.
    pub means: Vec<(String, Vec<f64>)>,
    pub nested: bool,
    pub text: String,
}

/// Portfolios of several sizes from one matrix, each used to warmstart the
/// same paired seeds.
pub fn run_size_sweep(cfg: &ExperimentConfig, sizes: &[usize], global: &Global) -> CliResult<SizeSweepReport> {
    cfg.validate()?;
    if sizes.iter().any(|&p| p == 0 || p > cfg.budget) {
        return Err(CliError::invalid("sweep sizes must lie in [1, budget]"));
    }
    generate_data(cfg, global)?;
    harvest(cfg, global)?;
    let built = build_portfolios(cfg, sizes, global)?;
    let portfolios: Vec<Portfolio> = built.iter().map(|(_, _, p)| p.clone()).collect();
    let nested = portfolios
        .windows(2)
        .all(|w| w[0].len() <= w[1].len() && w[0].configs[..] == w[1].configs[..w[0].len()]);
    let mut grid: Vec<(usize, PathBuf)> = vec![(0, PathBuf::new())];
    grid.extend(built.iter().map(|(p, path, _)| (*p, path.clone())));
    let runs = run_grid(cfg, &cfg.test, &grid, global)?;

    let mut gains = Vec::new();
    let mut means = Vec::new();
    for t in &cfg.test {
        let mean_of = |size: usize| {
            let finals: Vec<f64> = runs
                .iter()
                .filter(|(id, q, _, _)| *id == t.id && *q == size)
                .filter_map(|(_, _, _, o)| o.trace.final_incumbent())
                .collect();
            report::mean(&finals)
        };
        let base = mean_of(0);
        let row_means: Vec<f64> = grid.iter().map(|(p, _)| mean_of(*p)).collect();
        let row_gains = row_means
            .iter()
            .map(|m| report::gain_percent(base, *m).unwrap_or(f64::NAN))
            .collect();
        gains.push((t.id.clone(), row_gains));
        means.push((t.id.clone(), row_means));
    }
    let all_sizes: Vec<usize> = grid.iter().map(|(p, _)| *p).collect();
    let mut text = String::from("Portfolio size sweep: gain (%) of the mean final RMSE over pure BO (p=0); < marks the best size\n");
    text += &report::format_size_table(&all_sizes, &gains);
    text += "\nPortfolio lengths (capped by the number of distinct candidates): ";
    text += &portfolios
        .iter()
        .zip(sizes)
        .map(|(p, s)| format!("p={s}:{}", p.len()))
        .collect::<Vec<_>>()
        .join(" ");
    let _ = writeln!(text, "\nPrefix-nested: {nested}");
    write_report(cfg, "size_sweep.txt", &text)?;
    Ok(SizeSweepReport {
        sizes: all_sizes,
        portfolios,
        gains,
        means,
        nested,
        text,
    })
}

#[derive(Clone, Debug)]
pub struct ControlStudyReport {
    pub rows: Vec<ControlRow>,
    pub records: Vec<ControlRecord>,
    pub zero_score: f64,
    pub text: String,
}

pub fn size_label(p: usize) -> String {
    format!("size={p}")
}

/// Models tuned with each portfolio size on the first test dataset, scored
/// as MPC controllers on the control task.
pub fn run_control_study(cfg: &ExperimentConfig, global: &Global) -> CliResult<ControlStudyReport> {
    cfg.validate()?;
    let task = mpc_portfolio::control::ControlTask::by_name(&cfg.control.task)?;
    let target = &cfg.test[0];
    if Family::parse(&target.system)? != task.system.family {
        return Err(CliError::invalid(format!(
            "control task {} needs a {} test dataset, got {}",
            task.id,
            task.system.family.name(),
            target.system
        )));
    }
    generate_data(cfg, global)?;
    harvest(cfg, global)?;
    let sizes: Vec<usize> = cfg.control.sizes.iter().copied().filter(|p| *p > 0).collect();
    let built = if sizes.is_empty() {
        Vec::new()
    } else {
        build_portfolios(cfg, &sizes, global)?
    };
    let mut grid = Vec::new();
    for &p in &cfg.control.sizes {
        if p == 0 {
            grid.push((0, PathBuf::new()));
        } else {
            let (_, path, _) = built.iter().find(|(q, _, _)| *q == p).expect("built every size");
            grid.push((p, path.clone()));
        }
    }
    let runs = run_grid(cfg, std::slice::from_ref(target), &grid, global)?;

    let control_dir = cfg.out_dir.join("control");
    if control_dir.exists() {
        fs::remove_dir_all(&control_dir)?;
    }
    let mut jobs = Vec::new();
    for &p in &cfg.control.sizes {
        for &seed in &cfg.seeds {
            let (_, _, _, o) = runs
                .iter()
                .find(|(_, q, s, _)| *q == p && *s == seed)
                .expect("every grid cell ran");
            jobs.push((p, seed, o.dir.join(MODEL_FILE)));
        }
    }
    let records = jobs
        .par_iter()
        .map(|(p, seed, model)| {
            if !model.exists() {
                return Err(CliError::new(
                    ExitKind::AllFailed,
                    anyhow::anyhow!("no model for size {p} seed {seed}"),
                ));
            }
            let args = ControlEvalArgs {
                model: model.display().to_string(),
                task: cfg.control.task.clone(),
                episodes: cfg.control.episodes,
                seed: *seed,
                horizon: None,
                samples: None,
                label: Some(size_label(*p)),
                mpc: None,
                out: Some(control_dir.join(format!("control-p{p}-seed{seed}.jsonl"))),
            };
            commands::control_eval(&args, global)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let groups: Vec<(String, Vec<f64>)> = cfg
        .control
        .sizes
        .iter()
        .map(|&p| {
            let label = size_label(p);
            let scores = records.iter().filter(|r| r.label == label).map(|r| r.score).collect();
            (label, scores)
        })
        .collect();
    let rows = report::control_rows(&groups)?;
    let zero = mpc_portfolio::control::evaluate_zero_controller(&task, 1)?;
    let mut text = format!(
        "Control study on {} (score 0-10, lower is better; zero controller scores {:.4})\n",
        task.id, zero.score
    );
    text += &report::format_control_table(&rows);
    write_report(cfg, "control.txt", &text)?;
    Ok(ControlStudyReport {
        rows,
        records,
        zero_score: zero.score,
        text,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StudyKind {
    Warmstart,
    Sizes,
    Control,
}

#[derive(Args, Clone, Debug)]
pub struct StudyArgs {
    #[arg(long, value_enum)]
    pub kind: StudyKind,
    /// Experiment config file; the desk-scale preset for the study is used
    /// when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long)]
    pub print_config: bool,
}

pub fn run_study(args: &StudyArgs, global: &Global) -> CliResult<()> {
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let out = global.out_root.join(match args.kind {
                StudyKind::Warmstart => "warmstart",
                StudyKind::Sizes => "sizes",
                StudyKind::Control => "control",
            });
            match args.kind {
                StudyKind::Control => ExperimentConfig::desk_cartpole(out),
                _ => ExperimentConfig::desk_pendulum(out),
            }
        }
    };
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    match args.kind {
        StudyKind::Warmstart => run_warmstart_study(&cfg, global).map(|_| ()),
        StudyKind::Sizes => run_size_sweep(&cfg, &cfg.portfolio_sizes.clone(), global).map(|_| ()),
        StudyKind::Control => run_control_study(&cfg, global).map(|_| ()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disjointness_is_enforced() {
        let cfg = ExperimentConfig::desk_pendulum(PathBuf::from("x"));
        assert!(cfg.validate().is_ok());
        let mut bad = cfg.clone();
        bad.test[0].id = bad.meta[0].id.clone();
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.test[0] = DatasetSpec {
            id: "copy".into(),
            ..bad.meta[1].clone()
        };
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.budget = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_round_trips() {
        let cfg = ExperimentConfig::desk_cartpole(PathBuf::from("out/c"));
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
    }
}

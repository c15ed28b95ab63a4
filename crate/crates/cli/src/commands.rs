//! The pipeline stages. Each reads and writes plain files so stages can
//! be chained, rerun and diffed.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use mpc_portfolio::configspace::Configuration;
use mpc_portfolio::control::{self, ControlTask, MPCConfig, TrueModel};
use mpc_portfolio::dynamics::{self, Dataset, Family, Split, SystemSpec};
use mpc_portfolio::portfolio::{self, CandidateSet, PerformanceMatrix, Portfolio};
use mpc_portfolio::report::{self, Comparison, ControlRow};
use mpc_portfolio::sysid::{self, DynamicsModel, Predictor};
use mpc_portfolio::tuner::{self, trace, TuningTrace};

use crate::{CliError, CliResult, ExitKind, Global};

pub const DATASET_EXT: &str = "dataset";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const INCUMBENT_FILE: &str = "incumbent.json";
pub const MODEL_FILE: &str = "model.json";
pub const MATRIX_FILE: &str = "matrix.json";
pub const PURE_BO: &str = "pure_bo";

pub fn portfolio_method(p: usize) -> String {
    format!("portfolio({p})")
}

pub fn portfolio_file_name(p: usize, single: bool) -> String {
    if single {
        "portfolio.json".into()
    } else {
        format!("portfolio-p{p}.json")
    }
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(format!("{what} {} does not exist", path.display())))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> CliResult<T> {
    require(path, what)?;
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

#[derive(Args, Clone, Debug)]
pub struct GenDataArgs {
    /// System family: pendulum or cartpole.
    #[arg(long)]
    pub system: String,
    #[arg(long, default_value_t = 1.0)]
    pub gravity_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub mass_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub length_scale: f64,
    #[arg(long, default_value_t = 100)]
    pub n_traj: usize,
    /// Steps per trajectory.
    #[arg(long, default_value_t = 200)]
    pub length: usize,
    /// Time step override in seconds.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset id; derived from the variant when omitted.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl GenDataArgs {
    pub fn dataset_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| {
            format!(
                "{}-g{}-m{}-l{}-s{}",
                self.system, self.gravity_scale, self.mass_scale, self.length_scale, self.seed
            )
        })
    }
}

pub fn gen_data(args: &GenDataArgs, global: &Global) -> CliResult<PathBuf> {
    let family = Family::parse(&args.system)?;
    let mut system = SystemSpec::of_family(family).make_variant(args.gravity_scale, args.mass_scale, args.length_scale)?;
    if let Some(dt) = args.dt {
        system.dt = dt;
    }
    let id = args.dataset_id();
    let ds = dynamics::generate_dataset(&id, &system, args.n_traj, args.length, args.seed, Split::default())?;
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| global.out_root.join("data").join(format!("{id}.{DATASET_EXT}")));
    ensure_parent(&path)?;
    dynamics::write_dataset(&ds, &path)?;
    println!(
        "wrote {}: id={id} trajectories={} steps={} train/valid/test={}/{}/{}",
        path.display(),
        ds.trajectories.len(),
        args.length,
        ds.train().len(),
        ds.valid().len(),
        ds.test().len()
    );
    Ok(path)
}

pub fn load_dataset(path: &Path) -> CliResult<Dataset> {
    require(path, "dataset")?;
    Ok(dynamics::read_dataset(path)?)
}

#[derive(Args, Clone, Debug)]
pub struct TuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `random` or `portfolio:PATH`.
    #[arg(long, default_value = "random")]
    pub init: String,
    #[arg(long, default_value_t = 40)]
    pub budget: usize,
    #[arg(long, default_value_t = sysid::DEFAULT_FOLDS)]
    pub k_folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-evaluation wallclock limit.
    #[arg(long, default_value_t = 60.0)]
    pub timeout_s: f64,
    /// Output directory; defaults to `<out-root>/tune/<dataset>/<method>/seed-<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncumbentFile {
    pub dataset_id: String,
    pub method: String,
    pub seed: u64,
    pub config: Option<Configuration>,
    pub score: Option<f64>,
    #[serde(default)]
    pub per_fold: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub dir: PathBuf,
    pub trace: TuningTrace,
    pub incumbent: IncumbentFile,
}

fn timeout(seconds: f64) -> CliResult<Duration> {
    Duration::try_from_secs_f64(seconds)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| CliError::invalid(format!("timeout must be a positive number of seconds, got {seconds}")))
}

pub fn tune(args: &TuneArgs, global: &Global) -> CliResult<TuneOutcome> {
    let ds = load_dataset(&args.data)?;
    if args.budget < 1 {
        return Err(CliError::invalid("budget must be at least 1"));
    }
    if args.k_folds < 2 || args.k_folds > ds.train().len() {
        return Err(CliError::invalid(format!(
            "k-folds must lie in [2, {}] for this dataset",
            ds.train().len()
        )));
    }
    let limit = timeout(args.timeout_s)?;
    let (initial, method) = match args.init.split_once(':') {
        None if args.init == "random" => (Vec::new(), PURE_BO.to_string()),
        Some(("portfolio", path)) => {
            let p: Portfolio = read_json(Path::new(path), "portfolio")?;
            let design = portfolio::portfolio_to_initial_design(&p);
            let method = if design.is_empty() {
                PURE_BO.to_string()
            } else {
                portfolio_method(design.len())
            };
            (design, method)
        }
        _ => {
            return Err(CliError::invalid(format!(
                "--init must be `random` or `portfolio:PATH`, got {:?}",
                args.init
            )))
        }
    };
    if args.budget < initial.len() {
        return Err(CliError::invalid(format!(
            "budget {} is smaller than the portfolio size {}",
            args.budget,
            initial.len()
        )));
    }
    let dir = args.out.clone().unwrap_or_else(|| {
        global
            .out_root
            .join("tune")
            .join(&ds.id)
            .join(method.replace(['(', ')'], ""))
            .join(format!("seed-{}", args.seed))
    });
    fs::create_dir_all(&dir)?;

    let space = sysid::model_config_space();
    let mut writer = trace::TraceWriter::create(&dir.join(TRACE_FILE), global.canonical)?;
    let meta = TuningTrace {
        entries: Vec::new(),
        seed: args.seed,
        initial_design_kind: if initial.is_empty() {
            tuner::InitialDesign::Random
        } else {
            tuner::InitialDesign::Portfolio
        },
        budget_iterations: args.budget,
        dataset_id: ds.id.clone(),
        method: method.clone(),
    };
    writer.header(&space, &meta)?;
    let mut write_error = None;
    let train = ds.train();
    let mut result = tuner::tune_observed(
        &space,
        |c, s| sysid::evaluate_with_timeout(c, train, args.k_folds, s, limit),
        args.budget,
        &initial,
        args.seed,
        |e| {
            if let Err(err) = writer.entry(e) {
                write_error.get_or_insert(err);
            }
        },
    )?;
    if let Some(err) = write_error {
        return Err(err.into());
    }
    result.trace.dataset_id = ds.id.clone();
    result.trace.method = method.clone();
    if global.canonical {
        result.trace.canonicalize();
    }
    writer.summary(&result.trace)?;

    let incumbent = IncumbentFile {
        dataset_id: ds.id.clone(),
        method: method.clone(),
        seed: args.seed,
        config: result.incumbent.clone(),
        score: result.incumbent_score.rmse,
        per_fold: result.incumbent_score.per_fold.clone(),
    };
    write_json(&dir.join(INCUMBENT_FILE), &incumbent)?;
    let Some(config) = &result.incumbent else {
        return Err(CliError::new(
            ExitKind::AllFailed,
            anyhow::anyhow!("every one of {} evaluations failed on {}", args.budget, ds.id),
        ));
    };
    let model = sysid::train(config, train)?;
    fs::write(dir.join(MODEL_FILE), model.to_json()? + "\n")?;
    println!(
        "{} {method} seed {}: best rmse {:.6e} after {} evaluations ({})",
        ds.id,
        args.seed,
        result.incumbent_score.rmse.unwrap_or(f64::NAN),
        args.budget,
        dir.display()
    );
    Ok(TuneOutcome {
        dir,
        trace: result.trace,
        incumbent,
    })
}

#[derive(Args, Clone, Debug)]
pub struct PortfolioArgs {
    /// Directory holding tuning outputs of the meta datasets.
    #[arg(long)]
    pub candidates_dir: PathBuf,
    /// Directory holding the meta dataset files.
    #[arg(long)]
    pub meta_dir: PathBuf,
    /// Portfolio size; a comma-separated list builds one portfolio per size
    /// from a single matrix.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    pub size: Vec<usize>,
    #[arg(long, default_value_t = sysid::DEFAULT_FOLDS)]
    pub k_folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 60.0)]
    pub timeout_s: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct PortfolioOutcome {
    pub dir: PathBuf,
    pub matrix: PerformanceMatrix,
    pub portfolios: Vec<(usize, PathBuf, Portfolio)>,
}

/// Files with the given extension directly inside `dir`, sorted by name.
pub fn files_with_ext(dir: &Path, ext: &str) -> CliResult<Vec<PathBuf>> {
    require(dir, "directory")?;
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().map_or(false, |e| e == ext))
        .collect();
    out.sort();
    Ok(out)
}

/// Every file called `name` below `dir`, in sorted path order.
pub fn find_files(dir: &Path, name: &str) -> CliResult<Vec<PathBuf>> {
    require(dir, "directory")?;
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::new(ExitKind::Failure, e))?;
        if entry.file_type().is_file() && entry.file_name() == name {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

pub fn portfolio(args: &PortfolioArgs, global: &Global) -> CliResult<PortfolioOutcome> {
    if args.size.is_empty() || args.size.contains(&0) {
        return Err(CliError::invalid("portfolio sizes must be at least 1"));
    }
    let limit = timeout(args.timeout_s)?;
    let incumbent_paths = find_files(&args.candidates_dir, INCUMBENT_FILE)?;
    if incumbent_paths.is_empty() {
        return Err(CliError::missing(format!(
            "no {INCUMBENT_FILE} below {}",
            args.candidates_dir.display()
        )));
    }
    let mut incumbents = Vec::new();
    for p in &incumbent_paths {
        let f: IncumbentFile = read_json(p, "incumbent")?;
        incumbents.push((f.dataset_id, f.config));
    }
    let candidates = CandidateSet::from_incumbents(incumbents)
        .map_err(|e| CliError::new(ExitKind::AllFailed, e))?;
    let meta_paths = files_with_ext(&args.meta_dir, DATASET_EXT)?;
    if meta_paths.is_empty() {
        return Err(CliError::missing(format!(
            "no .{DATASET_EXT} files in {}",
            args.meta_dir.display()
        )));
    }
    let meta = meta_paths.iter().map(|p| load_dataset(p)).collect::<CliResult<Vec<_>>>()?;
    for ds in &meta {
        if args.k_folds < 2 || args.k_folds > ds.train().len() {
            return Err(CliError::invalid(format!(
                "k-folds must lie in [2, {}] for {}",
                ds.train().len(),
                ds.id
            )));
        }
    }
    let settings = portfolio::EvalSettings {
        folds: args.k_folds,
        seed: args.seed,
        timeout: limit,
    };
    let matrix = portfolio::build_matrix(&candidates, &meta, &settings).map_err(|e| match e {
        mpc_portfolio::Error::Empty(_) => CliError::new(ExitKind::AllFailed, e),
        other => other.into(),
    })?;
    let dir = args.out.clone().unwrap_or_else(|| global.out_root.join("portfolio"));
    fs::create_dir_all(&dir)?;
    matrix.write(&dir.join(MATRIX_FILE))?;
    let normalized = portfolio::normalize_rows(&matrix);
    let hash = matrix.hash();
    let single = args.size.len() == 1;
    let mut portfolios = Vec::new();
    for &p in &args.size {
        let port = portfolio::greedy_select_with_hash(&normalized, p, hash.clone())?;
        let path = dir.join(portfolio_file_name(p, single));
        port.write(&path)?;
        println!(
            "portfolio p={p}: {} of {} candidates over {} meta datasets -> {}",
            port.len(),
            candidates.len(),
            matrix.n_datasets(),
            path.display()
        );
        portfolios.push((p, path, port));
    }
    Ok(PortfolioOutcome { dir, matrix, portfolios })
}

#[derive(Args, Clone, Debug)]
pub struct ControlEvalArgs {
    /// Path to a model file, or `zero` / `true` for the baselines.
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value = "cartpole-swingup")]
    pub task: String,
    #[arg(long, default_value_t = 1)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Planning horizon override.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// CEM sample count override.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Group label used by `report`; defaults to the model id.
    #[arg(long)]
    pub label: Option<String>,
    /// Optimizer config written by `tune-control`; defaults otherwise.
    #[arg(long)]
    pub mpc: Option<PathBuf>,
    /// Results file the record is appended to.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub task: String,
    pub model_id: String,
    pub label: String,
    pub seed: u64,
    pub mpc: MPCConfig,
    pub episode_costs: Vec<f64>,
    pub raw_cost: f64,
    pub score: f64,
    pub worst_ref: f64,
}

enum ModelSource {
    Zero,
    True,
    File(DynamicsModel),
}

fn load_model_source(arg: &str, task: &ControlTask) -> CliResult<ModelSource> {
    match arg {
        "zero" => Ok(ModelSource::Zero),
        "true" => Ok(ModelSource::True),
        path => {
            let path = Path::new(path);
            require(path, "model")?;
            let model = DynamicsModel::from_json(&fs::read_to_string(path)?)?;
            if model.state_dim() != task.system.state_dim() || model.control_dim() != task.system.control_dim() {
                return Err(CliError::invalid(format!(
                    "model has state/control dims {}/{} but task {} needs {}/{}",
                    model.state_dim(),
                    model.control_dim(),
                    task.id,
                    task.system.state_dim(),
                    task.system.control_dim()
                )));
            }
            Ok(ModelSource::File(model))
        }
    }
}

pub fn control_eval(args: &ControlEvalArgs, global: &Global) -> CliResult<ControlRecord> {
    let task = ControlTask::by_name(&args.task)?;
    let mut cfg = match &args.mpc {
        Some(path) => read_json(path, "optimizer config")?,
        None => MPCConfig::for_system(&task.system),
    };
    if let Some(h) = args.horizon {
        cfg.horizon = h;
    }
    if let Some(s) = args.samples {
        cfg.samples = s;
    }
    let score = match load_model_source(&args.model, &task)? {
        ModelSource::Zero => control::evaluate_zero_controller(&task, args.episodes)?,
        ModelSource::True => {
            control::evaluate_controller(&TrueModel(&task.system), &task, &cfg, args.episodes, args.seed)?
        }
        ModelSource::File(model) => control::evaluate_controller(&model, &task, &cfg, args.episodes, args.seed)?,
    };
    let record = ControlRecord {
        task: task.id.clone(),
        model_id: args.model.clone(),
        label: args.label.clone().unwrap_or_else(|| args.model.clone()),
        seed: args.seed,
        mpc: cfg,
        episode_costs: score.episode_costs,
        raw_cost: score.raw_cost,
        score: score.score,
        worst_ref: score.worst_ref,
    };
    let out = args.out.clone().unwrap_or_else(|| global.out_root.join("control.jsonl"));
    ensure_parent(&out)?;
    let mut f = OpenOptions::new().create(true).append(true).open(&out)?;
    writeln!(f, "{}", serde_json::to_string(&record)?)?;
    println!(
        "{} with {}: score {:.4} (cost {:.4}, zero-controller {:.4})",
        record.task, record.label, record.score, record.raw_cost, record.worst_ref
    );
    Ok(record)
}

pub const MPC_FILE: &str = "mpc.json";

#[derive(Args, Clone, Debug)]
pub struct TuneControlArgs {
    /// Path to a model file, or `true` for the simulator itself.
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value = "cartpole-swingup")]
    pub task: String,
    #[arg(long, default_value_t = 20)]
    pub budget: usize,
    #[arg(long, default_value_t = 1)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for trace.jsonl and mpc.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// BO over the MPC optimizer settings for a fixed model, run after model
/// tuning.
pub fn tune_control(args: &TuneControlArgs, global: &Global) -> CliResult<(PathBuf, MPCConfig)> {
    let task = ControlTask::by_name(&args.task)?;
    if args.budget < 1 || args.episodes < 1 {
        return Err(CliError::invalid("budget and episodes must be at least 1"));
    }
    let result = match load_model_source(&args.model, &task)? {
        ModelSource::Zero => return Err(CliError::invalid("the zero controller has no optimizer to tune")),
        ModelSource::True => control::tune_mpc(&TrueModel(&task.system), &task, args.budget, args.episodes, args.seed)?,
        ModelSource::File(model) => control::tune_mpc(&model, &task, args.budget, args.episodes, args.seed)?,
    };
    let dir = args.out.clone().unwrap_or_else(|| {
        global
            .out_root
            .join("tune-control")
            .join(&task.id)
            .join(format!("seed-{}", args.seed))
    });
    fs::create_dir_all(&dir)?;
    let mut trace = result.trace;
    trace.dataset_id = task.id.clone();
    trace.method = "mpc_bo".into();
    if global.canonical {
        trace.canonicalize();
    }
    let space = control::mpc_config_space();
    let mut writer = trace::TraceWriter::create(&dir.join(TRACE_FILE), global.canonical)?;
    writer.header(&space, &trace)?;
    for e in &trace.entries {
        writer.entry(e)?;
    }
    writer.summary(&trace)?;
    let Some(best) = result.incumbent else {
        return Err(CliError::new(
            ExitKind::AllFailed,
            anyhow::anyhow!("every optimizer evaluation failed on {}", task.id),
        ));
    };
    let cfg = control::mpc_config_from(&best, &task.system)?;
    write_json(&dir.join(MPC_FILE), &cfg)?;
    println!(
        "{} optimizer tuned for {}: best episode cost {:.4} ({})",
        task.id,
        args.model,
        result.incumbent_score.rmse.unwrap_or(f64::NAN),
        dir.display()
    );
    Ok((dir, cfg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Csv,
}

#[derive(Args, Clone, Debug)]
pub struct ReportArgs {
    /// Results directory scanned recursively for traces and control results.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub format: ReportFormat,
    /// Also render tuning curves as SVG images.
    #[arg(long)]
    pub plot: bool,
    /// Where report files go; defaults to `<dir>/report`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct ReportOutcome {
    pub comparisons: Vec<Comparison>,
    pub control: Vec<ControlRow>,
    pub text: String,
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Traces below `dir` grouped by dataset and method.
pub fn collect_traces(dir: &Path) -> CliResult<BTreeMap<(String, String), Vec<TuningTrace>>> {
    let space = sysid::model_config_space();
    let mut groups: BTreeMap<(String, String), Vec<TuningTrace>> = BTreeMap::new();
    for path in find_files(dir, TRACE_FILE)? {
        let t = trace::read_trace(&path, &space)?;
        groups.entry((t.dataset_id.clone(), t.method.clone())).or_default().push(t);
    }
    for traces in groups.values_mut() {
        traces.sort_by_key(|t| t.seed);
    }
    Ok(groups)
}

/// Control records below `dir` (files named `control*.jsonl`).
pub fn collect_control(dir: &Path) -> CliResult<Vec<ControlRecord>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::new(ExitKind::Failure, e))?;
        let name = entry.file_name().to_string_lossy();
        if !(entry.file_type().is_file() && name.starts_with("control") && name.ends_with(".jsonl")) {
            continue;
        }
        for line in fs::read_to_string(entry.path())?.lines().filter(|l| !l.trim().is_empty()) {
            out.push(serde_json::from_str(line)?);
        }
    }
    Ok(out)
}

/// Control scores grouped by label in order of first appearance.
pub fn group_control(records: &[ControlRecord]) -> Vec<(String, Vec<f64>)> {
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|(l, _)| *l == r.label) {
            Some((_, v)) => v.push(r.score),
            None => groups.push((r.label.clone(), vec![r.score])),
        }
    }
    groups
}

pub fn report(args: &ReportArgs, _global: &Global) -> CliResult<ReportOutcome> {
    require(&args.dir, "results directory")?;
    let out_dir = args.out.clone().unwrap_or_else(|| args.dir.join("report"));
    let groups = collect_traces(&args.dir)?;
    let records = collect_control(&args.dir)?;
    if groups.is_empty() && records.is_empty() {
        return Err(CliError::missing(format!(
            "no {TRACE_FILE} or control results below {}",
            args.dir.display()
        )));
    }
    fs::create_dir_all(&out_dir)?;

    let mut summaries = BTreeMap::new();
    for ((dataset, method), traces) in &groups {
        let table = report::curve_table(traces)?;
        let stem = format!("curves-{}-{}", file_safe(dataset), file_safe(method));
        fs::write(out_dir.join(format!("{stem}.csv")), report::curves_csv(&table))?;
        if args.plot {
            let svg = report::curves_svg(&format!("{dataset} / {method}"), &table);
            fs::write(out_dir.join(format!("{stem}.svg")), svg)?;
        }
        match report::summarize(traces) {
            Ok(s) => {
                summaries.insert((dataset.clone(), method.clone()), s);
            }
            Err(e) => log::warn!("{dataset}/{method}: {e}"),
        }
    }
    let mut comparisons = Vec::new();
    for ((dataset, method), s) in &summaries {
        if method == PURE_BO {
            continue;
        }
        if let Some(base) = summaries.get(&(dataset.clone(), PURE_BO.to_string())) {
            comparisons.push(report::compare(base, s)?);
        }
    }
    let control_groups = group_control(&records);
    let control = if control_groups.is_empty() {
        Vec::new()
    } else {
        report::control_rows(&control_groups)?
    };

    let mut text = String::new();
    match args.format {
        ReportFormat::Table => {
            if !comparisons.is_empty() {
                text += "Model tuning: final incumbent RMSE over seeds (every objective call counts as one iteration; * marks p < 0.1)\n";
                text += &report::format_comparison_table(&comparisons);
            }
            if !control.is_empty() {
                if !text.is_empty() {
                    text += "\n";
                }
                text += "Control score (0-10, lower is better; gains against the first row)\n";
                text += &report::format_control_table(&control);
            }
            fs::write(out_dir.join("summary.txt"), &text)?;
        }
        ReportFormat::Csv => {
            let cmp = report::format_comparison_csv(&comparisons);
            fs::write(out_dir.join("comparisons.csv"), &cmp)?;
            text += &cmp;
            if !control.is_empty() {
                let c = report::format_control_csv(&control);
                fs::write(out_dir.join("control.csv"), &c)?;
                text += "\n";
                text += &c;
            }
        }
    }
    print!("{text}");
    Ok(ReportOutcome {
        comparisons,
        control,
        text,
    })
}

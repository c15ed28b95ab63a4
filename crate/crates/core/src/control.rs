//! Sampling-based MPC on learned models and the 0-10 control score.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::configspace::{Configuration, ConfigurationSpace, HyperparameterSpec, Value};
use crate::dynamics::{Family, SystemSpec};
use crate::error::{Error, Result};
use crate::rng;
use crate::sysid::{ModelScore, Predictor};
use crate::tuner::{self, TuneResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlTask {
    pub id: String,
    pub system: SystemSpec,
    pub start_state: Vec<f64>,
    pub goal_state: Vec<f64>,
    /// Diagonal state weights.
    pub q: Vec<f64>,
    /// Diagonal control weights.
    pub r: Vec<f64>,
    pub episode_length: usize,
    /// Episode cost that maps to score 0.
    pub success_threshold: f64,
}

pub const TASK_NAMES: [&str; 3] = ["cartpole-swingup", "cartpole-balance", "pendulum-swingup"];

impl ControlTask {
    /// Swing the pole up from hanging and hold it over the origin.
    pub fn cartpole_swingup() -> Self {
        Self {
            id: "cartpole-swingup".into(),
            system: SystemSpec::cartpole(),
            start_state: Family::Cartpole.rest_state(),
            goal_state: vec![0.0; 4],
            q: vec![1.0, 10.0, 0.1, 0.1],
            r: vec![1e-3],
            episode_length: 100,
            success_threshold: 1500.0,
        }
    }

    /// Keep the pole upright starting slightly off balance.
    pub fn cartpole_balance() -> Self {
        Self {
            id: "cartpole-balance".into(),
            start_state: vec![0.0, 0.1, 0.0, 0.0],
            success_threshold: 20.0,
            ..Self::cartpole_swingup()
        }
    }

    pub fn pendulum_swingup() -> Self {
        Self {
            id: "pendulum-swingup".into(),
            system: SystemSpec::pendulum(),
            start_state: Family::Pendulum.rest_state(),
            goal_state: vec![0.0, 0.0],
            q: vec![10.0, 0.1],
            r: vec![1e-2],
            episode_length: 100,
            success_threshold: 6000.0,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "cartpole-swingup" => Ok(Self::cartpole_swingup()),
            "cartpole-balance" => Ok(Self::cartpole_balance()),
            "pendulum-swingup" => Ok(Self::pendulum_swingup()),
            _ => Err(Error::InvalidArgument(format!(
                "unknown task {name:?}; expected one of {}",
                TASK_NAMES.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        let (n, m) = (self.system.state_dim(), self.system.control_dim());
        for (what, len, want) in [
            ("start_state", self.start_state.len(), n),
            ("goal_state", self.goal_state.len(), n),
            ("q", self.q.len(), n),
            ("r", self.r.len(), m),
        ] {
            if len != want {
                return Err(Error::InvalidArgument(format!(
                    "{what} has length {len}, expected {want}"
                )));
            }
        }
        if self.q.iter().chain(&self.r).any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument(
                "cost weights must be non-negative".into(),
            ));
        }
        if self.episode_length < 1 {
            return Err(Error::InvalidArgument(
                "episode_length must be at least 1".into(),
            ));
        }
        if !(self.success_threshold > 0.0) {
            return Err(Error::InvalidArgument(
                "success_threshold must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Weighted squared distance to the goal; angle errors are wrapped to
    /// (-pi, pi].
    pub fn state_cost(&self, x: &[f64]) -> f64 {
        let angles = self.system.family.angle_dims();
        x.iter()
            .zip(&self.goal_state)
            .zip(&self.q)
            .enumerate()
            .map(|(i, ((xi, gi), qi))| {
                let e = if angles.contains(&i) {
                    wrap_angle(xi - gi)
                } else {
                    xi - gi
                };
                qi * e * e
            })
            .sum()
    }

    pub fn control_cost(&self, u: &[f64]) -> f64 {
        u.iter().zip(&self.r).map(|(v, r)| r * v * v).sum()
    }

    /// Episode cost of applying zero control throughout.
    pub fn zero_controller_cost(&self) -> Result<f64> {
        let zero = vec![0.0; self.system.control_dim()];
        let mut x = self.start_state.clone();
        let mut cost = 0.0;
        for _ in 0..self.episode_length {
            x = self.system.step(&x, &zero)?;
            cost += self.state_cost(&x);
        }
        Ok(cost)
    }

    /// Maps an episode cost onto [0, 10] on a log scale between the success
    /// threshold (0) and `worst_ref` (10).
    pub fn score(&self, raw_cost: f64, worst_ref: f64) -> f64 {
        let thr = self.success_threshold;
        if !(raw_cost > thr) {
            return 0.0;
        }
        if !(worst_ref > thr) || !raw_cost.is_finite() {
            return 10.0;
        }
        10.0 * ((raw_cost / thr).ln() / (worst_ref / thr).ln()).clamp(0.0, 1.0)
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MPCConfig {
    pub horizon: usize,
    pub samples: usize,
    pub elite_fraction: f64,
    pub cem_iterations: usize,
    /// Initial sampling standard deviation per control dimension.
    pub control_noise_std: Vec<f64>,
}

impl MPCConfig {
    /// Default optimizer settings; the initial spread is a quarter of each
    /// control range.
    pub fn for_system(system: &SystemSpec) -> Self {
        Self {
            horizon: 20,
            samples: 200,
            elite_fraction: 0.1,
            cem_iterations: 4,
            control_noise_std: system
                .control_bounds
                .iter()
                .map(|(lo, hi)| (hi - lo) / 4.0)
                .collect(),
        }
    }

    pub fn elite_count(&self) -> usize {
        (self.elite_fraction * self.samples as f64).ceil() as usize
    }

    pub fn validate(&self, control_dim: usize) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if self.samples < 2 {
            return Err(Error::InvalidArgument("samples must be at least 2".into()));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction <= 1.0) {
            return Err(Error::InvalidArgument(
                "elite_fraction must lie in (0, 1]".into(),
            ));
        }
        if self.control_noise_std.len() != control_dim {
            return Err(Error::DimensionMismatch {
                expected: control_dim,
                actual: self.control_noise_std.len(),
            });
        }
        if self.control_noise_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidArgument(
                "control_noise_std must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Settings for [`cem_minimize`].
#[derive(Clone, Debug)]
pub struct CemSettings {
    pub samples: usize,
    pub elites: usize,
    pub iterations: usize,
}

/// Cross-entropy minimization over a box. Samples are drawn sequentially from
/// the seeded stream and evaluated in parallel; non-finite costs count as
/// +inf. Returns the final mean.
pub fn cem_minimize<F>(
    objective: F,
    bounds: &[(f64, f64)],
    mut mean: Vec<f64>,
    mut std: Vec<f64>,
    settings: &CemSettings,
    seed: u64,
) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let dim = bounds.len();
    let mut r = rng::rng(seed);
    for _ in 0..settings.iterations {
        let population: Vec<Vec<f64>> = (0..settings.samples)
            .map(|_| {
                (0..dim)
                    .map(|d| {
                        let z: f64 = r.sample(StandardNormal);
                        (mean[d] + std[d] * z).clamp(bounds[d].0, bounds[d].1)
                    })
                    .collect()
            })
            .collect();
        let costs: Vec<f64> = population
            .par_iter()
            .map(|s| {
                let c = objective(s);
                if c.is_nan() {
                    f64::INFINITY
                } else {
                    c
                }
            })
            .collect();
        let elites = elite_indices(&costs, settings.elites);
        (mean, std) = moments(&population, &elites);
    }
    mean.iter()
        .zip(bounds)
        .map(|(m, (lo, hi))| m.clamp(*lo, *hi))
        .collect()
}

/// Indices of the `count` lowest costs, ties broken by index.
pub fn elite_indices(costs: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..costs.len()).collect();
    idx.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
    idx.truncate(count.clamp(1, costs.len()));
    idx
}

fn moments(population: &[Vec<f64>], elites: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let dim = population[0].len();
    let n = elites.len() as f64;
    let mut mean = vec![0.0; dim];
    for &i in elites {
        for (m, v) in mean.iter_mut().zip(&population[i]) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for &i in elites {
        for ((s, v), m) in var.iter_mut().zip(&population[i]).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

/// Cost of an open-loop control sequence (flattened `horizon x control_dim`)
/// rolled out under `model`. Non-finite rollouts cost +inf.
pub fn sequence_cost<P: Predictor + ?Sized>(
    model: &P,
    state: &[f64],
    task: &ControlTask,
    seq: &[f64],
) -> f64 {
    let m = task.system.control_dim();
    let mut x = state.to_vec();
    let mut cost = 0.0;
    for u in seq.chunks(m) {
        x = model.predict(&x, u);
        cost += task.state_cost(&x) + task.control_cost(u);
        if !cost.is_finite() {
            return f64::INFINITY;
        }
    }
    cost
}

fn check_dims<P: Predictor + ?Sized>(model: &P, task: &ControlTask, state: &[f64]) -> Result<()> {
    let (n, m) = (task.system.state_dim(), task.system.control_dim());
    if model.state_dim() != n || model.control_dim() != m {
        return Err(Error::DimensionMismatch {
            expected: n + m,
            actual: model.state_dim() + model.control_dim(),
        });
    }
    if state.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: state.len(),
        });
    }
    Ok(())
}

/// First action of the CEM-optimized control sequence.
pub fn mpc_plan<P: Predictor + ?Sized>(
    model: &P,
    state: &[f64],
    task: &ControlTask,
    cfg: &MPCConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    check_dims(model, task, state)?;
    let m = task.system.control_dim();
    cfg.validate(m)?;
    let bounds: Vec<(f64, f64)> = (0..cfg.horizon)
        .flat_map(|_| task.system.control_bounds.iter().copied())
        .collect();
    let mean = bounds
        .iter()
        .map(|(lo, hi)| 0.0_f64.clamp(*lo, *hi))
        .collect();
    let std = (0..cfg.horizon)
        .flat_map(|_| cfg.control_noise_std.iter().copied())
        .collect();
    let settings = CemSettings {
        samples: cfg.samples,
        elites: cfg.elite_count(),
        iterations: cfg.cem_iterations,
    };
    let best = cem_minimize(
        |s| sequence_cost(model, state, task, s),
        &bounds,
        mean,
        std,
        &settings,
        seed,
    );
    Ok(best[..m].to_vec())
}

/// The simulator itself exposed as a model.
pub struct TrueModel<'a>(pub &'a SystemSpec);

impl Predictor for TrueModel<'_> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }

    fn control_dim(&self) -> usize {
        self.0.control_dim()
    }

    fn predict(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.0
            .step(x, u)
            .unwrap_or_else(|_| vec![f64::NAN; x.len()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlScore {
    pub score: f64,
    pub raw_cost: f64,
    pub episodes: usize,
    pub episode_costs: Vec<f64>,
    pub worst_ref: f64,
}

/// Closed-loop episode on the true simulator with `policy(state, step)`.
pub fn run_episode<F>(task: &ControlTask, mut policy: F) -> Result<f64>
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    let mut x = task.start_state.clone();
    let mut cost = 0.0;
    for t in 0..task.episode_length {
        let u = task.system.clamp_control(&policy(&x, t)?);
        x = task.system.step(&x, &u)?;
        cost += task.state_cost(&x) + task.control_cost(&u);
    }
    Ok(cost)
}

fn summarize_costs(task: &ControlTask, episode_costs: Vec<f64>) -> Result<ControlScore> {
    let worst_ref = task.zero_controller_cost()?;
    let raw_cost = episode_costs.iter().sum::<f64>() / episode_costs.len() as f64;
    Ok(ControlScore {
        score: task.score(raw_cost, worst_ref),
        raw_cost,
        episodes: episode_costs.len(),
        episode_costs,
        worst_ref,
    })
}

/// Runs MPC with `model` in closed loop on the true system. Episode `e` plans
/// step `t` with seed `derive(seed, [e, t])`.
pub fn evaluate_controller<P: Predictor + ?Sized>(
    model: &P,
    task: &ControlTask,
    cfg: &MPCConfig,
    episodes: usize,
    seed: u64,
) -> Result<ControlScore> {
    task.validate()?;
    check_dims(model, task, &task.start_state)?;
    cfg.validate(task.system.control_dim())?;
    if episodes < 1 {
        return Err(Error::InvalidArgument("need at least one episode".into()));
    }
    let costs = (0..episodes)
        .into_par_iter()
        .map(|e| {
            run_episode(task, |x, t| {
                mpc_plan(
                    model,
                    x,
                    task,
                    cfg,
                    rng::derive(seed, &[e as u64, t as u64]),
                )
            })
        })
        .collect::<Result<Vec<_>>>()?;
    summarize_costs(task, costs)
}

/// The zero-control baseline scored the same way.
pub fn evaluate_zero_controller(task: &ControlTask, episodes: usize) -> Result<ControlScore> {
    task.validate()?;
    if episodes < 1 {
        return Err(Error::InvalidArgument("need at least one episode".into()));
    }
    let m = task.system.control_dim();
    let cost = run_episode(task, |_, _| Ok(vec![0.0; m]))?;
    summarize_costs(task, vec![cost; episodes])
}

/// Optimizer space for the optional control-tuning stage. The noise scale is
/// a fraction of each control range.
pub fn mpc_config_space() -> ConfigurationSpace {
    use HyperparameterSpec as H;
    ConfigurationSpace::new(
        "mpc",
        vec![
            H::integer("horizon", 5, 40, false, 20),
            H::integer("samples", 20, 400, true, 200),
            H::continuous("elite_fraction", 0.02, 0.5, true, 0.1),
            H::integer("cem_iterations", 1, 8, false, 4),
            H::continuous("noise_scale", 0.05, 1.0, true, 0.25),
        ],
    )
    .expect("static space is valid")
}

pub fn mpc_config_from(config: &Configuration, system: &SystemSpec) -> Result<MPCConfig> {
    let int = |n: &str| {
        config
            .get(n)
            .and_then(Value::as_i64)
            .ok_or_else(|| Error::InvalidArgument(format!("mpc config lacks {n}")))
    };
    let real = |n: &str| {
        config
            .get(n)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::InvalidArgument(format!("mpc config lacks {n}")))
    };
    let scale = real("noise_scale")?;
    Ok(MPCConfig {
        horizon: int("horizon")? as usize,
        samples: int("samples")? as usize,
        elite_fraction: real("elite_fraction")?,
        cem_iterations: int("cem_iterations")? as usize,
        control_noise_std: system
            .control_bounds
            .iter()
            .map(|(lo, hi)| scale * (hi - lo))
            .collect(),
    })
}

/// BO over [`mpc_config_space`] with the episode cost as the objective, for a
/// fixed model. The tuner is reused unchanged.
pub fn tune_mpc<P: Predictor + ?Sized>(
    model: &P,
    task: &ControlTask,
    budget: usize,
    episodes: usize,
    seed: u64,
) -> Result<TuneResult> {
    let space = mpc_config_space();
    tuner::tune(
        &space,
        |c, s| {
            mpc_config_from(c, &task.system)
                .and_then(|cfg| evaluate_controller(model, task, &cfg, episodes, s))
                .map_or_else(
                    |_| ModelScore::failed(),
                    |r| ModelScore::from_rmse(r.raw_cost),
                )
        },
        budget,
        &[],
        seed,
    )
}

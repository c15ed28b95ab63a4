//! Bayesian optimization over a [`ConfigurationSpace`] with a pluggable
//! initial design.
//!
//! The loop evaluates the initial design verbatim and in order, then
//! alternates surrogate fitting and expected-improvement maximization until
//! the iteration budget is spent.

mod forest;
pub mod trace;

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::configspace::{Configuration, ConfigurationSpace};
use crate::error::{Error, Result};
use crate::rng;
use crate::sysid::ModelScore;

pub use forest::{Forest, ForestParams};

/// Random configurations used when no portfolio is supplied.
pub const RANDOM_INIT_SIZE: usize = 5;
pub const CANDIDATE_POOL: usize = 1000;
pub const INCUMBENT_NEIGHBORS: usize = 10;
/// Probability of proposing a uniformly random configuration instead.
pub const EXPLORATION_FLOOR: f64 = 0.1;
pub const VARIANCE_FLOOR: f64 = 1e-6;
const NEIGHBOR_STEP: f64 = 0.1;

/// Expected improvement for minimization.
pub fn expected_improvement(mean: f64, std: f64, best: f64) -> f64 {
    let gap = best - mean;
    if !(std > 1e-12) {
        return gap.max(0.0);
    }
    let z = gap / std;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (gap * normal.cdf(z) + std * normal.pdf(z)).max(0.0)
}

/// Forest fitted on encoded points and standardized scores.
#[derive(Clone, Debug)]
pub struct SurrogateState {
    pub points: Vec<Vec<f64>>,
    /// Standardized to zero mean and unit variance.
    pub scores: Vec<f64>,
    /// Raw (imputed) scores as given.
    pub raw_scores: Vec<f64>,
    forest: Forest,
}

impl SurrogateState {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Predictive mean and variance in standardized units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let (m, v) = self.forest.predict(x);
        (m, v + VARIANCE_FLOOR)
    }

    pub fn best(&self) -> f64 {
        self.scores.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn expected_improvement(&self, x: &[f64]) -> f64 {
        let (m, v) = self.predict(x);
        expected_improvement(m, v.sqrt(), self.best())
    }

    fn incumbent_point(&self) -> &[f64] {
        let mut best = 0;
        for (i, s) in self.raw_scores.iter().enumerate() {
            if *s < self.raw_scores[best] {
                best = i;
            }
        }
        &self.points[best]
    }
}

pub fn fit_surrogate(points: &[Vec<f64>], scores: &[f64], seed: u64) -> Result<SurrogateState> {
    fit_surrogate_with(points, scores, &ForestParams::default(), seed)
}

pub fn fit_surrogate_with(
    points: &[Vec<f64>],
    scores: &[f64],
    params: &ForestParams,
    seed: u64,
) -> Result<SurrogateState> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument(
            "surrogate needs at least 2 observations".into(),
        ));
    }
    if points.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            actual: scores.len(),
        });
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let sd = (scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n).sqrt();
    let sd = if sd > 1e-12 { sd } else { 1.0 };
    let normalized: Vec<f64> = scores.iter().map(|s| (s - mean) / sd).collect();
    let forest = Forest::fit(points, &normalized, params, seed)?;
    Ok(SurrogateState {
        points: points.to_vec(),
        scores: normalized,
        raw_scores: scores.to_vec(),
        forest,
    })
}

#[derive(Clone, Debug)]
pub struct Proposal {
    pub config: Configuration,
    /// Acquisition value of the proposal; `None` for random proposals.
    pub ei: Option<f64>,
    /// Scored candidate pool, empty for random proposals.
    pub pool: Vec<(Configuration, f64)>,
}

/// Next configuration to evaluate. Falls back to a random sample with fewer
/// than two observations, and with probability [`EXPLORATION_FLOOR`].
pub fn propose_next(
    space: &ConfigurationSpace,
    surrogate: Option<&SurrogateState>,
    seed: u64,
) -> Result<Configuration> {
    Ok(propose_with_pool(space, surrogate, seed)?.config)
}

pub fn propose_with_pool(
    space: &ConfigurationSpace,
    surrogate: Option<&SurrogateState>,
    seed: u64,
) -> Result<Proposal> {
    let mut r = rng::rng(seed);
    let random = |r: &mut rand_chacha::ChaCha8Rng| Proposal {
        config: space.sample_with(r),
        ei: None,
        pool: Vec::new(),
    };
    let Some(surrogate) = surrogate.filter(|s| s.len() >= 2) else {
        return Ok(random(&mut r));
    };
    if r.gen::<f64>() < EXPLORATION_FLOOR {
        return Ok(random(&mut r));
    }
    let incumbent = space.decode(surrogate.incumbent_point())?;
    let mut candidates: Vec<Configuration> = (0..CANDIDATE_POOL)
        .map(|_| space.sample_with(&mut r))
        .collect();
    for _ in 0..INCUMBENT_NEIGHBORS {
        candidates.push(space.neighbor(&incumbent, NEIGHBOR_STEP, &mut r)?);
    }
    let mut pool = Vec::with_capacity(candidates.len());
    for c in candidates {
        let x = space.encode(&c)?;
        if surrogate.points.iter().any(|p| *p == x) {
            continue;
        }
        let ei = surrogate.expected_improvement(&x);
        pool.push((c, ei));
    }
    if pool.is_empty() {
        return Ok(random(&mut r));
    }
    let mut best = 0;
    for (i, (_, ei)) in pool.iter().enumerate() {
        if *ei > pool[best].1 {
            best = i;
        }
    }
    Ok(Proposal {
        config: pool[best].0.clone(),
        ei: Some(pool[best].1),
        pool,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialDesign {
    Random,
    Portfolio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub config: Configuration,
    pub score: ModelScore,
    pub wallclock: f64,
    /// Best finite score after this iteration; `None` while every evaluation
    /// so far has failed.
    pub incumbent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningTrace {
    pub entries: Vec<TraceEntry>,
    pub seed: u64,
    pub initial_design_kind: InitialDesign,
    pub budget_iterations: usize,
    #[serde(default)]
    pub dataset_id: String,
    #[serde(default)]
    pub method: String,
}

impl TuningTrace {
    /// Incumbent score after `iterations` evaluations.
    pub fn incumbent_after(&self, iterations: usize) -> Option<f64> {
        iterations
            .checked_sub(1)
            .and_then(|i| self.entries.get(i))
            .and_then(|e| e.incumbent)
    }

    pub fn final_incumbent(&self) -> Option<f64> {
        self.entries.last().and_then(|e| e.incumbent)
    }

    /// Configuration with the lowest finite score; earliest wins ties.
    pub fn incumbent(&self) -> Option<&TraceEntry> {
        let mut best: Option<&TraceEntry> = None;
        for e in &self.entries {
            if let Some(s) = e.score.rmse {
                if best.map_or(true, |b| s < b.score.rmse.expect("finite")) {
                    best = Some(e);
                }
            }
        }
        best
    }

    pub fn canonicalize(&mut self) {
        self.entries.iter_mut().for_each(|e| e.wallclock = 0.0);
    }
}

#[derive(Clone, Debug)]
pub struct TuneResult {
    /// `None` when every evaluation failed.
    pub incumbent: Option<Configuration>,
    pub incumbent_score: ModelScore,
    pub trace: TuningTrace,
}

/// Failed scores become twice the worst finite score so far so that the
/// surrogate never sees a non-finite value.
pub fn impute_failures(scores: &[Option<f64>]) -> Vec<f64> {
    let worst = scores
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let fill = if worst.is_finite() { 2.0 * worst } else { 1.0 };
    scores.iter().map(|s| s.unwrap_or(fill)).collect()
}

/// Default random initial design for a tuning seed.
pub fn random_initial_design(
    space: &ConfigurationSpace,
    seed: u64,
    count: usize,
) -> Vec<Configuration> {
    (0..count)
        .map(|i| space.sample(rng::derive(seed, &[0, i as u64])))
        .collect()
}

/// Runs BO for `budget` objective calls. An empty `initial` selects the
/// random initial design. The objective always receives `seed`.
pub fn tune<F>(
    space: &ConfigurationSpace,
    objective: F,
    budget: usize,
    initial: &[Configuration],
    seed: u64,
) -> Result<TuneResult>
where
    F: FnMut(&Configuration, u64) -> ModelScore,
{
    tune_observed(space, objective, budget, initial, seed, |_| {})
}

pub fn tune_observed<F, O>(
    space: &ConfigurationSpace,
    mut objective: F,
    budget: usize,
    initial: &[Configuration],
    seed: u64,
    mut on_entry: O,
) -> Result<TuneResult>
where
    F: FnMut(&Configuration, u64) -> ModelScore,
    O: FnMut(&TraceEntry),
{
    if budget < initial.len() {
        return Err(Error::InvalidArgument(format!(
            "budget {budget} is smaller than the initial design ({})",
            initial.len()
        )));
    }
    for c in initial {
        space.check(c)?;
    }
    let (design, kind) = if initial.is_empty() {
        (
            random_initial_design(space, seed, RANDOM_INIT_SIZE.min(budget)),
            InitialDesign::Random,
        )
    } else {
        (initial.to_vec(), InitialDesign::Portfolio)
    };

    let mut points: Vec<Vec<f64>> = Vec::with_capacity(budget);
    let mut raw: Vec<Option<f64>> = Vec::with_capacity(budget);
    let mut entries: Vec<TraceEntry> = Vec::with_capacity(budget);
    let mut best: Option<(usize, f64)> = None;
    for it in 0..budget {
        let config = match design.get(it) {
            Some(c) => c.clone(),
            None => {
                let surrogate = if points.len() >= 2 {
                    Some(fit_surrogate(
                        &points,
                        &impute_failures(&raw),
                        rng::derive(seed, &[1, it as u64]),
                    )?)
                } else {
                    None
                };
                propose_next(
                    space,
                    surrogate.as_ref(),
                    rng::derive(seed, &[2, it as u64]),
                )?
            }
        };
        let started = Instant::now();
        let score = objective(&config, seed);
        let wallclock = started.elapsed().as_secs_f64();
        if let Some(s) = score.rmse {
            if best.map_or(true, |(_, b)| s < b) {
                best = Some((it, s));
            }
        }
        points.push(space.encode(&config)?);
        raw.push(score.rmse);
        let entry = TraceEntry {
            iteration: it,
            config,
            score,
            wallclock,
            incumbent: best.map(|(_, s)| s),
        };
        on_entry(&entry);
        entries.push(entry);
    }
    let (incumbent, incumbent_score) = match best {
        Some((i, _)) => (Some(entries[i].config.clone()), entries[i].score.clone()),
        None => (None, ModelScore::failed()),
    };
    Ok(TuneResult {
        incumbent,
        incumbent_score,
        trace: TuningTrace {
            entries,
            seed,
            initial_design_kind: kind,
            budget_iterations: budget,
            dataset_id: String::new(),
            method: String::new(),
        },
    })
}

/// Baseline that evaluates `budget` independent random configurations.
pub fn random_search<F>(
    space: &ConfigurationSpace,
    mut objective: F,
    budget: usize,
    seed: u64,
) -> Result<TuneResult>
where
    F: FnMut(&Configuration, u64) -> ModelScore,
{
    let design = random_initial_design(space, rng::derive(seed, &[99]), budget);
    let mut result = tune(space, &mut objective, budget, &design, seed)?;
    result.trace.initial_design_kind = InitialDesign::Random;
    Ok(result)
}

//! One-step dynamics models, the one-step RMSE model score and its K-fold
//! cross-validated estimate.
//!
//! Every model class regresses the normalized state difference `x_{t+1} - x_t`
//! on normalized `(x_t, u_t)` and adds the prediction back onto `x_t`.

mod knn;
mod mlp;
mod ridge;

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::configspace::{Configuration, ConfigurationSpace, HyperparameterSpec, Value};
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::rng;

pub use knn::Weighting;
pub use mlp::{Layer, Network};
pub use ridge::Monomials;

pub const MODEL_CLASS: &str = "model_class";
pub const DEFAULT_FOLDS: usize = 3;
/// Per-evaluation wallclock cap used by the desk-scale pipeline.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
/// Seed for every stochastic step inside model training.
pub const TRAINING_SEED: u64 = 0;

/// The shipped system-identification search space.
pub fn model_config_space() -> ConfigurationSpace {
    use HyperparameterSpec as H;
    ConfigurationSpace::new(
        "sysid",
        vec![
            H::categorical(
                MODEL_CLASS,
                &["linear", "poly_ridge", "knn", "mlp"],
                "linear",
            ),
            H::continuous("linear:ridge_lambda", 1e-8, 1.0, true, 1e-4)
                .when(MODEL_CLASS, &["linear"]),
            H::integer("poly_ridge:degree", 2, 4, false, 2).when(MODEL_CLASS, &["poly_ridge"]),
            H::continuous("poly_ridge:ridge_lambda", 1e-6, 10.0, true, 1e-3)
                .when(MODEL_CLASS, &["poly_ridge"]),
            H::integer("knn:k", 1, 25, false, 5).when(MODEL_CLASS, &["knn"]),
            H::categorical("knn:weighting", &["uniform", "inverse_distance"], "uniform")
                .when(MODEL_CLASS, &["knn"]),
            H::integer("mlp:hidden_units", 8, 128, true, 32).when(MODEL_CLASS, &["mlp"]),
            H::integer("mlp:layers", 1, 2, false, 2).when(MODEL_CLASS, &["mlp"]),
            H::continuous("mlp:learning_rate", 1e-4, 0.1, true, 1e-2).when(MODEL_CLASS, &["mlp"]),
            H::integer("mlp:epochs", 10, 200, true, 100).when(MODEL_CLASS, &["mlp"]),
        ],
    )
    .expect("static space is valid")
}

/// Optional wallclock limit checked inside long-running loops.
#[derive(Clone, Copy, Debug, Default)]
pub struct Deadline(Option<Instant>);

impl Deadline {
    pub fn none() -> Self {
        Self(None)
    }

    pub fn after(budget: Duration) -> Self {
        Self(Some(Instant::now() + budget))
    }

    pub fn expired(&self) -> bool {
        self.0.is_some_and(|d| Instant::now() >= d)
    }

    pub fn check(&self) -> Result<()> {
        if self.expired() {
            Err(Error::Timeout)
        } else {
            Ok(())
        }
    }
}

/// Per-dimension affine normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    fn fit<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> Self {
        let mut count = 0usize;
        let mut mean = vec![0.0; dim];
        for r in rows.clone() {
            count += 1;
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > 1e-12 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        for (((o, x), m), s) in out.iter_mut().zip(v).zip(&self.mean).zip(&self.std) {
            *o = (x - m) / s;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum Learned {
    /// Linear is the degree-1 case. Weights are `features x state_dim`.
    Ridge {
        degree: usize,
        weights: Vec<Vec<f64>>,
    },
    Knn {
        k: usize,
        weighting: Weighting,
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
    },
    Mlp {
        network: Network,
    },
}

/// Anything that maps `(x_t, u_t)` to a predicted `x_{t+1}`.
pub trait Predictor: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn predict(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsModel {
    pub config: Configuration,
    pub state_dim: usize,
    pub control_dim: usize,
    pub input_norm: Normalization,
    pub output_norm: Normalization,
    pub learned: Learned,
    #[serde(skip)]
    cache: Option<Box<Cache>>,
}

#[derive(Clone, Debug, PartialEq)]
struct Cache {
    monomials: Option<Monomials>,
    knn_flat: Vec<f64>,
}

impl PartialEq for Monomials {
    fn eq(&self, other: &Self) -> bool {
        self.width() == other.width()
    }
}

impl Predictor for DynamicsModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn control_dim(&self) -> usize {
        self.control_dim
    }

    fn predict(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let input_dim = self.state_dim + self.control_dim;
        let mut raw = Vec::with_capacity(input_dim);
        raw.extend_from_slice(x);
        raw.extend_from_slice(u);
        let mut z = vec![0.0; input_dim];
        self.input_norm.apply(&raw, &mut z);
        let mut dz = vec![0.0; self.state_dim];
        let cache = self.cache.as_deref();
        match &self.learned {
            Learned::Ridge { degree, weights } => {
                let local;
                let mono = match cache.and_then(|c| c.monomials.as_ref()) {
                    Some(m) => m,
                    None => {
                        local = Monomials::new(input_dim, *degree);
                        &local
                    }
                };
                let mut feats = Vec::with_capacity(mono.width());
                mono.expand_into(&z, &mut feats);
                ridge::predict(weights, &feats, &mut dz);
            }
            Learned::Knn {
                k,
                weighting,
                inputs,
                targets,
            } => {
                let local;
                let flat = match cache {
                    Some(c) => &c.knn_flat,
                    None => {
                        local = inputs.concat();
                        &local
                    }
                };
                knn::predict(flat, targets, input_dim, *k, *weighting, &z, &mut dz);
            }
            Learned::Mlp { network } => dz = network.forward(&z),
        }
        x.iter()
            .zip(&dz)
            .zip(self.output_norm.mean.iter().zip(&self.output_norm.std))
            .map(|((xi, d), (m, s))| xi + d * s + m)
            .collect()
    }
}

impl DynamicsModel {
    /// Rebuilds derived lookup structures; call after deserializing.
    pub fn prepare(mut self) -> Self {
        let input_dim = self.state_dim + self.control_dim;
        let cache = match &self.learned {
            Learned::Ridge { degree, .. } => Cache {
                monomials: Some(Monomials::new(input_dim, *degree)),
                knn_flat: Vec::new(),
            },
            Learned::Knn { inputs, .. } => Cache {
                monomials: None,
                knn_flat: inputs.concat(),
            },
            Learned::Mlp { .. } => Cache {
                monomials: None,
                knn_flat: Vec::new(),
            },
        };
        self.cache = Some(Box::new(cache));
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: DynamicsModel = serde_json::from_str(text)?;
        Ok(model.prepare())
    }

    /// An MLP with the configured architecture and its initial random weights,
    /// never trained. Used as a deliberately poor model baseline.
    pub fn random_init_mlp(
        hidden_units: usize,
        layers: usize,
        data: &[Trajectory],
    ) -> Result<Self> {
        let mut values = std::collections::BTreeMap::new();
        values.insert(MODEL_CLASS.to_string(), Value::Cat("mlp".into()));
        values.insert("mlp:hidden_units".into(), Value::Int(hidden_units as i64));
        values.insert("mlp:layers".into(), Value::Int(layers as i64));
        values.insert("mlp:learning_rate".into(), Value::Real(1e-3));
        values.insert("mlp:epochs".into(), Value::Int(10));
        let config = Configuration {
            space_name: "sysid".into(),
            values,
        };
        train_inner(&config, data, &Deadline::none(), Some(0))
    }
}

struct TrainingSet {
    state_dim: usize,
    control_dim: usize,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

fn collect_pairs(data: &[Trajectory]) -> Result<TrainingSet> {
    let first = data
        .iter()
        .find(|t| !t.is_empty())
        .ok_or_else(|| Error::Empty("no transitions to train on".into()))?;
    let (n, m) = (first.states[0].len(), first.controls[0].len());
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for t in data {
        for (x, u, next) in t.transitions() {
            if x.len() != n || u.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: n + m,
                    actual: x.len() + u.len(),
                });
            }
            inputs.push(x.iter().chain(u).copied().collect());
            targets.push(next.iter().zip(x).map(|(a, b)| a - b).collect());
        }
    }
    Ok(TrainingSet {
        state_dim: n,
        control_dim: m,
        inputs,
        targets,
    })
}

fn int_param(config: &Configuration, name: &str) -> Result<i64> {
    config
        .get(name)
        .and_then(Value::as_i64)
        .ok_or_else(|| Error::InvalidArgument(format!("missing integer {name}")))
}

fn real_param(config: &Configuration, name: &str) -> Result<f64> {
    config
        .get(name)
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::InvalidArgument(format!("missing real {name}")))
}

/// Fits the configured model class on every transition of `data`.
pub fn train(config: &Configuration, data: &[Trajectory]) -> Result<DynamicsModel> {
    train_with_deadline(config, data, &Deadline::none())
}

pub fn train_with_deadline(
    config: &Configuration,
    data: &[Trajectory],
    deadline: &Deadline,
) -> Result<DynamicsModel> {
    model_config_space().check(config)?;
    if data.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 2 trajectories, got {}",
            data.len()
        )));
    }
    train_inner(config, data, deadline, None)
}

fn train_inner(
    config: &Configuration,
    data: &[Trajectory],
    deadline: &Deadline,
    epochs_override: Option<usize>,
) -> Result<DynamicsModel> {
    let set = collect_pairs(data)?;
    let (n, m) = (set.state_dim, set.control_dim);
    let input_norm = Normalization::fit(set.inputs.iter().map(Vec::as_slice), n + m);
    let output_norm = Normalization::fit(set.targets.iter().map(Vec::as_slice), n);
    let z_in: Vec<Vec<f64>> = set
        .inputs
        .iter()
        .map(|r| {
            let mut z = vec![0.0; n + m];
            input_norm.apply(r, &mut z);
            z
        })
        .collect();
    let z_out: Vec<Vec<f64>> = set
        .targets
        .iter()
        .map(|r| {
            let mut z = vec![0.0; n];
            output_norm.apply(r, &mut z);
            z
        })
        .collect();
    deadline.check()?;

    let class = config
        .get(MODEL_CLASS)
        .and_then(Value::as_str)
        .ok_or_else(|| Error::InvalidArgument("missing model_class".into()))?;
    let learned = match class {
        "linear" | "poly_ridge" => {
            let (degree, lambda) = if class == "linear" {
                (1, real_param(config, "linear:ridge_lambda")?)
            } else {
                (
                    int_param(config, "poly_ridge:degree")? as usize,
                    real_param(config, "poly_ridge:ridge_lambda")?,
                )
            };
            let mono = Monomials::new(n + m, degree);
            let mut phi = DMatrix::zeros(z_in.len(), mono.width());
            let mut feats = Vec::with_capacity(mono.width());
            for (i, z) in z_in.iter().enumerate() {
                mono.expand_into(z, &mut feats);
                for (j, f) in feats.iter().enumerate() {
                    phi[(i, j)] = *f;
                }
            }
            let y = DMatrix::from_fn(z_out.len(), n, |i, j| z_out[i][j]);
            deadline.check()?;
            let w = ridge::solve(&phi, &y, lambda)?;
            Learned::Ridge {
                degree,
                weights: ridge::weights_to_rows(&w),
            }
        }
        "knn" => Learned::Knn {
            k: int_param(config, "knn:k")? as usize,
            weighting: config
                .get("knn:weighting")
                .and_then(Value::as_str)
                .and_then(Weighting::parse)
                .ok_or_else(|| Error::InvalidArgument("missing knn:weighting".into()))?,
            inputs: z_in,
            targets: z_out,
        },
        "mlp" => {
            let hidden = int_param(config, "mlp:hidden_units")? as usize;
            let layers = int_param(config, "mlp:layers")? as usize;
            let lr = real_param(config, "mlp:learning_rate")?;
            let epochs = match epochs_override {
                Some(e) => e,
                None => int_param(config, "mlp:epochs")? as usize,
            };
            let mut sizes = vec![n + m];
            sizes.extend(std::iter::repeat(hidden).take(layers));
            sizes.push(n);
            let mut network = Network::init(&sizes, TRAINING_SEED);
            let x = DMatrix::from_fn(z_in.len(), n + m, |i, j| z_in[i][j]);
            let y = DMatrix::from_fn(z_out.len(), n, |i, j| z_out[i][j]);
            network.train(&x, &y, lr, epochs, deadline)?;
            Learned::Mlp { network }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown model class {other}"
            )))
        }
    };
    Ok(DynamicsModel {
        config: config.clone(),
        state_dim: n,
        control_dim: m,
        input_norm,
        output_norm,
        learned,
        cache: None,
    }
    .prepare())
}

/// One-step prediction error. `rmse` is `None` for the failed sentinel
/// (timeout, crash, or a non-finite error).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_fold: Vec<f64>,
    pub n_points: usize,
}

impl ModelScore {
    pub fn from_rmse(rmse: f64) -> Self {
        Self {
            rmse: rmse.is_finite().then_some(rmse),
            per_fold: Vec::new(),
            n_points: 0,
        }
    }

    pub fn failed() -> Self {
        Self {
            rmse: None,
            per_fold: Vec::new(),
            n_points: 0,
        }
    }

    pub fn is_failed(&self) -> bool {
        self.rmse.is_none()
    }
}

/// Root mean squared one-step error pooled over every transition and state
/// dimension of `data`.
pub fn score<P: Predictor + ?Sized>(model: &P, data: &[Trajectory]) -> Result<ModelScore> {
    score_with_deadline(model, data, &Deadline::none())
}

fn score_with_deadline<P: Predictor + ?Sized>(
    model: &P,
    data: &[Trajectory],
    deadline: &Deadline,
) -> Result<ModelScore> {
    let (n, m) = (model.state_dim(), model.control_dim());
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for t in data {
        deadline.check()?;
        for (x, u, next) in t.transitions() {
            if x.len() != n || u.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: n + m,
                    actual: x.len() + u.len(),
                });
            }
            let pred = model.predict(x, u);
            sum += pred
                .iter()
                .zip(next)
                .map(|(p, y)| (p - y) * (p - y))
                .sum::<f64>();
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::Empty("no transitions to score".into()));
    }
    let rmse = (sum / (pairs * n) as f64).sqrt();
    Ok(ModelScore {
        rmse: rmse.is_finite().then_some(rmse),
        per_fold: Vec::new(),
        n_points: pairs,
    })
}

/// Trajectory indices of each fold after a seeded shuffle; position `p` of the
/// shuffled order lands in fold `p % k`.
pub fn fold_assignment(n_traj: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_traj).collect();
    order.shuffle(&mut rng::rng(seed));
    let mut folds = vec![Vec::new(); k];
    for (p, idx) in order.into_iter().enumerate() {
        folds[p % k].push(idx);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    folds
}

/// K-fold cross-validated model score over whole trajectories.
pub fn cv_score(
    config: &Configuration,
    data: &[Trajectory],
    k: usize,
    seed: u64,
) -> Result<ModelScore> {
    cv_score_with_deadline(config, data, k, seed, &Deadline::none())
}

pub fn cv_score_with_deadline(
    config: &Configuration,
    data: &[Trajectory],
    k: usize,
    seed: u64,
    deadline: &Deadline,
) -> Result<ModelScore> {
    if k < 2 {
        return Err(Error::InvalidArgument("need at least 2 folds".into()));
    }
    if data.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} trajectories cannot fill {k} folds",
            data.len()
        )));
    }
    let folds = fold_assignment(data.len(), k, seed);
    let results = folds
        .par_iter()
        .enumerate()
        .map(|(f, held)| {
            let train_set: Vec<Trajectory> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, idx)| idx.iter())
                .copied()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .map(|i| data[i].clone())
                .collect();
            let test_set: Vec<Trajectory> = held.iter().map(|&i| data[i].clone()).collect();
            let model = train_with_deadline(config, &train_set, deadline)?;
            score_with_deadline(&model, &test_set, deadline)
        })
        .collect::<Result<Vec<_>>>()?;
    let n_points = results.iter().map(|r| r.n_points).sum();
    let per_fold: Option<Vec<f64>> = results.iter().map(|r| r.rmse).collect();
    Ok(match per_fold {
        Some(per_fold) => ModelScore {
            rmse: Some(per_fold.iter().sum::<f64>() / k as f64),
            per_fold,
            n_points,
        },
        None => ModelScore {
            rmse: None,
            per_fold: Vec::new(),
            n_points,
        },
    })
}

/// `cv_score` under a wallclock budget. Timeouts, training failures and
/// non-finite errors all yield the failed sentinel.
pub fn evaluate_with_timeout(
    config: &Configuration,
    data: &[Trajectory],
    k: usize,
    seed: u64,
    budget: Duration,
) -> ModelScore {
    let deadline = Deadline::after(budget);
    match cv_score_with_deadline(config, data, k, seed, &deadline) {
        Ok(s) if !deadline.expired() => s,
        Ok(s) => ModelScore {
            rmse: None,
            per_fold: Vec::new(),
            n_points: s.n_points,
        },
        Err(e) => {
            log::debug!("evaluation of {config} failed: {e}");
            ModelScore::failed()
        }
    }
}

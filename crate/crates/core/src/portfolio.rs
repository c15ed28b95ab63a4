//! Greedy portfolio construction from meta datasets.
//!
//! Tune each meta dataset independently and keep the incumbents as
//! candidates, score every candidate on every meta dataset, normalize each
//! dataset's row to [0, 1], then greedily pick the configurations that
//! minimize the mean over datasets of the best score within the portfolio.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::configspace::Configuration;
use crate::dynamics::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::sysid::{self, ModelScore};
use crate::tuner::{self, TuneResult};

/// Sizes swept by the size study; 10 is the default.
pub const PORTFOLIO_SIZES: [usize; 4] = [5, 10, 15, 20];
pub const DEFAULT_PORTFOLIO_SIZE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: Configuration,
    /// Meta dataset ids whose tuning produced this configuration.
    pub provenance: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl CandidateSet {
    /// Collects per-dataset incumbents, merging identical configurations.
    /// A dataset without an incumbent contributes a warning instead.
    pub fn from_incumbents<I>(incumbents: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Option<Configuration>)>,
    {
        let mut set = CandidateSet::default();
        for (id, config) in incumbents {
            let Some(config) = config else {
                let msg = format!("every evaluation failed on {id}; no candidate harvested");
                log::warn!("{msg}");
                set.warnings.push(msg);
                continue;
            };
            match set
                .candidates
                .iter_mut()
                .find(|c| c.config.values == config.values)
            {
                Some(existing) => existing.provenance.push(id),
                None => set.candidates.push(Candidate {
                    config,
                    provenance: vec![id],
                }),
            }
        }
        if set.candidates.is_empty() {
            return Err(Error::Empty("no candidate configurations".into()));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Settings shared by harvesting and matrix construction.
#[derive(Clone, Copy, Debug)]
pub struct EvalSettings {
    pub folds: usize,
    pub seed: u64,
    pub timeout: Duration,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            folds: sysid::DEFAULT_FOLDS,
            seed: 0,
            timeout: sysid::DEFAULT_TIMEOUT,
        }
    }
}

/// Tunes every meta dataset with the random initial design and returns the
/// per-dataset runs. Dataset `i` tunes with seed `derive(seed, [i])`.
pub fn harvest_runs(
    meta: &[Dataset],
    budget: usize,
    settings: &EvalSettings,
) -> Result<Vec<TuneResult>> {
    if meta.is_empty() {
        return Err(Error::Empty("no meta datasets".into()));
    }
    let space = sysid::model_config_space();
    meta.par_iter()
        .enumerate()
        .map(|(i, ds)| {
            let seed = rng::derive(settings.seed, &[i as u64]);
            let mut r = tuner::tune(
                &space,
                |c, s| {
                    sysid::evaluate_with_timeout(c, ds.train(), settings.folds, s, settings.timeout)
                },
                budget,
                &[],
                seed,
            )?;
            r.trace.dataset_id = ds.id.clone();
            r.trace.method = "pure_bo".into();
            Ok(r)
        })
        .collect()
}

pub fn harvest(meta: &[Dataset], budget: usize, settings: &EvalSettings) -> Result<CandidateSet> {
    let runs = harvest_runs(meta, budget, settings)?;
    CandidateSet::from_incumbents(
        meta.iter()
            .zip(runs)
            .map(|(ds, r)| (ds.id.clone(), r.incumbent)),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMatrix {
    pub dataset_ids: Vec<String>,
    pub config_ids: Vec<String>,
    pub configs: Vec<Configuration>,
    pub provenance: Vec<Vec<String>>,
    /// `datasets x configs`, finite after imputation.
    pub scores: Vec<Vec<f64>>,
    /// Marks entries whose evaluation failed and were imputed.
    pub imputed: Vec<Vec<bool>>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl PerformanceMatrix {
    pub fn n_datasets(&self) -> usize {
        self.scores.len()
    }

    pub fn n_configs(&self) -> usize {
        self.configs.len()
    }

    /// Hex SHA-256 of the canonical JSON document.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("matrix serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Builds a matrix directly from raw cells (`None` = failed), applying
    /// the imputation policy.
    pub fn from_cells(
        dataset_ids: Vec<String>,
        candidates: &CandidateSet,
        cells: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        let mut out = PerformanceMatrix {
            dataset_ids: Vec::new(),
            config_ids: (0..candidates.len()).map(|j| format!("c{j}")).collect(),
            configs: candidates
                .candidates
                .iter()
                .map(|c| c.config.clone())
                .collect(),
            provenance: candidates
                .candidates
                .iter()
                .map(|c| c.provenance.clone())
                .collect(),
            scores: Vec::new(),
            imputed: Vec::new(),
            warnings: Vec::new(),
        };
        for (id, row) in dataset_ids.into_iter().zip(cells) {
            let worst = row
                .iter()
                .flatten()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            if !worst.is_finite() {
                let msg = format!("every candidate failed on {id}; row dropped");
                log::warn!("{msg}");
                out.warnings.push(msg);
                continue;
            }
            out.imputed.push(row.iter().map(Option::is_none).collect());
            out.scores
                .push(row.iter().map(|s| s.unwrap_or(2.0 * worst)).collect());
            out.dataset_ids.push(id);
        }
        if out.scores.is_empty() {
            return Err(Error::Empty("performance matrix has no usable rows".into()));
        }
        Ok(out)
    }
}

/// Evaluates every `(dataset, candidate)` cell with `eval`. Cells run in
/// parallel; the assembled matrix does not depend on scheduling.
pub fn build_matrix_with<F>(
    candidates: &CandidateSet,
    dataset_ids: &[String],
    eval: F,
) -> Result<PerformanceMatrix>
where
    F: Fn(&Configuration, usize) -> ModelScore + Sync,
{
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set is empty".into()));
    }
    let n_cfg = candidates.len();
    let flat: Vec<Option<f64>> = (0..dataset_ids.len() * n_cfg)
        .into_par_iter()
        .map(|cell| eval(&candidates.candidates[cell % n_cfg].config, cell / n_cfg).rmse)
        .collect();
    let cells = flat.chunks(n_cfg).map(<[_]>::to_vec).collect();
    PerformanceMatrix::from_cells(dataset_ids.to_vec(), candidates, cells)
}

/// Cell `(i, j)` is the cross-validated score of candidate `j` on the
/// training split of meta dataset `i`.
pub fn build_matrix(
    candidates: &CandidateSet,
    meta: &[Dataset],
    settings: &EvalSettings,
) -> Result<PerformanceMatrix> {
    let ids: Vec<String> = meta.iter().map(|d| d.id.clone()).collect();
    build_matrix_with(candidates, &ids, |c, i| {
        sysid::evaluate_with_timeout(
            c,
            meta[i].train(),
            settings.folds,
            settings.seed,
            settings.timeout,
        )
    })
}

/// Min-max scales each row to [0, 1]; constant rows become all zeros.
pub fn normalize_rows(m: &PerformanceMatrix) -> PerformanceMatrix {
    let mut out = m.clone();
    for row in &mut out.scores {
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        for v in row.iter_mut() {
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
    }
    out
}

/// Mean over rows of the minimum over `columns`.
pub fn coverage(scores: &[Vec<f64>], columns: &[usize]) -> f64 {
    scores
        .iter()
        .map(|row| {
            columns
                .iter()
                .map(|&j| row[j])
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / scores.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    pub requested_size: usize,
    pub configs: Vec<Configuration>,
    pub config_ids: Vec<String>,
    pub provenance: Vec<Vec<String>>,
    /// Coverage objective after each addition.
    pub selection_trace: Vec<f64>,
    pub matrix_hash: String,
}

impl Portfolio {
    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Greedy column selection on a row-normalized matrix. Each step adds the
/// column that minimizes the coverage objective; ties go to the lowest index.
pub fn greedy_columns(scores: &[Vec<f64>], p: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if p < 1 {
        return Err(Error::InvalidArgument(
            "portfolio size must be at least 1".into(),
        ));
    }
    let n_cols = scores.first().map_or(0, Vec::len);
    let mut chosen: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    // Running per-row minimum over the chosen columns.
    let mut best_so_far = vec![f64::INFINITY; scores.len()];
    while chosen.len() < p.min(n_cols) {
        let mut pick: Option<(usize, f64)> = None;
        for j in (0..n_cols).filter(|j| !chosen.contains(j)) {
            let phi = scores
                .iter()
                .zip(&best_so_far)
                .map(|(row, b)| row[j].min(*b))
                .sum::<f64>()
                / scores.len() as f64;
            if pick.map_or(true, |(_, v)| phi < v) {
                pick = Some((j, phi));
            }
        }
        let (j, phi) = pick.expect("an unchosen column remains");
        chosen.push(j);
        trace.push(phi);
        for (b, row) in best_so_far.iter_mut().zip(scores) {
            *b = b.min(row[j]);
        }
    }
    Ok((chosen, trace))
}

/// Portfolio of `min(p, |C|)` configurations from a row-normalized matrix.
pub fn greedy_select(normalized: &PerformanceMatrix, p: usize) -> Result<Portfolio> {
    greedy_select_with_hash(normalized, p, normalized.hash())
}

pub fn greedy_select_with_hash(
    normalized: &PerformanceMatrix,
    p: usize,
    matrix_hash: String,
) -> Result<Portfolio> {
    let (cols, selection_trace) = greedy_columns(&normalized.scores, p)?;
    Ok(Portfolio {
        requested_size: p,
        configs: cols
            .iter()
            .map(|&j| normalized.configs[j].clone())
            .collect(),
        config_ids: cols
            .iter()
            .map(|&j| normalized.config_ids[j].clone())
            .collect(),
        provenance: cols
            .iter()
            .map(|&j| normalized.provenance[j].clone())
            .collect(),
        selection_trace,
        matrix_hash,
    })
}

/// Builds a portfolio from a raw matrix, recording the raw matrix's hash.
pub fn portfolio_from_matrix(raw: &PerformanceMatrix, p: usize) -> Result<Portfolio> {
    greedy_select_with_hash(&normalize_rows(raw), p, raw.hash())
}

/// The portfolio's configurations in selection order.
pub fn portfolio_to_initial_design(p: &Portfolio) -> Vec<Configuration> {
    p.configs.clone()
}

/// Provenance counts per meta dataset, for reporting.
pub fn provenance_counts(p: &Portfolio) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for ids in &p.provenance {
        for id in ids {
            *out.entry(id.clone()).or_insert(0) += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::configspace::Value;

    fn cfg(k: i64) -> Configuration {
        let mut values = BTreeMap::new();
        values.insert("model_class".to_string(), Value::Cat("knn".into()));
        values.insert("knn:k".to_string(), Value::Int(k));
        values.insert("knn:weighting".to_string(), Value::Cat("uniform".into()));
        Configuration {
            space_name: "sysid".into(),
            values,
        }
    }

    fn candidates(n: usize) -> CandidateSet {
        CandidateSet::from_incumbents((0..n).map(|j| (format!("d{j}"), Some(cfg(j as i64 + 1)))))
            .unwrap()
    }

    fn matrix(scores: Vec<Vec<f64>>) -> PerformanceMatrix {
        let n = scores[0].len();
        let ids = (0..scores.len()).map(|i| format!("d{i}")).collect();
        let cells = scores
            .into_iter()
            .map(|r| r.into_iter().map(Some).collect())
            .collect();
        PerformanceMatrix::from_cells(ids, &candidates(n), cells).unwrap()
    }

    #[test]
    fn dedup_merges_provenance() {
        let set = CandidateSet::from_incumbents(vec![
            ("a".to_string(), Some(cfg(3))),
            ("b".to_string(), Some(cfg(3))),
            ("c".to_string(), Some(cfg(4))),
            ("d".to_string(), None),
        ])
        .unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.candidates[0].provenance, vec!["a", "b"]);
        assert_eq!(set.warnings.len(), 1);
        assert!(CandidateSet::from_incumbents(vec![("x".to_string(), None)]).is_err());
    }

    #[test]
    fn normalization() {
        let m = matrix(vec![vec![2.0, 4.0, 6.0], vec![3.0, 3.0, 3.0]]);
        let n = normalize_rows(&m);
        assert_eq!(n.scores[0], vec![0.0, 0.5, 1.0]);
        assert_eq!(n.scores[1], vec![0.0, 0.0, 0.0]);
        assert_eq!(normalize_rows(&n).scores, n.scores);
    }

    #[test]
    fn disparate_scales_need_normalization() {
        // Two datasets whose raw errors differ by three orders of magnitude.
        let m = matrix(vec![vec![12.9722, 13.5], vec![0.0101, 0.0050]]);
        let raw = greedy_columns(&m.scores, 1).unwrap().0;
        let norm = greedy_columns(&normalize_rows(&m).scores, 1).unwrap().0;
        assert_eq!(raw, vec![0]);
        // After scaling both datasets count equally and tie; index 0 wins ties.
        assert_eq!(norm, vec![0]);
        let m = matrix(vec![
            vec![12.9722, 13.0],
            vec![0.0101, 0.0050],
            vec![0.0101, 0.0050],
        ]);
        assert_eq!(greedy_columns(&m.scores, 1).unwrap().0, vec![0]);
        assert_eq!(
            greedy_columns(&normalize_rows(&m).scores, 1).unwrap().0,
            vec![1]
        );
    }

    #[test]
    fn first_pick_is_best_column_mean() {
        let m = matrix(vec![vec![0.5, 0.2, 0.9], vec![0.1, 0.6, 0.0]]);
        let p = greedy_select(&m, 1).unwrap();
        assert_eq!(p.config_ids, vec!["c0"]);
        assert!((p.selection_trace[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn exhaustion_and_errors() {
        let m = matrix(vec![vec![0.5, 0.2, 0.9], vec![0.1, 0.6, 0.0]]);
        let p = greedy_select(&m, 10).unwrap();
        assert_eq!(p.len(), 3);
        let mut ids = p.config_ids.clone();
        ids.sort();
        assert_eq!(ids, vec!["c0", "c1", "c2"]);
        assert!(greedy_select(&m, 0).is_err());
        assert!(p.selection_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn imputation_policy() {
        let set = candidates(3);
        let m = PerformanceMatrix::from_cells(
            vec!["a".into(), "b".into(), "c".into()],
            &set,
            vec![
                vec![Some(1.0), None, Some(3.0)],
                vec![None, None, None],
                vec![Some(0.5), Some(0.25), Some(0.75)],
            ],
        )
        .unwrap();
        assert_eq!(m.dataset_ids, vec!["a", "c"]);
        assert_eq!(m.scores[0], vec![1.0, 6.0, 3.0]);
        assert_eq!(m.imputed[0], vec![false, true, false]);
        assert_eq!(m.warnings.len(), 1);
    }

    #[test]
    fn initial_design_preserves_order() {
        let m = matrix(vec![vec![0.5, 0.2, 0.9, 0.4], vec![0.1, 0.6, 0.0, 0.3]]);
        let p = greedy_select(&m, 3).unwrap();
        let design = portfolio_to_initial_design(&p);
        assert_eq!(design, p.configs);
        let empty = Portfolio {
            configs: Vec::new(),
            config_ids: Vec::new(),
            provenance: Vec::new(),
            selection_trace: Vec::new(),
            requested_size: 0,
            matrix_hash: String::new(),
        };
        assert!(portfolio_to_initial_design(&empty).is_empty());
    }
}

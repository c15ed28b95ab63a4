use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    InverseDistance,
}

impl Weighting {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uniform" => Some(Weighting::Uniform),
            "inverse_distance" => Some(Weighting::InverseDistance),
            _ => None,
        }
    }
}

const EXACT: f64 = 1e-24;

/// Brute-force k-nearest-neighbor regression in normalized input space.
/// `inputs` is row-major with `dim` columns.
pub fn predict(
    inputs: &[f64],
    targets: &[Vec<f64>],
    dim: usize,
    k: usize,
    weighting: Weighting,
    query: &[f64],
    out: &mut [f64],
) {
    let n = targets.len();
    let k = k.min(n).max(1);
    let mut dist: Vec<(f64, usize)> = inputs
        .chunks_exact(dim)
        .enumerate()
        .map(|(i, row)| {
            let d: f64 = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, i)
        })
        .collect();
    let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < n {
        dist.select_nth_unstable_by(k - 1, by_dist);
        dist.truncate(k);
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    let exact: Vec<usize> = dist
        .iter()
        .filter(|(d, _)| *d <= EXACT)
        .map(|(_, i)| *i)
        .collect();
    let weighted: Vec<(f64, usize)> = match weighting {
        Weighting::InverseDistance if !exact.is_empty() => {
            exact.iter().map(|&i| (1.0, i)).collect()
        }
        Weighting::InverseDistance => dist.iter().map(|(d, i)| (1.0 / d.sqrt(), *i)).collect(),
        Weighting::Uniform => dist.iter().map(|(_, i)| (1.0, *i)).collect(),
    };
    let total: f64 = weighted.iter().map(|(w, _)| w).sum();
    for (w, i) in weighted {
        for (o, t) in out.iter_mut().zip(&targets[i]) {
            *o += w * t / total;
        }
    }
}

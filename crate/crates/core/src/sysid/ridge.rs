//! Regularized least squares on polynomial features (degree 1 is the linear model).

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Monomials of total degree 1..=degree over `dim` variables, each built as
/// `features[parent] * z[var]` (parent `None` means the variable itself).
#[derive(Clone, Debug)]
pub struct Monomials {
    terms: Vec<(Option<usize>, usize)>,
}

impl Monomials {
    pub fn new(dim: usize, degree: usize) -> Self {
        let mut terms: Vec<(Option<usize>, usize)> = (0..dim).map(|v| (None, v)).collect();
        // Track the largest variable of each term so products stay sorted.
        let mut last_var: Vec<usize> = (0..dim).collect();
        let mut level = 0..dim;
        for _ in 1..degree {
            let start = terms.len();
            for parent in level.clone() {
                for v in last_var[parent]..dim {
                    terms.push((Some(parent), v));
                    last_var.push(v);
                }
            }
            level = start..terms.len();
        }
        Self { terms }
    }

    /// Feature count including the leading bias column.
    pub fn width(&self) -> usize {
        self.terms.len() + 1
    }

    pub fn expand_into(&self, z: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        for &(parent, v) in &self.terms {
            let base = parent.map_or(1.0, |p| out[p + 1]);
            out.push(base * z[v]);
        }
    }
}

/// Solves `(Phi^T Phi + lambda * D) W = Phi^T Y` where `D` leaves the bias
/// unpenalized. Returns `W` as `width x outputs`.
pub fn solve(phi: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let mut gram = phi.transpose() * phi;
    for i in 1..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let rhs = phi.transpose() * y;
    if let Some(chol) = gram.clone().cholesky() {
        return Ok(chol.solve(&rhs));
    }
    let svd = gram.svd(true, true);
    svd.solve(&rhs, 1e-12)
        .map_err(|e| Error::InvalidArgument(format!("least squares failed: {e}")))
}

pub fn predict(weights: &[Vec<f64>], features: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (f, row) in features.iter().zip(weights) {
        for (o, w) in out.iter_mut().zip(row) {
            *o += f * w;
        }
    }
}

pub fn weights_to_rows(w: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..w.nrows())
        .map(|i| w.row(i).iter().copied().collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binomial(n: usize, k: usize) -> usize {
        (1..=k).fold(1, |acc, i| acc * (n + 1 - i) / i)
    }

    #[test]
    fn monomial_counts() {
        for dim in 1..6 {
            for degree in 1..5 {
                let m = Monomials::new(dim, degree);
                assert_eq!(m.width(), binomial(dim + degree, degree), "{dim} {degree}");
            }
        }
    }

    #[test]
    fn monomial_values() {
        let m = Monomials::new(2, 2);
        let mut out = Vec::new();
        m.expand_into(&[2.0, 3.0], &mut out);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }
}

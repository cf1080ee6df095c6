//! Simultaneous orthogonal matching pursuit (SOMP) over the multicoset model.
//!
//! Standard K-iteration SOMP: pick the column of `A` whose correlation with the
//! residual has the largest row l2 norm, re-fit all selected columns jointly by
//! least squares and update the residual. The sparsity `K` is given.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::multicoset::{CMatrix, MeasurementMatrix};
use crate::signal_model::OccupancyVector;

/// Diagonal loading of the normal equations, relative to their mean diagonal.
pub const LS_REGULARIZER: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SompResult {
    /// Selected sub-bands, 1-based, in selection order.
    pub support: Vec<usize>,
    /// Frobenius norm of the final residual.
    pub residual_norm: f64,
    /// Residual norm after each iteration.
    pub residual_history: Vec<f64>,
    pub iterations: usize,
    /// `K > P`: the least-squares fits are underdetermined and the support is best effort.
    pub infeasible_sparsity: bool,
}

impl SompResult {
    pub fn occupancy(&self, subbands: usize) -> Result<OccupancyVector> {
        OccupancyVector::from_indices(subbands, self.support.iter().map(|&s| s - 1))
    }
}

fn frobenius(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn least_squares(a_s: &CMatrix, y: &CMatrix) -> CMatrix {
    let mut gram = a_s.adjoint() * a_s;
    let k = gram.nrows();
    let mean_diag = (0..k).map(|i| gram[(i, i)].re).sum::<f64>() / k as f64;
    let load = LS_REGULARIZER * mean_diag.max(f64::MIN_POSITIVE);
    for i in 0..k {
        gram[(i, i)] += Complex64::new(load, 0.0);
    }
    let rhs = a_s.adjoint() * y;
    match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .unwrap_or_else(|| CMatrix::zeros(k, y.ncols())),
    }
}

/// Recovers a `k`-row support of `X` from `Y = A X`.
pub fn somp_detect(y: &CMatrix, a: &MeasurementMatrix, k: usize) -> Result<SompResult> {
    let am = a.matrix();
    let (p, l) = am.shape();
    if y.nrows() != p {
        return Err(Error::invalid(format!(
            "Y has {} rows, A has {p}",
            y.nrows()
        )));
    }
    if k > l {
        return Err(Error::invalid(format!(
            "sparsity {k} exceeds {l} sub-bands"
        )));
    }
    let mut residual = y.clone();
    let mut support: Vec<usize> = Vec::with_capacity(k);
    let mut history = Vec::with_capacity(k);
    for _ in 0..k {
        let corr = am.adjoint() * &residual;
        let mut best: Option<(usize, f64)> = None;
        for (col, row) in corr.row_iter().enumerate() {
            if support.contains(&col) {
                continue;
            }
            let score = row.iter().map(|z| z.norm_sqr()).sum::<f64>();
            // Strict comparison: the lowest index wins ties.
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((col, score));
            }
        }
        let (col, _) = best.expect("k <= L leaves a candidate");
        support.push(col);
        let a_s = DMatrix::from_fn(p, support.len(), |r, c| am[(r, support[c])]);
        let x_s = least_squares(&a_s, y);
        residual = y - &a_s * x_s;
        history.push(frobenius(&residual));
    }
    Ok(SompResult {
        support: support.iter().map(|s| s + 1).collect(),
        residual_norm: history.last().copied().unwrap_or_else(|| frobenius(y)),
        residual_history: history,
        iterations: k,
        infeasible_sparsity: k > p,
    })
}

//! Row-sparse Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::RowGrads;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment estimates mirroring one parameter matrix.
///
/// Only rows present in the gradient are updated ("lazy" Adam); the step
/// counter is global so bias correction follows the number of optimizer
/// steps taken, not per-row visits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamState {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }

    pub fn for_matrix(params: &Matrix) -> Self {
        Self::new(params.rows(), params.cols())
    }

    /// Applies one bias-corrected Adam update to the rows in `grads`.
    /// A non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, params: &mut Matrix, grads: &RowGrads, lr: f64) -> Result<()> {
        if params.rows() != self.m.rows() || params.cols() != self.m.cols() || grads.dim() != params.cols() {
            return Err(Error::DimensionMismatch(format!(
                "params {}x{}, state {}x{}, grad dim {}",
                params.rows(),
                params.cols(),
                self.m.rows(),
                self.m.cols(),
                grads.dim()
            )));
        }
        for (r, g) in grads.iter() {
            if r >= params.rows() {
                return Err(Error::OutOfRange(format!("gradient row {r}")));
            }
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient {bad} in row {r}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (r, g) in grads.iter() {
            let m = self.m.row_mut(r);
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v.row_mut(r);
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let (m, v) = (self.m.row(r), self.v.row(r));
            let p = params.row_mut(r);
            for k in 0..p.len() {
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

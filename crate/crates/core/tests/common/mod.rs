#![allow(dead_code)]

use bcrec::linalg::Matrix;
use bcrec::losses::{LossBatch, RowGrads};
use rand::Rng;

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Random contrastive batch; negatives avoid the row's positive.
pub fn random_batch<R: Rng>(nu: usize, ni: usize, rows: usize, negs: usize, rng: &mut R) -> LossBatch {
    let mut b = LossBatch::default();
    for _ in 0..rows {
        let u = rng.random_range(0..nu);
        let i = rng.random_range(0..ni);
        let n = (0..negs)
            .map(|_| loop {
                let j = rng.random_range(0..ni);
                if j != i {
                    break j;
                }
            })
            .collect();
        b.users.push(u);
        b.positives.push(i);
        b.negatives.push(n);
    }
    b
}

/// Central differences of `f` over every entry of `which` (0 = users,
/// 1 = items), returned densely.
pub fn numeric_grad(
    users: &Matrix,
    items: &Matrix,
    which: usize,
    h: f64,
    f: &dyn Fn(&Matrix, &Matrix) -> f64,
) -> Matrix {
    let target = if which == 0 { users } else { items };
    let mut out = Matrix::zeros(target.rows(), target.cols());
    for k in 0..target.as_slice().len() {
        let mut plus = target.clone();
        let mut minus = target.clone();
        plus.as_mut_slice()[k] += h;
        minus.as_mut_slice()[k] -= h;
        let (fp, fm) = if which == 0 {
            (f(&plus, items), f(&minus, items))
        } else {
            (f(users, &plus), f(users, &minus))
        };
        out.as_mut_slice()[k] = (fp - fm) / (2.0 * h);
    }
    out
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference when both
/// gradients vanish.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff: f64 = analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.as_slice().iter().map(|a| a * a).sum::<f64>().sqrt().max(
        numeric.as_slice().iter().map(|a| a * a).sum::<f64>().sqrt(),
    );
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn dense(g: &RowGrads, rows: usize) -> Matrix {
    g.to_dense(rows)
}

//! Training objectives with analytic gradients: sampled softmax, the
//! bias-margin contrastive loss, BPR, IPS-CN weighting and L2.
//!
//! Every loss takes the *final* user/item representation matrices and
//! returns gradients with respect to the rows it touched. Batch losses are
//! sums over rows, never means.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, Matrix};
use crate::encoders::NORM_FLOOR;

/// Rows of a contrastive batch: `(users[r], positives[r])` against
/// `negatives[r]`. Indices refer to rows of whichever matrices the loss is
/// evaluated on.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LossBatch {
    pub users: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
}

impl LossBatch {
    pub fn new(users: Vec<usize>, positives: Vec<usize>, negatives: Vec<Vec<usize>>) -> Result<Self> {
        if users.len() != positives.len() || users.len() != negatives.len() {
            return Err(Error::DimensionMismatch(format!(
                "batch columns {} / {} / {}",
                users.len(),
                positives.len(),
                negatives.len()
            )));
        }
        Ok(LossBatch {
            users,
            positives,
            negatives,
        })
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Keeps only rows with `keep[r] == true`.
    pub fn retain_rows(&self, keep: &[bool]) -> LossBatch {
        let pick = |r: &usize| keep[*r];
        let rows: Vec<usize> = (0..self.len()).filter(pick).collect();
        LossBatch {
            users: rows.iter().map(|&r| self.users[r]).collect(),
            positives: rows.iter().map(|&r| self.positives[r]).collect(),
            negatives: rows.iter().map(|&r| self.negatives[r].clone()).collect(),
        }
    }

    /// Single-row sub-batch.
    pub fn row(&self, r: usize) -> LossBatch {
        LossBatch {
            users: vec![self.users[r]],
            positives: vec![self.positives[r]],
            negatives: vec![self.negatives[r].clone()],
        }
    }
}

/// Sparse per-row gradient accumulator. Rows are kept in first-touch order
/// so iteration is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGrads {
    dim: usize,
    slot_of: HashMap<usize, usize>,
    rows: Vec<usize>,
    data: Vec<f64>,
}

impl RowGrads {
    pub fn new(dim: usize) -> Self {
        RowGrads {
            dim,
            slot_of: HashMap::new(),
            rows: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn slot(&mut self, row: usize) -> &mut [f64] {
        let dim = self.dim;
        let next = self.rows.len();
        let s = *self.slot_of.entry(row).or_insert(next);
        if s == next {
            self.rows.push(row);
            self.data.resize(self.data.len() + dim, 0.0);
        }
        &mut self.data[s * dim..(s + 1) * dim]
    }

    /// `grad[row] += alpha * v`
    pub fn add(&mut self, row: usize, alpha: f64, v: &[f64]) {
        axpy(alpha, v, self.slot(row));
    }

    /// Registers `row` as touched without changing its gradient.
    pub fn touch(&mut self, row: usize) {
        self.slot(row);
    }

    pub fn get(&self, row: usize) -> Option<&[f64]> {
        self.slot_of
            .get(&row)
            .map(|&s| &self.data[s * self.dim..(s + 1) * self.dim])
    }

    /// Touched rows in first-touch order.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows
            .iter()
            .zip(self.data.chunks_exact(self.dim.max(1)))
            .map(|(&r, g)| (r, g))
    }

    pub fn merge(&mut self, other: &RowGrads) {
        for (r, g) in other.iter() {
            self.add(r, 1.0, g);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Dense `rows x dim` copy; untouched rows are zero.
    pub fn to_dense(&self, rows: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, self.dim);
        for (r, g) in self.iter() {
            axpy(1.0, g, m.row_mut(r));
        }
        m
    }

    /// Builds from a dense matrix, touching only rows with a nonzero entry.
    pub fn from_dense(m: &Matrix) -> Self {
        let mut g = RowGrads::new(m.cols());
        for r in 0..m.rows() {
            let row = m.row(r);
            if row.iter().any(|&x| x != 0.0) {
                g.add(r, 1.0, row);
            }
        }
        g
    }
}

/// Gradients with respect to the user and item matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub users: RowGrads,
    pub items: RowGrads,
}

impl Gradients {
    pub fn new(dim: usize) -> Self {
        Gradients {
            users: RowGrads::new(dim),
            items: RowGrads::new(dim),
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        self.users.merge(&other.users);
        self.items.merge(&other.items);
    }

    pub fn is_finite(&self) -> bool {
        self.users.is_finite() && self.items.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Weighted sum of the per-row losses.
    pub value: f64,
    /// Unweighted loss of each batch row.
    pub per_row: Vec<f64>,
    pub grads: Gradients,
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

/// Cosine of two rows with its gradients `(c, dc/da, dc/db)`.
fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (na, nb) = (norm(a), norm(b));
    if na <= NORM_FLOOR || nb <= NORM_FLOOR {
        return Err(Error::ZeroNorm(format!("norms {na:e}, {nb:e}")));
    }
    let c = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let ga = a.iter().zip(b).map(|(&x, &y)| y * inv - c * x / (na * na)).collect();
    let gb = a.iter().zip(b).map(|(&x, &y)| x * inv - c * y / (nb * nb)).collect();
    Ok((c.clamp(-1.0, 1.0), ga, gb))
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na <= NORM_FLOOR || nb <= NORM_FLOOR {
        return Err(Error::ZeroNorm(format!("norms {na:e}, {nb:e}")));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Logit differences above this switch the stabilizer from the positive
/// logit to the overall max.
const PIVOT_LIMIT: f64 = 700.0;

/// Negative log-softmax of the positive logit among `pos` and `negs`, with
/// its derivatives `(loss, d/dpos, d/dneg_j)`.
///
/// Exponents are taken relative to the positive logit, so the result is
/// `ln(1 + sum_j exp(z_j - z_0))`: weakly decreasing in `z_0` under IEEE
/// rounding. When a negative exceeds the positive by more than
/// [`PIVOT_LIMIT`], the max logit is subtracted instead.
pub fn softmax_nll(pos: f64, negs: &[f64]) -> (f64, f64, Vec<f64>) {
    let max_gap = negs.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z - pos));
    if max_gap <= PIVOT_LIMIT {
        let exps: Vec<f64> = negs.iter().map(|&z| (z - pos).exp()).collect();
        let s: f64 = exps.iter().sum();
        let denom = 1.0 + s;
        let loss = s.ln_1p();
        (loss, -s / denom, exps.into_iter().map(|e| e / denom).collect())
    } else {
        softmax_nll_max_shift(pos, negs)
    }
}

/// Same quantity as [`softmax_nll`], stabilized by subtracting the largest
/// logit.
pub fn softmax_nll_max_shift(pos: f64, negs: &[f64]) -> (f64, f64, Vec<f64>) {
    let m = negs.iter().fold(pos, |m, &z| m.max(z));
    let e0 = (pos - m).exp();
    let exps: Vec<f64> = negs.iter().map(|&z| (z - m).exp()).collect();
    let total = e0 + exps.iter().sum::<f64>();
    let loss = (m - pos) + total.ln();
    (loss, e0 / total - 1.0, exps.into_iter().map(|e| e / total).collect())
}

/// Below this `sin(theta)` the angle-space chain rule is evaluated with
/// `sin(theta)` pinned to the floor (|cos| > 1 - 1e-7).
const SIN_GUARD: f64 = 4.472_135_843_897_722e-4; // sqrt(1 - (1 - 1e-7)^2)

fn contrastive(
    users: &Matrix,
    items: &Matrix,
    batch: &LossBatch,
    margins: Option<&[f64]>,
    tau: f64,
    weights: Option<&[f64]>,
) -> Result<LossOutput> {
    check_temperature(tau)?;
    if let Some(m) = margins {
        if m.len() != batch.len() {
            return Err(Error::DimensionMismatch(format!("{} margins for {} rows", m.len(), batch.len())));
        }
    }
    if let Some(w) = weights {
        if w.len() != batch.len() {
            return Err(Error::DimensionMismatch(format!("{} weights for {} rows", w.len(), batch.len())));
        }
    }
    let mut grads = Gradients::new(users.cols());
    let mut per_row = Vec::with_capacity(batch.len());
    let mut value = 0.0;
    for r in 0..batch.len() {
        let (u, i, negs) = (batch.users[r], batch.positives[r], &batch.negatives[r]);
        if negs.is_empty() {
            return Err(Error::Config(format!("row {r} has no negatives")));
        }
        let w = weights.map_or(1.0, |w| w[r]);
        let urow = users.row(u);
        let (c0, gu0, gi0) = cosine_with_grad(urow, items.row(i))?;

        let margin = margins.map_or(0.0, |m| m[r]);
        let (pos_logit, dpos_dc) = if margin == 0.0 {
            (c0 / tau, 1.0 / tau)
        } else {
            let theta = c0.acos();
            if theta + margin > PI + 1e-9 {
                return Err(Error::Invariant(format!(
                    "row {r}: theta {theta} + margin {margin} exceeds pi"
                )));
            }
            let shifted = theta + margin;
            let sin_theta = (1.0 - c0 * c0).max(0.0).sqrt().max(SIN_GUARD);
            (shifted.cos() / tau, shifted.sin() / sin_theta / tau)
        };

        let mut neg_logits = Vec::with_capacity(negs.len());
        let mut neg_grads = Vec::with_capacity(negs.len());
        for &j in negs {
            let (c, gu, gj) = cosine_with_grad(urow, items.row(j))?;
            neg_logits.push(c / tau);
            neg_grads.push((gu, gj));
        }
        let (loss, dpos, dnegs) = softmax_nll(pos_logit, &neg_logits);
        per_row.push(loss);
        value += w * loss;

        let k0 = w * dpos * dpos_dc;
        grads.users.add(u, k0, &gu0);
        grads.items.add(i, k0, &gi0);
        for ((&j, (gu, gj)), d) in negs.iter().zip(&neg_grads).zip(dnegs) {
            let k = w * d / tau;
            grads.users.add(u, k, gu);
            grads.items.add(j, k, gj);
        }
    }
    Ok(LossOutput { value, per_row, grads })
}

/// Sampled softmax loss over cosine logits scaled by `1/tau`.
pub fn softmax_loss(users: &Matrix, items: &Matrix, batch: &LossBatch, tau: f64) -> Result<LossOutput> {
    contrastive(users, items, batch, None, tau, None)
}

/// Softmax loss with per-row weights (IPS-CN).
pub fn weighted_softmax_loss(
    users: &Matrix,
    items: &Matrix,
    batch: &LossBatch,
    tau: f64,
    weights: &[f64],
) -> Result<LossOutput> {
    contrastive(users, items, batch, None, tau, Some(weights))
}

/// Bias-margin contrastive loss: the positive logit becomes
/// `cos(theta_ui + M_ui) / tau`. Margins are constants for differentiation.
pub fn bc_loss(
    users: &Matrix,
    items: &Matrix,
    batch: &LossBatch,
    margins: &[f64],
    tau: f64,
) -> Result<LossOutput> {
    contrastive(users, items, batch, Some(margins), tau, None)
}

/// Angle between each row's user and positive item.
pub fn positive_angles(users: &Matrix, items: &Matrix, batch: &LossBatch) -> Result<Vec<f64>> {
    (0..batch.len())
        .map(|r| cosine(users.row(batch.users[r]), items.row(batch.positives[r])).map(f64::acos))
        .collect()
}

/// `ln(1 + e^{-x})` without overflow.
fn softplus_neg(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// BPR on cosine scores: `sum -ln sigmoid(s_ui - s_uj)`. Every row must carry
/// exactly one negative.
pub fn bpr_loss(
    users: &Matrix,
    items: &Matrix,
    batch: &LossBatch,
    weights: Option<&[f64]>,
) -> Result<LossOutput> {
    let mut grads = Gradients::new(users.cols());
    let mut per_row = Vec::with_capacity(batch.len());
    let mut value = 0.0;
    for r in 0..batch.len() {
        let (u, i) = (batch.users[r], batch.positives[r]);
        let j = match batch.negatives[r].as_slice() {
            [j] => *j,
            other => {
                return Err(Error::Config(format!(
                    "BPR needs exactly one negative per row, row {r} has {}",
                    other.len()
                )))
            }
        };
        let w = weights.map_or(1.0, |w| w[r]);
        let (ci, gui, gi) = cosine_with_grad(users.row(u), items.row(i))?;
        let (cj, guj, gj) = cosine_with_grad(users.row(u), items.row(j))?;
        let x = ci - cj;
        let loss = softplus_neg(x);
        // d/dx ln(1 + e^{-x}) = -sigmoid(-x)
        let dx = -1.0 / (1.0 + x.exp());
        per_row.push(loss);
        value += w * loss;
        grads.users.add(u, w * dx, &gui);
        grads.users.add(u, -w * dx, &guj);
        grads.items.add(i, w * dx, &gi);
        grads.items.add(j, -w * dx, &gj);
    }
    Ok(LossOutput { value, per_row, grads })
}

/// Inverse-popularity weights `1/p_i`, clipped at `clip_max`, then scaled so
/// the batch mean is 1.
pub fn ips_cn_weights(item_pop: &[usize], batch_items: &[usize], clip_max: f64) -> Result<Vec<f64>> {
    if !(clip_max > 0.0) {
        return Err(Error::Config(format!("clip_max must be positive, got {clip_max}")));
    }
    let raw = batch_items
        .iter()
        .map(|&i| match item_pop.get(i) {
            Some(&p) if p > 0 => Ok((1.0 / p as f64).min(clip_max)),
            _ => Err(Error::Config(format!("item {i} has no training interactions"))),
        })
        .collect::<Result<Vec<f64>>>()?;
    if raw.is_empty() {
        return Ok(raw);
    }
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

/// Default IPS clip: ten times the median raw weight `1/p_i` over the
/// given interactions' items.
pub fn default_ips_clip(item_pop: &[usize], items: &[usize]) -> f64 {
    let mut raw: Vec<f64> = items
        .iter()
        .filter_map(|&i| item_pop.get(i).filter(|&&p| p > 0).map(|&p| 1.0 / p as f64))
        .collect();
    if raw.is_empty() {
        return 1.0;
    }
    raw.sort_by(f64::total_cmp);
    let n = raw.len();
    let median = if n % 2 == 1 {
        raw[n / 2]
    } else {
        0.5 * (raw[n / 2 - 1] + raw[n / 2])
    };
    10.0 * median
}

/// `coefficient * sum ||row||^2` over the distinct `rows`.
pub fn l2_penalty(m: &Matrix, rows: &[usize], coefficient: f64) -> Result<(f64, RowGrads)> {
    if !(coefficient >= 0.0) {
        return Err(Error::Config(format!("L2 coefficient must be >= 0, got {coefficient}")));
    }
    let mut g = RowGrads::new(m.cols());
    let mut value = 0.0;
    for &r in rows {
        if g.get(r).is_some() {
            continue;
        }
        let row = m.row(r);
        value += coefficient * dot(row, row);
        g.add(r, 2.0 * coefficient, row);
    }
    Ok((value, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    /// Unit vectors in the plane at the given angles.
    fn plane(angles: &[f64]) -> Matrix {
        Matrix::from_rows(&angles.iter().map(|a| vec![a.cos(), a.sin()]).collect::<Vec<_>>()).unwrap()
    }

    fn one_row(neg: Vec<usize>) -> LossBatch {
        LossBatch::new(vec![0], vec![0], vec![neg]).unwrap()
    }

    #[test]
    fn softmax_equal_logits_is_ln2() {
        let users = plane(&[0.0]);
        let items = plane(&[0.7, -0.7]);
        for tau in [0.05, 0.5, 3.0] {
            let out = softmax_loss(&users, &items, &one_row(vec![1]), tau).unwrap();
            assert!((out.value - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_analytic_cases() {
        let users = plane(&[0.0]);
        let items = plane(&[0.0, PI]);
        let out = softmax_loss(&users, &items, &one_row(vec![1]), 1.0).unwrap();
        assert!((out.value - (-2f64).exp().ln_1p()).abs() < 1e-12);
        assert!((out.value - 0.126928).abs() < 1e-6);

        let items = plane(&[0.9f64.acos(), 0.1f64.acos(), -(0.1f64.acos())]);
        let out = softmax_loss(&users, &items, &one_row(vec![1, 2]), 0.1).unwrap();
        let expected = (2.0 * (-8f64).exp()).ln_1p();
        assert!((out.value - expected).abs() < 1e-12);
        assert!((out.value - 0.000671).abs() < 1e-6);
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let users = plane(&[0.0]);
        let items = plane(&[0.0, 1.0]);
        for tau in [0.0, -1.0, f64::NAN] {
            assert!(matches!(softmax_loss(&users, &items, &one_row(vec![1]), tau), Err(Error::Config(_))));
            assert!(matches!(bc_loss(&users, &items, &one_row(vec![1]), &[0.0], tau), Err(Error::Config(_))));
        }
    }

    #[test]
    fn bc_analytic_cases() {
        let users = plane(&[0.0]);
        let items = plane(&[PI / 3.0, FRAC_PI_2]);
        let batch = one_row(vec![1]);
        let out = bc_loss(&users, &items, &batch, &[PI / 6.0], 1.0).unwrap();
        assert!((out.value - 0.693147).abs() < 1e-6);
        let plain = bc_loss(&users, &items, &batch, &[0.0], 1.0).unwrap();
        let expected = -(0.5f64.exp() / (0.5f64.exp() + 1.0)).ln();
        assert!((plain.value - expected).abs() < 1e-12);
        assert!((plain.value - 0.474077).abs() < 1e-6);
        assert!(plain.value < out.value);
    }

    #[test]
    fn bc_rejects_margin_past_pi() {
        let users = plane(&[0.0]);
        let items = plane(&[2.0, 1.0]);
        let err = bc_loss(&users, &items, &one_row(vec![1]), &[PI - 1.0], 1.0).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn bpr_analytic_cases() {
        let users = plane(&[0.0]);
        let items = plane(&[0.4, -0.4]);
        let out = bpr_loss(&users, &items, &one_row(vec![1]), None).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-12);
        // difference of exactly +/-2: cos 0 - cos pi
        let items = plane(&[0.0, PI]);
        let out = bpr_loss(&users, &items, &one_row(vec![1]), None).unwrap();
        assert!((out.value - 0.126928).abs() < 1e-6);
        let items = plane(&[PI, 0.0]);
        let out = bpr_loss(&users, &items, &one_row(vec![1]), None).unwrap();
        assert!((out.value - 2f64.exp().ln_1p()).abs() < 1e-12);
        assert!((out.value - 2.126928).abs() < 1e-6);
    }

    #[test]
    fn bpr_requires_single_negative() {
        let users = plane(&[0.0]);
        let items = plane(&[0.0, 1.0, 2.0]);
        assert!(bpr_loss(&users, &items, &one_row(vec![1, 2]), None).is_err());
        assert!(bpr_loss(&users, &items, &one_row(vec![]), None).is_err());
    }

    #[test]
    fn ips_weights() {
        assert_eq!(ips_cn_weights(&[4, 4, 4], &[0, 1, 2], 10.0).unwrap(), vec![1.0; 3]);
        let w = ips_cn_weights(&[1, 4], &[0, 1], 10.0).unwrap();
        assert!((w[0] - 1.6).abs() < 1e-12 && (w[1] - 0.4).abs() < 1e-12);
        let w = ips_cn_weights(&[1, 100], &[0, 1], 0.5).unwrap();
        assert!((w[0] - 1.960784).abs() < 1e-6 && (w[1] - 0.039216).abs() < 1e-6);
        assert!(ips_cn_weights(&[0, 1], &[0], 1.0).is_err());
        assert!(ips_cn_weights(&[1], &[0], 0.0).is_err());
    }

    #[test]
    fn ips_default_clip_is_ten_medians() {
        let clip = default_ips_clip(&[1, 2, 4], &[0, 1, 2]);
        assert!((clip - 5.0).abs() < 1e-12);
    }

    #[test]
    fn l2_cases() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(l2_penalty(&m, &[0, 1], 0.0).unwrap().0, 0.0);
        let (v, g) = l2_penalty(&m, &[0, 0], 1.0).unwrap();
        assert_eq!(v, 25.0);
        assert_eq!(g.get(0).unwrap(), &[6.0, 8.0]);
        assert!(g.get(1).is_none());
        assert!(l2_penalty(&m, &[0], -1.0).is_err());
    }

    #[test]
    fn stabilizers_agree() {
        let cases = [
            (0.3, vec![0.1, -0.2, 0.9]),
            (10.0, vec![-5.0, 3.0]),
            (-14.0, vec![14.0, 13.5, 0.0]),
        ];
        for (pos, negs) in cases {
            let (a, da, ga) = softmax_nll(pos, &negs);
            let (b, db, gb) = softmax_nll_max_shift(pos, &negs);
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
            assert!((da - db).abs() < 1e-12);
            for (x, y) in ga.iter().zip(&gb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        // huge gaps take the max-shift branch and stay finite
        let (l, _, _) = softmax_nll(0.0, &[1000.0]);
        assert!((l - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn row_grads_keep_first_touch_order() {
        let mut g = RowGrads::new(2);
        g.add(5, 1.0, &[1.0, 2.0]);
        g.add(1, 2.0, &[1.0, 1.0]);
        g.add(5, 1.0, &[1.0, 0.0]);
        assert_eq!(g.rows(), &[5, 1]);
        assert_eq!(g.get(5).unwrap(), &[2.0, 2.0]);
        assert_eq!(g.to_dense(6).row(1), &[2.0, 2.0]);
        assert_eq!(RowGrads::from_dense(&g.to_dense(6)).rows(), &[1, 5]);
    }
}

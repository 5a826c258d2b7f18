//! User/item encoders (MF and LightGCN) and the cosine scoring head.

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, Matrix};

/// Norms at or below this are treated as degenerate.
pub const NORM_FLOOR: f64 = 1e-12;

/// Standard deviation of the i.i.d. normal embedding initialization.
pub const INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EncoderKind {
    Mf,
    LightGcn { layers: usize },
}

impl EncoderKind {
    pub fn name(&self) -> &'static str {
        match self {
            EncoderKind::Mf => "mf",
            EncoderKind::LightGcn { .. } => "lightgcn",
        }
    }

    pub fn layers(&self) -> usize {
        match self {
            EncoderKind::Mf => 0,
            EncoderKind::LightGcn { layers } => *layers,
        }
    }
}

/// User (`psi`) and item (`phi`) embedding matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub users: Matrix,
    pub items: Matrix,
}

impl EmbeddingTable {
    pub fn new(users: Matrix, items: Matrix) -> Result<Self> {
        if users.cols() != items.cols() || users.cols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "user dim {} vs item dim {}",
                users.cols(),
                items.cols()
            )));
        }
        Ok(EmbeddingTable { users, items })
    }

    pub fn random<R: Rng + ?Sized>(num_users: usize, num_items: usize, dim: usize, rng: &mut R) -> Self {
        assert!(dim >= 1, "embedding dimension must be positive");
        let users = Matrix::random_normal(num_users, dim, INIT_STD, rng);
        let items = Matrix::random_normal(num_items, dim, INIT_STD, rng);
        EmbeddingTable { users, items }
    }

    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    pub fn num_users(&self) -> usize {
        self.users.rows()
    }

    pub fn num_items(&self) -> usize {
        self.items.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.users.is_finite() && self.items.is_finite()
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= NORM_FLOOR || nb <= NORM_FLOOR {
        return Err(Error::ZeroNorm(format!("norms {na:e}, {nb:e}")));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Angle in radians, `arccos` of the cosine similarity.
pub fn angle(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine_similarity(a, b).map(f64::acos)
}

/// Symmetric-normalized user-item adjacency over `num_users + num_items`
/// nodes, stored as CSR. Users occupy nodes `0..U`, items `U..U+I`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    num_users: usize,
    num_items: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
    degrees: Vec<usize>,
}

impl NormalizedAdjacency {
    /// Builds the graph from training interactions. No self loops.
    pub fn from_dataset(train: &Dataset) -> Self {
        let (nu, ni) = (train.num_users(), train.num_items());
        let n = nu + ni;
        let mut degrees = vec![0usize; n];
        for u in 0..nu {
            degrees[u] = train.user_pop()[u];
        }
        for i in 0..ni {
            degrees[nu + i] = train.item_pop()[i];
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(2 * train.len());
        let mut values = Vec::with_capacity(2 * train.len());
        row_ptr.push(0);
        let w = |a: usize, b: usize| 1.0 / ((degrees[a] * degrees[b]) as f64).sqrt();
        for u in 0..nu {
            for &i in train.user_positives(u) {
                cols.push(nu + i);
                values.push(w(u, nu + i));
            }
            row_ptr.push(cols.len());
        }
        for i in 0..ni {
            for &u in train.item_positives(i) {
                cols.push(u);
                values.push(w(u, nu + i));
            }
            row_ptr.push(cols.len());
        }
        NormalizedAdjacency {
            num_users: nu,
            num_items: ni,
            row_ptr,
            cols,
            values,
            degrees,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Stored entries of node `r` as `(column, value)`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    /// `A_hat * x` for an `(U+I) x d` matrix.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..self.num_nodes() {
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            let dst = out.row_mut(r);
            for (&c, &v) in self.cols[span.clone()].iter().zip(&self.values[span]) {
                axpy(v, x.row(c), dst);
            }
        }
        out
    }

    /// `(1 / (L+1)) * sum_{k=0..L} A_hat^k x`.
    pub fn layer_mean(&self, x: &Matrix, layers: usize) -> Matrix {
        let mut acc = x.clone();
        let mut cur = Cow::Borrowed(x);
        for _ in 0..layers {
            let next = self.apply(&cur);
            for (a, b) in acc.as_mut_slice().iter_mut().zip(next.as_slice()) {
                *a += b;
            }
            cur = Cow::Owned(next);
        }
        acc.scale(1.0 / (layers + 1) as f64);
        acc
    }
}

fn check_adjacency(table: &EmbeddingTable, adj: &NormalizedAdjacency) -> Result<()> {
    if table.num_users() != adj.num_users() || table.num_items() != adj.num_items() {
        return Err(Error::DimensionMismatch(format!(
            "table {}x{} vs adjacency {}x{}",
            table.num_users(),
            table.num_items(),
            adj.num_users(),
            adj.num_items()
        )));
    }
    Ok(())
}

/// LightGCN propagation: the layer mean of `A_hat^k E0` for `k = 0..layers`.
pub fn lightgcn_propagate(
    table: &EmbeddingTable,
    adj: &NormalizedAdjacency,
    layers: usize,
) -> Result<EmbeddingTable> {
    check_adjacency(table, adj)?;
    if layers == 0 {
        return Ok(table.clone());
    }
    let stacked = table.users.vstack(&table.items);
    let (users, items) = adj.layer_mean(&stacked, layers).split_rows(table.num_users());
    Ok(EmbeddingTable { users, items })
}

/// Pulls a gradient on propagated embeddings back onto the base table.
/// Propagation is linear with a symmetric operator, so this is the same
/// layer mean applied to the gradient.
pub fn lightgcn_backprop(
    grad: &EmbeddingTable,
    adj: &NormalizedAdjacency,
    layers: usize,
) -> Result<EmbeddingTable> {
    lightgcn_propagate(grad, adj, layers)
}

/// Final user/item representations for a given encoder.
pub fn representations<'a>(
    kind: EncoderKind,
    table: &'a EmbeddingTable,
    adj: Option<&NormalizedAdjacency>,
) -> Result<Cow<'a, EmbeddingTable>> {
    match kind {
        EncoderKind::Mf => Ok(Cow::Borrowed(table)),
        EncoderKind::LightGcn { layers } => {
            let adj = adj.ok_or_else(|| Error::Config("LightGCN needs an adjacency".into()))?;
            Ok(Cow::Owned(lightgcn_propagate(table, adj, layers)?))
        }
    }
}

/// Cached representations for repeated scoring within one evaluation pass.
#[derive(Debug, Clone)]
pub struct Scorer {
    reps: EmbeddingTable,
}

impl Scorer {
    pub fn new(kind: EncoderKind, table: &EmbeddingTable, adj: Option<&NormalizedAdjacency>) -> Result<Self> {
        Ok(Scorer {
            reps: representations(kind, table, adj)?.into_owned(),
        })
    }

    pub fn from_representations(reps: EmbeddingTable) -> Self {
        Scorer { reps }
    }

    pub fn representations(&self) -> &EmbeddingTable {
        &self.reps
    }

    pub fn num_users(&self) -> usize {
        self.reps.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.reps.num_items()
    }

    pub fn score(&self, user: usize, item: usize) -> Result<f64> {
        if user >= self.num_users() || item >= self.num_items() {
            return Err(Error::OutOfRange(format!("pair ({user}, {item})")));
        }
        cosine_similarity(self.reps.users.row(user), self.reps.items.row(item))
    }

    /// Cosine scores of `user` against every item. Zero-norm items score
    /// `-inf` so they sink to the bottom of any ranking.
    pub fn score_all(&self, user: usize, normalized_items: &Matrix) -> Result<Vec<f64>> {
        if user >= self.num_users() {
            return Err(Error::OutOfRange(format!("user {user}")));
        }
        let u = self.reps.users.row(user);
        let nu = norm(u);
        if nu <= NORM_FLOOR {
            return Err(Error::ZeroNorm(format!("user {user}")));
        }
        Ok((0..normalized_items.rows())
            .map(|i| {
                let v = normalized_items.row(i);
                if v.iter().all(|&x| x == 0.0) {
                    f64::NEG_INFINITY
                } else {
                    (dot(u, v) / nu).clamp(-1.0, 1.0)
                }
            })
            .collect())
    }
}

/// One-off score of a single pair.
pub fn score(
    kind: EncoderKind,
    table: &EmbeddingTable,
    adj: Option<&NormalizedAdjacency>,
    user: usize,
    item: usize,
) -> Result<f64> {
    if user >= table.num_users() || item >= table.num_items() {
        return Err(Error::OutOfRange(format!("pair ({user}, {item})")));
    }
    match kind {
        EncoderKind::Mf => cosine_similarity(table.users.row(user), table.items.row(item)),
        _ => Scorer::new(kind, table, adj)?.score(user, item),
    }
}

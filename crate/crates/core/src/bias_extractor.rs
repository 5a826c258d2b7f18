//! Popularity bias extractor.
//!
//! Users and items are embedded by their interaction *counts* alone. The
//! cosine between a user-count embedding and an item-count embedding is the
//! interaction's bias degree `cos(xi)`; interactions that popularity explains
//! poorly get a large angle `xi` and hence a large angular margin.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::encoders::{angle, cosine_similarity, EmbeddingTable, INIT_STD};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{softmax_loss, LossBatch, LossOutput};

/// Embedding tables keyed by popularity count. Keys are sorted ascending and
/// row `k` of each matrix belongs to key `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityEmbeddings {
    pub user_keys: Vec<usize>,
    pub user_vecs: Matrix,
    pub item_keys: Vec<usize>,
    pub item_vecs: Matrix,
}

/// Index of the key nearest to `count`; ties resolve to the smaller key.
fn nearest_key(keys: &[usize], count: usize) -> usize {
    match keys.binary_search(&count) {
        Ok(k) => k,
        Err(0) => 0,
        Err(k) if k == keys.len() => k - 1,
        Err(k) => {
            if count - keys[k - 1] <= keys[k] - count {
                k - 1
            } else {
                k
            }
        }
    }
}

fn distinct_positive(counts: &[usize]) -> Vec<usize> {
    let mut keys: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    keys.sort_unstable();
    keys.dedup();
    keys
}

impl PopularityEmbeddings {
    pub fn new(user_keys: Vec<usize>, user_vecs: Matrix, item_keys: Vec<usize>, item_vecs: Matrix) -> Result<Self> {
        let sorted = |k: &[usize]| k.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&user_keys) || !sorted(&item_keys) {
            return Err(Error::Config("popularity keys must be strictly increasing".into()));
        }
        if user_keys.is_empty() || item_keys.is_empty() {
            return Err(Error::Config("popularity tables need at least one key".into()));
        }
        if user_keys.len() != user_vecs.rows()
            || item_keys.len() != item_vecs.rows()
            || user_vecs.cols() != item_vecs.cols()
        {
            return Err(Error::DimensionMismatch("popularity keys vs tables".into()));
        }
        Ok(PopularityEmbeddings {
            user_keys,
            user_vecs,
            item_keys,
            item_vecs,
        })
    }

    /// One randomly initialized row per distinct nonzero count in `train`.
    pub fn for_dataset<R: Rng + ?Sized>(train: &Dataset, dim: usize, rng: &mut R) -> Result<Self> {
        let user_keys = distinct_positive(train.user_pop());
        let item_keys = distinct_positive(train.item_pop());
        let user_vecs = Matrix::random_normal(user_keys.len(), dim, INIT_STD, rng);
        let item_vecs = Matrix::random_normal(item_keys.len(), dim, INIT_STD, rng);
        Self::new(user_keys, user_vecs, item_keys, item_vecs)
    }

    pub fn dim(&self) -> usize {
        self.user_vecs.cols()
    }

    pub fn user_row(&self, count: usize) -> usize {
        nearest_key(&self.user_keys, count)
    }

    pub fn item_row(&self, count: usize) -> usize {
        nearest_key(&self.item_keys, count)
    }

    /// Bias degree `cos(xi)` of a (user count, item count) pair.
    pub fn bias_score(&self, p_u: usize, p_i: usize) -> Result<f64> {
        cosine_similarity(
            self.user_vecs.row(self.user_row(p_u)),
            self.item_vecs.row(self.item_row(p_i)),
        )
    }

    /// Bias angle `xi` in `[0, pi]`.
    pub fn bias_angle(&self, p_u: usize, p_i: usize) -> Result<f64> {
        angle(
            self.user_vecs.row(self.user_row(p_u)),
            self.item_vecs.row(self.item_row(p_i)),
        )
    }

    /// Maps a CF batch into popularity-key row space.
    pub fn key_batch(&self, batch: &LossBatch, user_pop: &[usize], item_pop: &[usize]) -> LossBatch {
        LossBatch {
            users: batch.users.iter().map(|&u| self.user_row(user_pop[u])).collect(),
            positives: batch.positives.iter().map(|&i| self.item_row(item_pop[i])).collect(),
            negatives: batch
                .negatives
                .iter()
                .map(|n| n.iter().map(|&j| self.item_row(item_pop[j])).collect())
                .collect(),
        }
    }

    /// Bias angles for each row of a CF batch.
    pub fn batch_angles(&self, batch: &LossBatch, user_pop: &[usize], item_pop: &[usize]) -> Result<Vec<f64>> {
        batch
            .users
            .iter()
            .zip(&batch.positives)
            .map(|(&u, &i)| self.bias_angle(user_pop[u], item_pop[i]))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.user_vecs.is_finite() && self.item_vecs.is_finite()
    }
}

/// Softmax loss over popularity-only scores at temperature `tau2`.
/// Gradients are with respect to `user_vecs` / `item_vecs` rows.
pub fn extractor_loss(
    pe: &PopularityEmbeddings,
    batch: &LossBatch,
    user_pop: &[usize],
    item_pop: &[usize],
    tau2: f64,
) -> Result<LossOutput> {
    let keyed = pe.key_batch(batch, user_pop, item_pop);
    softmax_loss(&pe.user_vecs, &pe.item_vecs, &keyed, tau2)
}

/// Angular margin `min(strength * xi, pi - theta)`, never negative.
pub fn margin(xi: f64, theta: f64, strength: f64) -> f64 {
    (strength * xi).min(PI - theta).max(0.0)
}

/// CSV with one row per training interaction:
/// `user,item,p_u,p_i,cos_xi,xi,margin`. With CF representations the margin
/// is capped at `pi - theta` as in training; without them it is `strength * xi`.
pub fn bias_report_csv(
    pe: &PopularityEmbeddings,
    train: &Dataset,
    strength: f64,
    reps: Option<&EmbeddingTable>,
) -> Result<String> {
    let mut out = String::from("user,item,p_u,p_i,cos_xi,xi,margin\n");
    for it in train.interactions() {
        let (pu, pi) = (train.user_pop()[it.user], train.item_pop()[it.item]);
        let cos = pe.bias_score(pu, pi)?;
        let xi = cos.acos();
        let m = match reps {
            Some(r) => margin(xi, angle(r.users.row(it.user), r.items.row(it.item))?, strength),
            None => (strength * xi).max(0.0),
        };
        let _ = writeln!(
            out,
            "{},{},{pu},{pi},{cos:.15e},{xi:.15e},{m:.15e}",
            train.user_ids().name(it.user),
            train.item_ids().name(it.item)
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(users: &[(usize, [f64; 2])], items: &[(usize, [f64; 2])]) -> PopularityEmbeddings {
        PopularityEmbeddings::new(
            users.iter().map(|x| x.0).collect(),
            Matrix::from_rows(&users.iter().map(|x| x.1.to_vec()).collect::<Vec<_>>()).unwrap(),
            items.iter().map(|x| x.0).collect(),
            Matrix::from_rows(&items.iter().map(|x| x.1.to_vec()).collect::<Vec<_>>()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn nearest_key_ties_to_smaller() {
        let keys = [2, 4, 10];
        assert_eq!(nearest_key(&keys, 1), 0);
        assert_eq!(nearest_key(&keys, 3), 0);
        assert_eq!(nearest_key(&keys, 4), 1);
        assert_eq!(nearest_key(&keys, 7), 1);
        assert_eq!(nearest_key(&keys, 8), 2);
        assert_eq!(nearest_key(&keys, 99), 2);
    }

    #[test]
    fn score_and_angle() {
        let pe = table(&[(1, [1.0, 0.0]), (5, [0.0, 1.0])], &[(2, [1.0, 0.0]), (3, [-1.0, 0.0])]);
        assert!((pe.bias_score(1, 2).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(pe.bias_score(5, 2).unwrap(), 0.0);
        assert_eq!(pe.bias_angle(1, 2).unwrap(), 0.0);
        assert!((pe.bias_angle(1, 3).unwrap() - PI).abs() < 1e-15);
        // unseen count 4 resolves to key 5
        assert_eq!(pe.bias_score(4, 2).unwrap(), 0.0);
    }

    #[test]
    fn zero_vector_errors() {
        let pe = table(&[(1, [0.0, 0.0])], &[(1, [1.0, 0.0])]);
        assert!(matches!(pe.bias_score(1, 1), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn margin_arms() {
        assert_eq!(margin(0.5, 1.0, 1.0), 0.5);
        assert!((margin(3.0, 1.0, 1.0) - (PI - 1.0)).abs() < 1e-15);
        assert!((margin(3.0, 1.0, 1.0) - 2.1415927).abs() < 1e-7);
        assert_eq!(margin(0.0, 2.5, 1.0), 0.0);
        assert_eq!(margin(0.5, 1.0, 2.0), 1.0);
    }

    #[test]
    fn extractor_loss_cases() {
        // user count 1 -> (1,0); item count 1 -> (1,0), item count 2 -> (1,0)
        let pe = table(&[(1, [1.0, 0.0])], &[(1, [1.0, 0.0]), (2, [-1.0, 0.0])]);
        let user_pop = [1, 1];
        let item_pop = [1, 1, 2];
        let b = LossBatch::new(vec![0], vec![0], vec![vec![1]]).unwrap();
        let out = extractor_loss(&pe, &b, &user_pop, &item_pop, 0.1).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-12);
        let b = LossBatch::new(vec![0], vec![0], vec![vec![2]]).unwrap();
        let out = extractor_loss(&pe, &b, &user_pop, &item_pop, 1.0).unwrap();
        assert!((out.value - 0.126928).abs() < 1e-6);
        let b2 = LossBatch::new(vec![0, 1], vec![0, 0], vec![vec![1], vec![2]]).unwrap();
        let out2 = extractor_loss(&pe, &b2, &user_pop, &item_pop, 1.0).unwrap();
        assert!((out2.value - (2f64.ln() + out.value)).abs() < 1e-12);
        assert!(extractor_loss(&pe, &b2, &user_pop, &item_pop, 0.0).is_err());
    }

    #[test]
    fn keys_cover_training_counts() {
        let ds = Dataset::from_pairs(3, 3, &[(0, 0), (0, 1), (1, 0), (2, 2)]).unwrap();
        let mut rng = rand::rng();
        let pe = PopularityEmbeddings::for_dataset(&ds, 4, &mut rng).unwrap();
        assert_eq!(pe.user_keys, vec![1, 2]);
        assert_eq!(pe.item_keys, vec![1, 2]);
        assert_eq!(pe.dim(), 4);
    }
}

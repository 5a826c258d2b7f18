//! Negative sampling: uniform with rejection, and in-batch.

use rand::Rng;

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Draws `n` items uniformly from `0..num_items`, rejecting the user's
/// `positives` (sorted ascending). Accepted items may repeat.
pub fn sample_negatives<R: Rng + ?Sized>(
    user: usize,
    n: usize,
    positives: &[usize],
    num_items: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if positives.len() >= num_items {
        return Err(Error::NoNegatives(user));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let j = rng.random_range(0..num_items);
        if positives.binary_search(&j).is_err() {
            out.push(j);
        }
    }
    Ok(out)
}

/// For each batch row, the distinct positive items of the *other* rows that
/// are not among this row's user's training positives. Rows may come back
/// empty.
pub fn in_batch_negatives(users: &[usize], positives: &[usize], train: &Dataset) -> Result<Vec<Vec<usize>>> {
    if users.len() < 2 {
        return Err(Error::Config("in-batch negatives need a batch of at least 2".into()));
    }
    let mut distinct = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for &i in positives {
        if seen.insert(i) {
            distinct.push(i);
        }
    }
    Ok(users
        .iter()
        .map(|&u| distinct.iter().copied().filter(|&j| !train.contains(u, j)).collect())
        .collect())
}

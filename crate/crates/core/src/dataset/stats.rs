use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// KL divergence (nats) from the empirical distribution of `counts` to the
/// uniform distribution over all `counts.len()` entries.
pub fn kl_divergence_uniform(counts: &[usize]) -> Result<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Config(
            "KL divergence needs at least one nonzero count".into(),
        ));
    }
    let n = counts.len() as f64;
    let total = total as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            p * (p * n).ln()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Popularity third an item (or user) falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subgroup {
    Head,
    Mid,
    Tail,
}

impl Subgroup {
    pub const ALL: [Subgroup; 3] = [Subgroup::Head, Subgroup::Mid, Subgroup::Tail];

    pub fn as_str(self) -> &'static str {
        match self {
            Subgroup::Head => "head",
            Subgroup::Mid => "mid",
            Subgroup::Tail => "tail",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Labels entries by popularity thirds: the top `ceil(n/3)` by descending
/// count are head, the next `ceil(n/3)` mid, the rest tail. Ties go to the
/// lower index first.
pub fn subgroup_partition(pop: &[usize]) -> Vec<Subgroup> {
    let n = pop.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pop[b].cmp(&pop[a]).then(a.cmp(&b)));
    let third = n.div_ceil(3);
    let mut labels = vec![Subgroup::Tail; n];
    for (rank, &idx) in order.iter().enumerate() {
        labels[idx] = if rank < third {
            Subgroup::Head
        } else if rank < (2 * third).min(n) {
            Subgroup::Mid
        } else {
            Subgroup::Tail
        };
    }
    labels
}

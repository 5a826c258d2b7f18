use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Interaction};
use crate::error::{Error, Result};

/// Fractions of the *source* total. The balanced test is drawn first; the
/// remainder is divided among train/validation/imbalanced-test in the ratio
/// `train : validation : test`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub balanced: f64,
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            balanced: 0.15,
            train: 0.60,
            validation: 0.10,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("balanced", self.balanced),
            ("train", self.train),
            ("validation", self.validation),
            ("test", self.test),
        ];
        for (name, f) in all {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!(
                    "{name} fraction {f} must lie in [0, 1)"
                )));
            }
        }
        if self.train <= 0.0 {
            return Err(Error::Config("train fraction must be positive".into()));
        }
        let sum = self.balanced + self.train + self.validation + self.test;
        if sum > 1.0 + 1e-9 {
            return Err(Error::Config(format!("fractions sum to {sum} > 1")));
        }
        Ok(())
    }
}

/// Temporal slicing ratios, normalized internally.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for TemporalRatios {
    fn default() -> Self {
        TemporalRatios {
            train: 7.0,
            validation: 1.0,
            test: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMember {
    Train,
    Validation,
    TestImbalanced,
    TestBalanced,
    TestTemporal,
}

impl SplitMember {
    pub const ALL: [SplitMember; 5] = [
        SplitMember::Train,
        SplitMember::Validation,
        SplitMember::TestImbalanced,
        SplitMember::TestBalanced,
        SplitMember::TestTemporal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitMember::Train => "train",
            SplitMember::Validation => "validation",
            SplitMember::TestImbalanced => "test_imbalanced",
            SplitMember::TestBalanced => "test_balanced",
            SplitMember::TestTemporal => "test_temporal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

/// Disjoint partition of one dataset's interactions. All members share the
/// source id space.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub validation: Dataset,
    pub test_imbalanced: Option<Dataset>,
    pub test_balanced: Option<Dataset>,
    pub test_temporal: Option<Dataset>,
}

impl DataSplit {
    pub fn member(&self, m: SplitMember) -> Option<&Dataset> {
        match m {
            SplitMember::Train => Some(&self.train),
            SplitMember::Validation => Some(&self.validation),
            SplitMember::TestImbalanced => self.test_imbalanced.as_ref(),
            SplitMember::TestBalanced => self.test_balanced.as_ref(),
            SplitMember::TestTemporal => self.test_temporal.as_ref(),
        }
    }

    pub fn members(&self) -> impl Iterator<Item = (SplitMember, &Dataset)> {
        SplitMember::ALL
            .into_iter()
            .filter_map(|m| self.member(m).map(|d| (m, d)))
    }
}

fn take(ds: &Dataset, mut idx: Vec<usize>) -> Result<Dataset> {
    idx.sort_unstable();
    ds.with_interactions(idx.into_iter().map(|i| ds.interactions()[i]).collect())
}

/// Random split with an item-balanced test set.
///
/// The balanced test repeatedly picks an item uniformly among items that
/// still have unassigned interactions, then one of that item's remaining
/// interactions uniformly. The rest is shuffled and cut by ratio.
pub fn split_random(ds: &Dataset, fractions: SplitFractions, seed: u64) -> Result<DataSplit> {
    fractions.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ds.len();
    let n_balanced = (fractions.balanced * n as f64).round() as usize;

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); ds.num_items()];
    for (idx, it) in ds.interactions().iter().enumerate() {
        pools[it.item].push(idx);
    }
    let mut active: Vec<usize> = (0..ds.num_items()).filter(|&i| !pools[i].is_empty()).collect();
    let mut taken = vec![false; n];
    let mut balanced = Vec::with_capacity(n_balanced);
    while balanced.len() < n_balanced && !active.is_empty() {
        let slot = rng.random_range(0..active.len());
        let pool = &mut pools[active[slot]];
        let pick = rng.random_range(0..pool.len());
        let idx = pool.swap_remove(pick);
        if pool.is_empty() {
            active.swap_remove(slot);
        }
        taken[idx] = true;
        balanced.push(idx);
    }

    let mut rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    rest.shuffle(&mut rng);
    let ratio_sum = fractions.train + fractions.validation + fractions.test;
    let r = rest.len() as f64;
    let n_train = (r * fractions.train / ratio_sum).round() as usize;
    let n_val = ((r * fractions.validation / ratio_sum).round() as usize).min(rest.len() - n_train);
    let test = rest.split_off(n_train + n_val);
    let val = rest.split_off(n_train);
    let train = rest;

    Ok(DataSplit {
        train: take(ds, train)?,
        validation: take(ds, val)?,
        test_imbalanced: if test.is_empty() { None } else { Some(take(ds, test)?) },
        test_balanced: if balanced.is_empty() { None } else { Some(take(ds, balanced)?) },
        test_temporal: None,
    })
}

/// Chronological split: the earliest interactions train, then validation,
/// then test. Equal timestamps keep input order.
pub fn split_temporal(ds: &Dataset, ratios: TemporalRatios) -> Result<DataSplit> {
    let sum = ratios.train + ratios.validation + ratios.test;
    if !(ratios.train > 0.0 && ratios.validation >= 0.0 && ratios.test >= 0.0 && sum.is_finite()) {
        return Err(Error::Config(format!("invalid temporal ratios {ratios:?}")));
    }
    let mut keyed = Vec::with_capacity(ds.len());
    for (idx, it) in ds.interactions().iter().enumerate() {
        let ts = it.timestamp.ok_or_else(|| Error::MissingTimestamp {
            index: idx,
            user: ds.user_ids().name(it.user).to_string(),
            item: ds.item_ids().name(it.item).to_string(),
        })?;
        keyed.push((ts, idx));
    }
    // stable sort keeps input order among ties
    keyed.sort_by_key(|&(ts, _)| ts);
    let order: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
    let n = order.len() as f64;
    let n_train = (n * ratios.train / sum).round() as usize;
    let n_val = ((n * ratios.validation / sum).round() as usize).min(order.len() - n_train);

    let slice = |range: &[usize]| -> Result<Dataset> {
        ds.with_interactions(range.iter().map(|&i| ds.interactions()[i]).collect::<Vec<Interaction>>())
    };
    Ok(DataSplit {
        train: slice(&order[..n_train])?,
        validation: slice(&order[n_train..n_train + n_val])?,
        test_imbalanced: None,
        test_balanced: None,
        test_temporal: Some(slice(&order[n_train + n_val..])?),
    })
}

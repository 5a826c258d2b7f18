//! Implicit-feedback interaction logs: loading, k-core filtering, splitting,
//! popularity statistics and distribution diagnostics.

mod io;
mod split;
mod stats;

pub use io::{
    load_interactions, load_interactions_with_ids, read_split, write_interactions, write_split, Delimiter, MemberEntry,
    SplitManifest,
};
pub use split::{split_random, split_temporal, DataSplit, SplitFractions, SplitMember, TemporalRatios};
pub use stats::{kl_divergence_uniform, subgroup_partition, Subgroup};

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed (user, item) pair in dense index space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: Option<i64>,
}

impl Interaction {
    pub fn new(user: usize, item: usize) -> Self {
        Interaction {
            user,
            item,
            timestamp: None,
        }
    }

    pub fn with_timestamp(user: usize, item: usize, timestamp: i64) -> Self {
        Interaction {
            user,
            item,
            timestamp: Some(timestamp),
        }
    }
}

/// Bidirectional map between raw string identifiers and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate identifier {n:?} in id map")));
            }
        }
        Ok(IdMap { names, index })
    }

    /// Dense ids `"0".."n-1"`, used for generated data.
    pub fn sequential(n: usize) -> Self {
        Self::from_names((0..n).map(|i| i.to_string()).collect()).expect("sequential names are unique")
    }

    /// Returns the index for `name`, assigning the next one if unseen.
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Immutable interaction log with popularity statistics.
///
/// `user_positives[u]` and `item_positives[i]` are sorted ascending so
/// membership checks are binary searches.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_users: usize,
    num_items: usize,
    interactions: Vec<Interaction>,
    user_pop: Vec<usize>,
    item_pop: Vec<usize>,
    user_positives: Vec<Vec<usize>>,
    item_positives: Vec<Vec<usize>>,
    user_ids: Arc<IdMap>,
    item_ids: Arc<IdMap>,
}

impl Dataset {
    /// Builds a dataset, validating ranges and pair uniqueness.
    pub fn new(
        interactions: Vec<Interaction>,
        user_ids: Arc<IdMap>,
        item_ids: Arc<IdMap>,
    ) -> Result<Self> {
        let num_users = user_ids.len();
        let num_items = item_ids.len();
        let mut seen = HashSet::with_capacity(interactions.len());
        let mut user_pop = vec![0; num_users];
        let mut item_pop = vec![0; num_items];
        let mut user_positives = vec![Vec::new(); num_users];
        let mut item_positives = vec![Vec::new(); num_items];
        for (idx, it) in interactions.iter().enumerate() {
            if it.user >= num_users || it.item >= num_items {
                return Err(Error::OutOfRange(format!(
                    "interaction #{idx} ({}, {}) outside {num_users} users x {num_items} items",
                    it.user, it.item
                )));
            }
            if !seen.insert((it.user, it.item)) {
                return Err(Error::Invariant(format!(
                    "duplicate interaction ({}, {})",
                    it.user, it.item
                )));
            }
            user_pop[it.user] += 1;
            item_pop[it.item] += 1;
            user_positives[it.user].push(it.item);
            item_positives[it.item].push(it.user);
        }
        user_positives.iter_mut().for_each(|v| v.sort_unstable());
        item_positives.iter_mut().for_each(|v| v.sort_unstable());
        Ok(Dataset {
            num_users,
            num_items,
            interactions,
            user_pop,
            item_pop,
            user_positives,
            item_positives,
            user_ids,
            item_ids,
        })
    }

    /// Dataset over sequential ids `0..num_users`, `0..num_items`.
    pub fn from_pairs(num_users: usize, num_items: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        Self::new(
            pairs.iter().map(|&(u, i)| Interaction::new(u, i)).collect(),
            Arc::new(IdMap::sequential(num_users)),
            Arc::new(IdMap::sequential(num_items)),
        )
    }

    /// A dataset sharing this one's id space but holding other interactions.
    pub fn with_interactions(&self, interactions: Vec<Interaction>) -> Result<Self> {
        Self::new(interactions, self.user_ids.clone(), self.item_ids.clone())
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn user_pop(&self) -> &[usize] {
        &self.user_pop
    }

    pub fn item_pop(&self) -> &[usize] {
        &self.item_pop
    }

    pub fn user_positives(&self, user: usize) -> &[usize] {
        &self.user_positives[user]
    }

    pub fn item_positives(&self, item: usize) -> &[usize] {
        &self.item_positives[item]
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.user_positives
            .get(user)
            .is_some_and(|p| p.binary_search(&item).is_ok())
    }

    pub fn user_ids(&self) -> &Arc<IdMap> {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &Arc<IdMap> {
        &self.item_ids
    }

    pub fn has_timestamps(&self) -> bool {
        self.interactions.iter().all(|it| it.timestamp.is_some())
    }

    /// Iteratively removes users and items with fewer than `k` interactions
    /// until every survivor has at least `k`, then re-densifies the ids
    /// (survivors keep their relative order).
    pub fn k_core_filter(&self, k: usize) -> Result<Dataset> {
        if k == 0 {
            return Err(Error::Config("k-core requires k >= 1".into()));
        }
        let mut alive: Vec<bool> = vec![true; self.interactions.len()];
        let mut user_deg = self.user_pop.clone();
        let mut item_deg = self.item_pop.clone();
        loop {
            let mut changed = false;
            for (idx, it) in self.interactions.iter().enumerate() {
                if alive[idx] && (user_deg[it.user] < k || item_deg[it.item] < k) {
                    alive[idx] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            user_deg.iter_mut().for_each(|d| *d = 0);
            item_deg.iter_mut().for_each(|d| *d = 0);
            for (idx, it) in self.interactions.iter().enumerate() {
                if alive[idx] {
                    user_deg[it.user] += 1;
                    item_deg[it.item] += 1;
                }
            }
        }

        let mut user_remap = vec![usize::MAX; self.num_users];
        let mut item_remap = vec![usize::MAX; self.num_items];
        let mut user_names = Vec::new();
        let mut item_names = Vec::new();
        for u in 0..self.num_users {
            if user_deg[u] > 0 {
                user_remap[u] = user_names.len();
                user_names.push(self.user_ids.name(u).to_string());
            }
        }
        for i in 0..self.num_items {
            if item_deg[i] > 0 {
                item_remap[i] = item_names.len();
                item_names.push(self.item_ids.name(i).to_string());
            }
        }
        let kept = self
            .interactions
            .iter()
            .zip(&alive)
            .filter(|(_, &a)| a)
            .map(|(it, _)| Interaction {
                user: user_remap[it.user],
                item: item_remap[it.item],
                timestamp: it.timestamp,
            })
            .collect();
        Dataset::new(
            kept,
            Arc::new(IdMap::from_names(user_names)?),
            Arc::new(IdMap::from_names(item_names)?),
        )
    }
}

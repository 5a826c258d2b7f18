//! Synthetic long-tail interaction data with a controllable popularity bias.
//!
//! Users and items get standard-normal latent factors. The preference weight
//! of a pair is `exp(sharpness * <u, v> / sqrt(k))`. Each item also has a base
//! popularity from a Zipf law over a random rank order.
//!
//! An interaction is observed when the item is both relevant and exposed.
//! Per user, a relevant pool is drawn without replacement in proportion to
//! preference. The observed pairs are drawn from the pool in proportion to
//! `popularity^bias_strength`, so the chance of observing an item scales with
//! `preference * popularity^bias_strength`. The ground truth is a uniform
//! draw from the unobserved rest of the pool. With zero bias strength both
//! draws are uniform over the same pool and share one distribution.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample_weighted;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{kl_divergence_uniform, write_interactions, Dataset, Delimiter, IdMap, Interaction};
use crate::error::{Error, Result};
use crate::linalg::dot;

pub const OBSERVED_FILE: &str = "observed.tsv";
pub const TRUTH_FILE: &str = "truth.tsv";
pub const SYNTH_MANIFEST: &str = "synth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub latent_dim: usize,
    /// Zipf exponent of base item popularity.
    pub popularity_exponent: f64,
    /// Exposure bias strength; 0 removes popularity from observation.
    pub bias_strength: f64,
    /// Scale of latent preference; 0 makes observation popularity-only.
    pub preference_sharpness: f64,
    pub min_per_user: usize,
    pub max_per_user: usize,
    /// Relevant-pool size per user as a multiple of that user's observed count.
    pub relevant_ratio: f64,
    /// Ground-truth pairs per user as a multiple of that user's observed count.
    pub truth_ratio: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_users: 200,
            num_items: 300,
            latent_dim: 8,
            popularity_exponent: 1.2,
            bias_strength: 1.0,
            preference_sharpness: 2.0,
            min_per_user: 10,
            max_per_user: 30,
            relevant_ratio: 3.0,
            truth_ratio: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn truth_count(&self, observed: usize) -> usize {
        (self.truth_ratio * observed as f64).round() as usize
    }

    fn relevant_count(&self, observed: usize) -> usize {
        let r = (self.relevant_ratio * observed as f64).round() as usize;
        r.max(observed + self.truth_count(observed))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_users < 2 || self.num_items < 2 {
            return bad(format!("need at least 2 users and 2 items, got {}x{}", self.num_users, self.num_items));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1".into());
        }
        for (name, v) in [
            ("popularity_exponent", self.popularity_exponent),
            ("bias_strength", self.bias_strength),
            ("preference_sharpness", self.preference_sharpness),
            ("truth_ratio", self.truth_ratio),
            ("relevant_ratio", self.relevant_ratio),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.min_per_user == 0 || self.min_per_user > self.max_per_user {
            return bad(format!(
                "per-user range [{}, {}] is empty or starts at 0",
                self.min_per_user, self.max_per_user
            ));
        }
        if self.relevant_ratio < 1.0 {
            return bad(format!("relevant_ratio must be >= 1, got {}", self.relevant_ratio));
        }
        if self.relevant_count(self.max_per_user) > self.num_items {
            return bad(format!(
                "{} items cannot hold a relevant pool for {} observed pairs per user",
                self.num_items, self.max_per_user
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub observed: Dataset,
    pub truth: Dataset,
    /// Normalized base popularity per item.
    pub popularity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub schema_version: u32,
    pub config: SynthConfig,
    pub observed_interactions: usize,
    pub truth_interactions: usize,
    pub observed_item_kl: Option<f64>,
    pub truth_item_kl: Option<f64>,
    pub kl_unit: String,
    pub files: Vec<String>,
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.latent_dim;
    let users = normals(&mut rng, cfg.num_users * k);
    let items = normals(&mut rng, cfg.num_items * k);

    let mut ranks: Vec<usize> = (1..=cfg.num_items).collect();
    ranks.shuffle(&mut rng);
    let raw: Vec<f64> = ranks.iter().map(|&r| (r as f64).powf(-cfg.popularity_exponent)).collect();
    let total: f64 = raw.iter().sum();
    let popularity: Vec<f64> = raw.iter().map(|p| p / total).collect();
    let exposure: Vec<f64> = popularity.iter().map(|p| p.powf(cfg.bias_strength)).collect();

    let scale = cfg.preference_sharpness / (k as f64).sqrt();
    let mut observed = Vec::new();
    let mut truth = Vec::new();
    for u in 0..cfg.num_users {
        let uv = &users[u * k..(u + 1) * k];
        let pref: Vec<f64> = (0..cfg.num_items)
            .map(|i| (scale * dot(uv, &items[i * k..(i + 1) * k])).exp())
            .collect();
        let n_obs = rng.random_range(cfg.min_per_user..=cfg.max_per_user);
        let n_rel = cfg.relevant_count(n_obs);
        let relevant: Vec<usize> = sample_weighted(&mut rng, cfg.num_items, |i| pref[i], n_rel)
            .map_err(|e| Error::Numerical(format!("preference weights: {e}")))?
            .into_iter()
            .collect();
        let picked = sample_weighted(&mut rng, n_rel, |k| exposure[relevant[k]], n_obs)
            .map_err(|e| Error::Numerical(format!("exposure weights: {e}")))?;
        let mut exposed = vec![false; n_rel];
        for k in picked {
            exposed[k] = true;
        }
        let mut obs = Vec::with_capacity(n_obs);
        let mut rest = Vec::with_capacity(n_rel - n_obs);
        for (k, &i) in relevant.iter().enumerate() {
            if exposed[k] {
                obs.push(i);
            } else {
                rest.push(i);
            }
        }
        let mut gt: Vec<usize> = rest.choose_multiple(&mut rng, cfg.truth_count(n_obs)).copied().collect();
        obs.sort_unstable();
        gt.sort_unstable();
        observed.extend(obs.into_iter().map(|i| Interaction::new(u, i)));
        truth.extend(gt.into_iter().map(|i| Interaction::new(u, i)));
    }
    let user_ids = Arc::new(IdMap::sequential(cfg.num_users));
    let item_ids = Arc::new(IdMap::sequential(cfg.num_items));
    Ok(SyntheticData {
        observed: Dataset::new(observed, user_ids.clone(), item_ids.clone())?,
        truth: Dataset::new(truth, user_ids, item_ids)?,
        popularity,
    })
}

/// Writes `observed.tsv`, `truth.tsv` and `synth.json` into `dir`.
pub fn write(data: &SyntheticData, cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<SynthManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_interactions(&data.observed, dir.join(OBSERVED_FILE), Delimiter::default())?;
    write_interactions(&data.truth, dir.join(TRUTH_FILE), Delimiter::default())?;
    let manifest = SynthManifest {
        schema_version: 1,
        config: cfg.clone(),
        observed_interactions: data.observed.len(),
        truth_interactions: data.truth.len(),
        observed_item_kl: kl_divergence_uniform(data.observed.item_pop()).ok(),
        truth_item_kl: kl_divergence_uniform(data.truth.item_pop()).ok(),
        kl_unit: "nats".into(),
        files: vec![OBSERVED_FILE.into(), TRUTH_FILE.into(), SYNTH_MANIFEST.into()],
    };
    let path = dir.join(SYNTH_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

//! Mini-batch training with Adam, negative sampling, joint bias-extractor
//! optimization and early stopping on validation Recall@20.

mod adam;
mod early_stop;
mod sampling;

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use early_stop::{EarlyStopping, Verdict};
pub use sampling::{in_batch_negatives, sample_negatives};

use std::fmt::Write as _;
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bias_extractor::{extractor_loss, margin, PopularityEmbeddings};
use crate::dataset::{DataSplit, Dataset, Interaction, Subgroup};
use crate::encoders::{lightgcn_backprop, lightgcn_propagate, EmbeddingTable, EncoderKind, NormalizedAdjacency, Scorer};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, DEFAULT_K};
use crate::losses::{
    bc_loss, bpr_loss, default_ips_clip, ips_cn_weights, l2_penalty, positive_angles, softmax_loss,
    weighted_softmax_loss, Gradients, LossBatch, RowGrads,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Softmax,
    Bc,
    Bpr,
    IpsCnBpr,
    IpsCnSoftmax,
}

impl LossKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "softmax" => LossKind::Softmax,
            "bc" => LossKind::Bc,
            "bpr" => LossKind::Bpr,
            "ips_cn" | "ips-cn" | "ips_cn_bpr" | "ips-cn-bpr" => LossKind::IpsCnBpr,
            "ips_cn_softmax" | "ips-cn-softmax" => LossKind::IpsCnSoftmax,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::Bc => "bc",
            LossKind::Bpr => "bpr",
            LossKind::IpsCnBpr => "ips_cn_bpr",
            LossKind::IpsCnSoftmax => "ips_cn_softmax",
        }
    }

    fn pairwise(self) -> bool {
        matches!(self, LossKind::Bpr | LossKind::IpsCnBpr)
    }
}

/// How the bias extractor and the CF model are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Both losses minimized on every batch.
    Joint,
    /// Extractor trained to convergence and frozen before CF training.
    TwoPhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// Sampled for MF, in-batch for LightGCN.
    Auto,
    Sampled,
    InBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub dim: usize,
    pub reg: f64,
    /// Also apply `reg` to popularity embeddings.
    pub reg_popularity: bool,
    pub tau1: f64,
    pub tau2: f64,
    pub num_negatives: usize,
    pub negative_sampling: NegativeSampling,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub margin_strength: f64,
    pub schedule: Schedule,
    /// IPS clip; defaults to ten times the median raw weight.
    pub ips_clip: Option<f64>,
    /// Reuse one LightGCN propagation for every batch of an epoch.
    pub cached_propagation: bool,
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 2048,
            dim: 64,
            reg: 1e-5,
            reg_popularity: true,
            tau1: 0.08,
            tau2: 0.1,
            num_negatives: 128,
            negative_sampling: NegativeSampling::Auto,
            patience: 10,
            max_epochs: 1000,
            seed: 2022,
            loss: LossKind::Bc,
            margin_strength: 1.0,
            schedule: Schedule::Joint,
            ips_clip: None,
            cached_propagation: false,
            eval_k: DEFAULT_K,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {x}")))
            }
        };
        pos("lr", self.lr)?;
        pos("tau1", self.tau1)?;
        pos("tau2", self.tau2)?;
        pos("margin_strength", self.margin_strength)?;
        if !(self.reg >= 0.0) {
            return Err(Error::Config(format!("reg must be >= 0, got {}", self.reg)));
        }
        if self.batch_size == 0 || self.dim == 0 || self.max_epochs == 0 || self.eval_k == 0 {
            return Err(Error::Config("batch_size, dim, max_epochs and eval_k must be >= 1".into()));
        }
        if let Some(c) = self.ips_clip {
            pos("ips_clip", c)?;
        }
        Ok(())
    }

    fn uses_in_batch(&self, kind: EncoderKind) -> bool {
        !self.loss.pairwise()
            && match self.negative_sampling {
                NegativeSampling::InBatch => true,
                NegativeSampling::Sampled => false,
                NegativeSampling::Auto => matches!(kind, EncoderKind::LightGcn { .. }),
            }
    }
}

/// Trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: EncoderKind,
    pub table: EmbeddingTable,
    pub extractor: Option<PopularityEmbeddings>,
}

impl Model {
    pub fn scorer(&self, adj: Option<&NormalizedAdjacency>) -> Result<Scorer> {
        Scorer::new(self.kind, &self.table, adj)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub extractor_loss: Option<f64>,
    pub val_recall: f64,
    pub val_ndcg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Diverged { epoch: usize, message: String },
}

/// Outcome of the extractor pre-training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorPhase {
    pub epochs: usize,
    pub best_epoch: usize,
    pub train_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_recall: f64,
    pub stop_reason: StopReason,
    pub wall_time_secs: f64,
    pub extractor_phase: Option<ExtractorPhase>,
}

impl TrainReport {
    /// `epoch,train_loss,extractor_loss,val_recall,val_ndcg`
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,extractor_loss,val_recall,val_ndcg\n");
        for e in &self.epochs {
            let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.12e}"));
            let _ = writeln!(
                out,
                "{},{:.12e},{},{:.12e},{}",
                e.epoch,
                e.train_loss,
                opt(e.extractor_loss),
                e.val_recall,
                opt(e.val_ndcg)
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainReport,
}

/// Validation signal for early stopping: `(recall, optional ndcg)`.
pub trait Validator {
    fn validate(&mut self, epoch: usize, model: &Model, adj: Option<&NormalizedAdjacency>) -> Result<(f64, Option<f64>)>;
}

/// All-ranking Recall@K / NDCG@K on a validation set.
pub struct RecallValidator<'a> {
    pub train: &'a Dataset,
    pub validation: &'a Dataset,
    pub k: usize,
}

impl Validator for RecallValidator<'_> {
    fn validate(&mut self, _epoch: usize, model: &Model, adj: Option<&NormalizedAdjacency>) -> Result<(f64, Option<f64>)> {
        if self.validation.is_empty() {
            return Ok((0.0, None));
        }
        let labels = vec![Subgroup::Head; self.train.num_items()];
        let r = evaluate(&model.scorer(adj)?, self.train, self.validation, &labels, self.k, "validation")?;
        Ok((r.overall.recall.unwrap_or(0.0), r.overall.ndcg))
    }
}

impl<F> Validator for F
where
    F: FnMut(usize, &Model) -> f64,
{
    fn validate(&mut self, epoch: usize, model: &Model, _adj: Option<&NormalizedAdjacency>) -> Result<(f64, Option<f64>)> {
        Ok((self(epoch, model), None))
    }
}

/// Per-batch training state.
pub struct Trainer<'a> {
    train: &'a Dataset,
    config: TrainConfig,
    adj: Option<NormalizedAdjacency>,
    rng: ChaCha8Rng,
    model: Model,
    adam_users: AdamState,
    adam_items: AdamState,
    adam_pop: Option<(AdamState, AdamState)>,
    ips_clip: f64,
    extractor_frozen: bool,
    cached_reps: Option<EmbeddingTable>,
}

impl<'a> Trainer<'a> {
    pub fn new(train: &'a Dataset, kind: EncoderKind, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let table = EmbeddingTable::random(train.num_users(), train.num_items(), config.dim, &mut rng);
        let extractor = match config.loss {
            LossKind::Bc => Some(PopularityEmbeddings::for_dataset(train, config.dim, &mut rng)?),
            _ => None,
        };
        let adj = match kind {
            EncoderKind::Mf => None,
            EncoderKind::LightGcn { .. } => Some(NormalizedAdjacency::from_dataset(train)),
        };
        let items: Vec<usize> = train.interactions().iter().map(|it| it.item).collect();
        let ips_clip = config.ips_clip.unwrap_or_else(|| default_ips_clip(train.item_pop(), &items));
        Ok(Trainer {
            train,
            adam_users: AdamState::for_matrix(&table.users),
            adam_items: AdamState::for_matrix(&table.items),
            adam_pop: extractor
                .as_ref()
                .map(|pe| (AdamState::for_matrix(&pe.user_vecs), AdamState::for_matrix(&pe.item_vecs))),
            model: Model { kind, table, extractor },
            config,
            adj,
            rng,
            ips_clip,
            extractor_frozen: false,
            cached_reps: None,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn adjacency(&self) -> Option<&NormalizedAdjacency> {
        self.adj.as_ref()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn freeze_extractor(&mut self, frozen: bool) {
        self.extractor_frozen = frozen;
    }

    /// Negatives for the rows of one batch, per the configured strategy.
    pub fn negatives_for(&mut self, users: &[usize], positives: &[usize]) -> Result<Vec<Vec<usize>>> {
        if self.config.uses_in_batch(self.model.kind) {
            return in_batch_negatives(users, positives, self.train);
        }
        let n = if self.config.loss.pairwise() { 1 } else { self.config.num_negatives };
        users
            .iter()
            .map(|&u| {
                match sample_negatives(u, n, self.train.user_positives(u), self.train.num_items(), &mut self.rng) {
                    Err(Error::NoNegatives(_)) => Ok(Vec::new()),
                    other => other,
                }
            })
            .collect()
    }

    /// Builds the loss batch for a chunk of interactions, dropping rows that
    /// end up without negatives.
    pub fn build_batch(&mut self, chunk: &[Interaction]) -> Result<Option<LossBatch>> {
        if chunk.len() < 2 && self.config.uses_in_batch(self.model.kind) {
            return Ok(None);
        }
        let users: Vec<usize> = chunk.iter().map(|it| it.user).collect();
        let positives: Vec<usize> = chunk.iter().map(|it| it.item).collect();
        let negatives = self.negatives_for(&users, &positives)?;
        let batch = LossBatch::new(users, positives, negatives)?;
        let keep: Vec<bool> = batch.negatives.iter().map(|n| !n.is_empty()).collect();
        let batch = if keep.iter().all(|&k| k) { batch } else { batch.retain_rows(&keep) };
        Ok((!batch.is_empty()).then_some(batch))
    }

    fn current_reps(&self) -> Result<std::borrow::Cow<'_, EmbeddingTable>> {
        if let Some(c) = &self.cached_reps {
            return Ok(std::borrow::Cow::Borrowed(c));
        }
        match (self.model.kind, &self.adj) {
            (EncoderKind::LightGcn { layers }, Some(adj)) => {
                Ok(std::borrow::Cow::Owned(lightgcn_propagate(&self.model.table, adj, layers)?))
            }
            _ => Ok(std::borrow::Cow::Borrowed(&self.model.table)),
        }
    }

    /// CF loss (plus extractor loss in joint BC mode) for one batch, with
    /// gradients on the base embedding table and the popularity tables.
    pub fn batch_loss(&self, batch: &LossBatch) -> Result<(f64, Option<f64>, Gradients, Option<Gradients>)> {
        let reps = self.current_reps()?;
        let (users, items) = (&reps.users, &reps.items);
        let train = self.train;
        let cf = match self.config.loss {
            LossKind::Softmax => softmax_loss(users, items, batch, self.config.tau1)?,
            LossKind::Bpr => bpr_loss(users, items, batch, None)?,
            LossKind::IpsCnBpr => {
                let w = ips_cn_weights(train.item_pop(), &batch.positives, self.ips_clip)?;
                bpr_loss(users, items, batch, Some(&w))?
            }
            LossKind::IpsCnSoftmax => {
                let w = ips_cn_weights(train.item_pop(), &batch.positives, self.ips_clip)?;
                weighted_softmax_loss(users, items, batch, self.config.tau1, &w)?
            }
            LossKind::Bc => {
                let pe = self.model.extractor.as_ref().expect("BC training carries an extractor");
                let thetas = positive_angles(users, items, batch)?;
                let xis = pe.batch_angles(batch, train.user_pop(), train.item_pop())?;
                let margins: Vec<f64> = xis
                    .iter()
                    .zip(&thetas)
                    .map(|(&xi, &theta)| margin(xi, theta, self.config.margin_strength))
                    .collect();
                bc_loss(users, items, batch, &margins, self.config.tau1)?
            }
        };
        let mut value = cf.value;
        let mut grads = cf.grads;
        if let (EncoderKind::LightGcn { layers }, Some(adj)) = (self.model.kind, &self.adj) {
            let dense = EmbeddingTable {
                users: grads.users.to_dense(train.num_users()),
                items: grads.items.to_dense(train.num_items()),
            };
            let back = lightgcn_backprop(&dense, adj, layers)?;
            grads = Gradients {
                users: RowGrads::from_dense(&back.users),
                items: RowGrads::from_dense(&back.items),
            };
        }

        let touched_items: Vec<usize> = batch
            .positives
            .iter()
            .chain(batch.negatives.iter().flatten())
            .copied()
            .collect();
        let (ru, gu) = l2_penalty(&self.model.table.users, &batch.users, self.config.reg)?;
        let (ri, gi) = l2_penalty(&self.model.table.items, &touched_items, self.config.reg)?;
        value += ru + ri;
        grads.users.merge(&gu);
        grads.items.merge(&gi);

        let mut ext_value = None;
        let mut ext_grads = None;
        if let (Some(pe), false) = (&self.model.extractor, self.extractor_frozen) {
            let out = extractor_loss(pe, batch, train.user_pop(), train.item_pop(), self.config.tau2)?;
            let mut g = out.grads;
            let mut v = out.value;
            if self.config.reg_popularity {
                let keyed = pe.key_batch(batch, train.user_pop(), train.item_pop());
                let key_items: Vec<usize> = keyed
                    .positives
                    .iter()
                    .chain(keyed.negatives.iter().flatten())
                    .copied()
                    .collect();
                let (pu, gpu) = l2_penalty(&pe.user_vecs, &keyed.users, self.config.reg)?;
                let (pi, gpi) = l2_penalty(&pe.item_vecs, &key_items, self.config.reg)?;
                v += pu + pi;
                g.users.merge(&gpu);
                g.items.merge(&gpi);
            }
            ext_value = Some(v);
            ext_grads = Some(g);
        }
        Ok((value, ext_value, grads, ext_grads))
    }

    /// Applies already-computed gradients with Adam.
    pub fn apply(&mut self, grads: &Gradients, ext_grads: Option<&Gradients>) -> Result<()> {
        if !grads.is_finite() || !ext_grads.is_none_or(Gradients::is_finite) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        let lr = self.config.lr;
        self.adam_users.step(&mut self.model.table.users, &grads.users, lr)?;
        self.adam_items.step(&mut self.model.table.items, &grads.items, lr)?;
        if let (Some(g), Some(pe), Some((au, ai))) = (ext_grads, self.model.extractor.as_mut(), self.adam_pop.as_mut()) {
            au.step(&mut pe.user_vecs, &g.users, lr)?;
            ai.step(&mut pe.item_vecs, &g.items, lr)?;
        }
        Ok(())
    }

    /// One optimizer step on a chunk of interactions. Returns the CF and
    /// extractor loss values, or `None` when the chunk yielded no rows.
    pub fn step(&mut self, chunk: &[Interaction]) -> Result<Option<(f64, Option<f64>)>> {
        let Some(batch) = self.build_batch(chunk)? else {
            return Ok(None);
        };
        let (value, ext_value, grads, ext_grads) = self.batch_loss(&batch)?;
        if !value.is_finite() || ext_value.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("loss diverged ({value}, {ext_value:?})")));
        }
        self.apply(&grads, ext_grads.as_ref())?;
        Ok(Some((value, ext_value)))
    }

    /// One pass over shuffled training interactions. Returns summed losses.
    pub fn run_epoch(&mut self) -> Result<(f64, Option<f64>)> {
        let mut order: Vec<Interaction> = self.train.interactions().to_vec();
        order.shuffle(&mut self.rng);
        self.cached_reps = None;
        if self.config.cached_propagation {
            if let (EncoderKind::LightGcn { layers }, Some(adj)) = (self.model.kind, &self.adj) {
                self.cached_reps = Some(lightgcn_propagate(&self.model.table, adj, layers)?);
            }
        }
        let mut total = 0.0;
        let mut ext_total: Option<f64> = None;
        for chunk in order.chunks(self.config.batch_size) {
            if let Some((v, e)) = self.step(chunk)? {
                total += v;
                if let Some(e) = e {
                    *ext_total.get_or_insert(0.0) += e;
                }
            }
        }
        self.cached_reps = None;
        Ok((total, ext_total))
    }

    /// Extractor-only pass used by the two-phase schedule.
    fn extractor_epoch(&mut self) -> Result<f64> {
        let mut order: Vec<Interaction> = self.train.interactions().to_vec();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let Some(batch) = self.build_batch(chunk)? else { continue };
            let pe = self.model.extractor.as_ref().expect("extractor present");
            let out = extractor_loss(pe, &batch, self.train.user_pop(), self.train.item_pop(), self.config.tau2)?;
            if !out.value.is_finite() {
                return Err(Error::Numerical("extractor loss diverged".into()));
            }
            total += out.value;
            let (au, ai) = self.adam_pop.as_mut().expect("extractor optimizer present");
            let pe = self.model.extractor.as_mut().expect("extractor present");
            au.step(&mut pe.user_vecs, &out.grads.users, self.config.lr)?;
            ai.step(&mut pe.item_vecs, &out.grads.items, self.config.lr)?;
        }
        Ok(total)
    }

    /// Trains the extractor alone with early stopping on its validation loss,
    /// then freezes it.
    pub fn pretrain_extractor(&mut self, validation: &Dataset) -> Result<ExtractorPhase> {
        if self.model.extractor.is_none() {
            return Err(Error::Config("two-phase schedule requires the bc loss".into()));
        }
        // fixed validation negatives so epochs are comparable
        let mut vrng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed);
        let val_rows: Vec<&Interaction> = validation
            .interactions()
            .iter()
            .filter(|it| self.train.user_positives(it.user).len() < self.train.num_items())
            .collect();
        let n_neg = self.config.num_negatives.max(1);
        let mut val_batch = LossBatch::default();
        for it in &val_rows {
            val_batch.users.push(it.user);
            val_batch.positives.push(it.item);
            val_batch.negatives.push(sample_negatives(
                it.user,
                n_neg,
                self.train.user_positives(it.user),
                self.train.num_items(),
                &mut vrng,
            )?);
        }
        let mut stop = EarlyStopping::new(self.config.patience);
        let mut best = self.model.extractor.clone();
        let mut phase = ExtractorPhase {
            epochs: 0,
            best_epoch: 0,
            train_losses: Vec::new(),
            validation_losses: Vec::new(),
        };
        for epoch in 1..=self.config.max_epochs {
            let train_loss = self.extractor_epoch()?;
            let pe = self.model.extractor.as_ref().expect("extractor present");
            let val_loss = if val_batch.is_empty() {
                train_loss
            } else {
                extractor_loss(pe, &val_batch, self.train.user_pop(), self.train.item_pop(), self.config.tau2)?.value
            };
            phase.epochs = epoch;
            phase.train_losses.push(train_loss);
            phase.validation_losses.push(val_loss);
            debug!("extractor epoch {epoch}: train {train_loss:.4} val {val_loss:.4}");
            match stop.observe(epoch, -val_loss) {
                Verdict::Improved => best = self.model.extractor.clone(),
                Verdict::Continue => {}
                Verdict::Stop => break,
            }
        }
        phase.best_epoch = stop.best_epoch();
        self.model.extractor = best;
        self.extractor_frozen = true;
        Ok(phase)
    }
}

/// Trains with the default validator (all-ranking Recall@K on
/// `split.validation`).
pub fn train(split: &DataSplit, kind: EncoderKind, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut validator = RecallValidator {
        train: &split.train,
        validation: &split.validation,
        k: config.eval_k,
    };
    train_with_validator(split, kind, config, &mut validator)
}

/// Full training loop: epochs of shuffled mini-batches, validation after
/// each epoch, best-checkpoint retention and patience-based stopping.
pub fn train_with_validator(
    split: &DataSplit,
    kind: EncoderKind,
    config: &TrainConfig,
    validator: &mut dyn Validator,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    let mut trainer = Trainer::new(&split.train, kind, config.clone())?;
    let extractor_phase = if config.loss == LossKind::Bc && config.schedule == Schedule::TwoPhase {
        Some(trainer.pretrain_extractor(&split.validation)?)
    } else {
        None
    };

    let mut stop = EarlyStopping::new(config.patience);
    let mut best = trainer.model().clone();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=config.max_epochs {
        let (loss, ext) = match trainer.run_epoch() {
            Ok(v) => v,
            Err(Error::Numerical(message)) => {
                warn!("epoch {epoch} diverged: {message}; keeping best checkpoint");
                stop_reason = StopReason::Diverged { epoch, message };
                break;
            }
            Err(e) => return Err(e),
        };
        let (recall, ndcg) = validator.validate(epoch, trainer.model(), trainer.adjacency())?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss,
            extractor_loss: ext,
            val_recall: recall,
            val_ndcg: ndcg,
        });
        debug!("epoch {epoch}: loss {loss:.5} val recall {recall:.5}");
        match stop.observe(epoch, recall) {
            Verdict::Improved => best = trainer.model().clone(),
            Verdict::Continue => {}
            Verdict::Stop => {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    info!(
        "training stopped ({stop_reason:?}) after {} epochs, best epoch {}",
        epochs.len(),
        stop.best_epoch()
    );
    Ok(TrainOutcome {
        model: best,
        report: TrainReport {
            epochs,
            best_epoch: stop.best_epoch(),
            best_val_recall: stop.best().max(0.0),
            stop_reason,
            wall_time_secs: started.elapsed().as_secs_f64(),
            extractor_phase,
        },
    })
}

/// Parameters exactly as training would initialize them for this config.
pub fn initial_model(train: &Dataset, kind: EncoderKind, config: &TrainConfig) -> Result<Model> {
    Ok(Trainer::new(train, kind, config.clone())?.model().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split_random, SplitFractions};

    fn small_split() -> DataSplit {
        let mut pairs = Vec::new();
        for u in 0..30 {
            for i in 0..40 {
                if (u * 7 + i * 3) % 5 == 0 || (u + i) % 11 == 0 {
                    pairs.push((u, i));
                }
            }
        }
        let ds = Dataset::from_pairs(30, 40, &pairs).unwrap();
        split_random(&ds, SplitFractions { balanced: 0.0, ..Default::default() }, 1).unwrap()
    }

    fn quick(loss: LossKind) -> TrainConfig {
        TrainConfig {
            dim: 8,
            batch_size: 64,
            num_negatives: 8,
            max_epochs: 3,
            lr: 0.01,
            loss,
            ..Default::default()
        }
    }

    #[test]
    fn every_loss_trains() {
        let split = small_split();
        for loss in [LossKind::Softmax, LossKind::Bc, LossKind::Bpr, LossKind::IpsCnBpr, LossKind::IpsCnSoftmax] {
            for kind in [EncoderKind::Mf, EncoderKind::LightGcn { layers: 2 }] {
                let out = train(&split, kind, &quick(loss)).unwrap();
                assert_eq!(out.report.epochs.len(), 3, "{loss:?} {kind:?}");
                assert!(out.model.table.is_finite());
                assert_eq!(out.model.extractor.is_some(), loss == LossKind::Bc);
            }
        }
    }

    #[test]
    fn two_phase_freezes_extractor() {
        let split = small_split();
        let cfg = TrainConfig {
            schedule: Schedule::TwoPhase,
            patience: 2,
            max_epochs: 4,
            ..quick(LossKind::Bc)
        };
        let out = train(&split, EncoderKind::Mf, &cfg).unwrap();
        let phase = out.report.extractor_phase.as_ref().unwrap();
        assert!(phase.epochs >= 1);
        assert!(out.report.epochs.iter().all(|e| e.extractor_loss.is_none()));
    }

    #[test]
    fn invalid_config_rejected() {
        let split = small_split();
        for cfg in [
            TrainConfig { tau1: 0.0, ..quick(LossKind::Bc) },
            TrainConfig { tau2: -1.0, ..quick(LossKind::Bc) },
            TrainConfig { lr: 0.0, ..quick(LossKind::Bc) },
            TrainConfig { batch_size: 0, ..quick(LossKind::Bc) },
        ] {
            assert!(matches!(train(&split, EncoderKind::Mf, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn loss_kind_names_round_trip() {
        for k in [LossKind::Softmax, LossKind::Bc, LossKind::Bpr, LossKind::IpsCnBpr, LossKind::IpsCnSoftmax] {
            assert_eq!(LossKind::parse(k.name()), Some(k));
        }
        assert_eq!(LossKind::parse("warp"), None);
    }
}

//! Trainer behavior: sparse updates, parameter separation, determinism,
//! best-checkpoint retention and divergence handling.

use std::cell::RefCell;
use std::collections::BTreeSet;

use bcrec::dataset::{split_random, DataSplit, SplitFractions};
use bcrec::encoders::EncoderKind;
use bcrec::losses::Gradients;
use bcrec::synth::{generate, SynthConfig};
use bcrec::trainer::{
    initial_model, train, train_with_validator, LossKind, Model, NegativeSampling, StopReason, TrainConfig, Trainer,
};

fn split() -> DataSplit {
    let data = generate(&SynthConfig { num_users: 60, num_items: 90, seed: 1, ..Default::default() }).unwrap();
    let fr = SplitFractions { balanced: 0.0, train: 0.7, validation: 0.1, test: 0.2 };
    split_random(&data.observed, fr, 3).unwrap()
}

fn config(loss: LossKind) -> TrainConfig {
    TrainConfig {
        dim: 8,
        batch_size: 32,
        num_negatives: 4,
        max_epochs: 3,
        lr: 0.01,
        loss,
        negative_sampling: NegativeSampling::Sampled,
        ..Default::default()
    }
}

#[test]
fn mf_step_touches_only_batch_rows() {
    let s = split();
    for loss in [LossKind::Softmax, LossKind::Bc, LossKind::Bpr] {
        let mut t = Trainer::new(&s.train, EncoderKind::Mf, config(loss)).unwrap();
        let before = t.model().clone();
        let chunk = &s.train.interactions()[..5];
        let batch = t.build_batch(chunk).unwrap().unwrap();
        let (_, _, g, eg) = t.batch_loss(&batch).unwrap();
        t.apply(&g, eg.as_ref()).unwrap();
        let after = t.model();

        let users: BTreeSet<usize> = batch.users.iter().copied().collect();
        let items: BTreeSet<usize> = batch.positives.iter().chain(batch.negatives.iter().flatten()).copied().collect();
        for u in 0..s.train.num_users() {
            let same = before.table.users.row(u) == after.table.users.row(u);
            assert_eq!(same, !users.contains(&u), "{loss:?} user {u}");
        }
        for i in 0..s.train.num_items() {
            let same = before.table.items.row(i) == after.table.items.row(i);
            assert_eq!(same, !items.contains(&i), "{loss:?} item {i}");
        }
    }
}

#[test]
fn cf_and_extractor_parameters_stay_separate() {
    let s = split();
    let mut t = Trainer::new(&s.train, EncoderKind::Mf, config(LossKind::Bc)).unwrap();
    let batch = t.build_batch(&s.train.interactions()[..16]).unwrap().unwrap();
    let (_, ext, g, eg) = t.batch_loss(&batch).unwrap();
    assert!(ext.is_some());
    let eg = eg.unwrap();

    let before = t.model().clone();
    t.apply(&g, None).unwrap();
    assert_eq!(t.model().extractor, before.extractor);
    assert_ne!(t.model().table, before.table);

    let mid = t.model().clone();
    t.apply(&Gradients::new(8), Some(&eg)).unwrap();
    assert_eq!(t.model().table, mid.table);
    assert_ne!(t.model().extractor, mid.extractor);
}

#[test]
fn frozen_extractor_does_not_move() {
    let s = split();
    let mut t = Trainer::new(&s.train, EncoderKind::Mf, config(LossKind::Bc)).unwrap();
    t.freeze_extractor(true);
    let before = t.model().extractor.clone();
    t.run_epoch().unwrap();
    assert_eq!(t.model().extractor, before);
}

#[test]
fn same_seed_is_bit_identical() {
    let s = split();
    for kind in [EncoderKind::Mf, EncoderKind::LightGcn { layers: 2 }] {
        let a = train(&s, kind, &config(LossKind::Bc)).unwrap();
        let b = train(&s, kind, &config(LossKind::Bc)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.report.epochs, b.report.epochs);
        let c = train(&s, kind, &TrainConfig { seed: 7, ..config(LossKind::Bc) }).unwrap();
        assert_ne!(a.model, c.model);
    }
}

#[test]
fn best_validation_epoch_is_restored() {
    let s = split();
    let script = [0.10, 0.50, 0.30, 0.50, 0.20, 0.90];
    let snapshots: RefCell<Vec<Model>> = RefCell::new(Vec::new());
    let mut validator = |epoch: usize, m: &Model| {
        snapshots.borrow_mut().push(m.clone());
        script[epoch - 1]
    };
    let cfg = TrainConfig { patience: 3, max_epochs: 6, ..config(LossKind::Softmax) };
    let out = train_with_validator(&s, EncoderKind::Mf, &cfg, &mut validator).unwrap();
    // a tie with the best does not count as improvement
    assert_eq!(out.report.best_epoch, 2);
    assert_eq!(out.report.stop_reason, StopReason::Patience);
    assert_eq!(out.report.epochs.len(), 5);
    assert_eq!(out.report.best_val_recall, 0.5);
    assert_eq!(out.model, snapshots.borrow()[1]);
}

#[test]
fn max_epochs_reached_without_stall() {
    let s = split();
    let mut validator = |epoch: usize, _: &Model| epoch as f64;
    let cfg = TrainConfig { patience: 1, max_epochs: 4, ..config(LossKind::Bpr) };
    let out = train_with_validator(&s, EncoderKind::Mf, &cfg, &mut validator).unwrap();
    assert_eq!(out.report.stop_reason, StopReason::MaxEpochs);
    assert_eq!(out.report.best_epoch, 4);
}

#[test]
fn divergence_stops_and_keeps_best() {
    let s = split();
    let cfg = TrainConfig { lr: 1e306, reg: 0.0, ..config(LossKind::Bpr) };
    let init = initial_model(&s.train, EncoderKind::Mf, &cfg).unwrap();
    let out = train(&s, EncoderKind::Mf, &cfg).unwrap();
    assert!(matches!(out.report.stop_reason, StopReason::Diverged { epoch: 1, .. }), "{:?}", out.report.stop_reason);
    assert!(out.report.epochs.is_empty());
    assert_eq!(out.model, init);
}

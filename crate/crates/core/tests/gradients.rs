//! Analytic gradients against central finite differences (h = 1e-5).

mod common;

use std::f64::consts::PI;

use bcrec::bias_extractor::{extractor_loss, PopularityEmbeddings};
use bcrec::dataset::{split_random, Dataset, SplitFractions};
use bcrec::encoders::EncoderKind;
use bcrec::linalg::Matrix;
use bcrec::losses::{
    bc_loss, bpr_loss, l2_penalty, positive_angles, softmax_loss, weighted_softmax_loss, LossBatch, LossOutput,
};
use bcrec::trainer::{LossKind, TrainConfig, Trainer};
use common::{dense, numeric_grad, random_batch, random_matrix, relative_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const DIMS: [usize; 3] = [2, 8, 64];

fn check(
    users: &Matrix,
    items: &Matrix,
    out: &LossOutput,
    f: &dyn Fn(&Matrix, &Matrix) -> f64,
    label: &str,
) {
    let gu = numeric_grad(users, items, 0, H, f);
    let gi = numeric_grad(users, items, 1, H, f);
    let eu = relative_error(&dense(&out.grads.users, users.rows()), &gu);
    let ei = relative_error(&dense(&out.grads.items, items.rows()), &gi);
    assert!(eu < TOL && ei < TOL, "{label}: user err {eu:e}, item err {ei:e}");
}

#[test]
fn softmax_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for d in DIMS {
        for _ in 0..5 {
            let tau = [0.07, 0.1, 0.5, 1.0][rng.random_range(0..4)];
            let (u, it) = (random_matrix(4, d, &mut rng), random_matrix(7, d, &mut rng));
            let b = random_batch(4, 7, 3, 4, &mut rng);
            let out = softmax_loss(&u, &it, &b, tau).unwrap();
            check(&u, &it, &out, &|u, i| softmax_loss(u, i, &b, tau).unwrap().value, &format!("softmax d={d}"));
        }
    }
}

fn safe_margins<R: Rng>(u: &Matrix, it: &Matrix, b: &LossBatch, rng: &mut R) -> Vec<f64> {
    positive_angles(u, it, b)
        .unwrap()
        .iter()
        .map(|t| rng.random_range(0.0..0.9) * (PI - t))
        .collect()
}

#[test]
fn bc_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for d in DIMS {
        for _ in 0..5 {
            let tau = [0.07, 0.1, 1.0][rng.random_range(0..3)];
            let (u, it) = (random_matrix(4, d, &mut rng), random_matrix(7, d, &mut rng));
            let b = random_batch(4, 7, 3, 4, &mut rng);
            let m = safe_margins(&u, &it, &b, &mut rng);
            let out = bc_loss(&u, &it, &b, &m, tau).unwrap();
            check(&u, &it, &out, &|u, i| bc_loss(u, i, &b, &m, tau).unwrap().value, &format!("bc d={d}"));
        }
    }
}

#[test]
fn bpr_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for d in DIMS {
        for _ in 0..5 {
            let (u, it) = (random_matrix(4, d, &mut rng), random_matrix(7, d, &mut rng));
            let b = random_batch(4, 7, 5, 1, &mut rng);
            let w: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..2.0)).collect();
            let out = bpr_loss(&u, &it, &b, None).unwrap();
            check(&u, &it, &out, &|u, i| bpr_loss(u, i, &b, None).unwrap().value, &format!("bpr d={d}"));
            let out = bpr_loss(&u, &it, &b, Some(&w)).unwrap();
            check(&u, &it, &out, &|u, i| bpr_loss(u, i, &b, Some(&w)).unwrap().value, &format!("ips bpr d={d}"));
        }
    }
}

#[test]
fn weighted_softmax_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for d in DIMS {
        let (u, it) = (random_matrix(4, d, &mut rng), random_matrix(7, d, &mut rng));
        let b = random_batch(4, 7, 3, 3, &mut rng);
        let w = vec![0.5, 1.2, 1.3];
        let out = weighted_softmax_loss(&u, &it, &b, 0.2, &w).unwrap();
        check(&u, &it, &out, &|u, i| weighted_softmax_loss(u, i, &b, 0.2, &w).unwrap().value, "ips softmax");
    }
}

#[test]
fn extractor_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for d in DIMS {
        for _ in 0..5 {
            let user_pop: Vec<usize> = (0..6).map(|_| rng.random_range(1..5)).collect();
            let item_pop: Vec<usize> = (0..9).map(|_| rng.random_range(1..7)).collect();
            let keys = |p: &[usize]| {
                let mut k = p.to_vec();
                k.sort_unstable();
                k.dedup();
                k
            };
            let (uk, ik) = (keys(&user_pop), keys(&item_pop));
            let uv = random_matrix(uk.len(), d, &mut rng);
            let iv = random_matrix(ik.len(), d, &mut rng);
            let b = random_batch(6, 9, 4, 3, &mut rng);
            let tau2 = [0.1, 1.0][rng.random_range(0..2)];
            let build = |u: &Matrix, i: &Matrix| {
                PopularityEmbeddings::new(uk.clone(), u.clone(), ik.clone(), i.clone()).unwrap()
            };
            let out = extractor_loss(&build(&uv, &iv), &b, &user_pop, &item_pop, tau2).unwrap();
            check(
                &uv,
                &iv,
                &out,
                &|u, i| extractor_loss(&build(u, i), &b, &user_pop, &item_pop, tau2).unwrap().value,
                &format!("extractor d={d}"),
            );
        }
    }
}

#[test]
fn l2_gradient_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let m = random_matrix(5, 3, &mut rng);
    let (_, g) = l2_penalty(&m, &[1, 3, 1], 0.7).unwrap();
    let f = |u: &Matrix, _: &Matrix| l2_penalty(u, &[1, 3, 1], 0.7).unwrap().0;
    let num = numeric_grad(&m, &m, 0, H, &f);
    assert!(relative_error(&g.to_dense(5), &num) < 1e-8);
}

/// The trainer's full objective (loss + L2, through LightGCN when enabled)
/// against differences taken on the base embedding table.
#[test]
fn trainer_objective_gradients_match_finite_differences() {
    let mut pairs = Vec::new();
    for u in 0..8 {
        for i in 0..10 {
            if (u * 3 + i * 7) % 4 == 0 {
                pairs.push((u, i));
            }
        }
    }
    let ds = Dataset::from_pairs(8, 10, &pairs).unwrap();
    let split = split_random(&ds, SplitFractions { balanced: 0.0, train: 0.9, validation: 0.1, test: 0.0 }, 3).unwrap();
    for kind in [EncoderKind::Mf, EncoderKind::LightGcn { layers: 2 }] {
        for loss in [LossKind::Softmax, LossKind::Bc, LossKind::Bpr] {
            let cfg = TrainConfig {
                dim: 4,
                num_negatives: 3,
                loss,
                reg: 1e-2,
                margin_strength: 0.1,
                negative_sampling: bcrec::trainer::NegativeSampling::Sampled,
                ..Default::default()
            };
            let mut t = Trainer::new(&split.train, kind, cfg).unwrap();
            let chunk: Vec<_> = split.train.interactions()[..6].to_vec();
            let batch = t.build_batch(&chunk).unwrap().unwrap();
            let (_, _, grads, _) = t.batch_loss(&batch).unwrap();
            let base = t.model().table.clone();
            let eval = |u: &Matrix, i: &Matrix, t: &mut Trainer| {
                t.model_mut().table.users = u.clone();
                t.model_mut().table.items = i.clone();
                t.batch_loss(&batch).unwrap().0
            };
            let cell = std::cell::RefCell::new(&mut t);
            let f = |u: &Matrix, i: &Matrix| eval(u, i, &mut cell.borrow_mut());
            let gu = numeric_grad(&base.users, &base.items, 0, H, &f);
            let gi = numeric_grad(&base.users, &base.items, 1, H, &f);
            let eu = relative_error(&grads.users.to_dense(base.users.rows()), &gu);
            let ei = relative_error(&grads.items.to_dense(base.items.rows()), &gi);
            assert!(eu < TOL && ei < TOL, "{kind:?} {loss:?}: {eu:e} {ei:e}");
        }
    }
}

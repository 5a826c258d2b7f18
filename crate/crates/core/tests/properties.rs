//! Property tests for loss, margin, split and ranking invariants.

mod common;

use std::f64::consts::PI;

use bcrec::bias_extractor::margin;
use bcrec::dataset::{kl_divergence_uniform, split_random, subgroup_partition, Dataset, SplitFractions, Subgroup};
use bcrec::evaluator::rank_topk;
use bcrec::losses::{
    bc_loss, ips_cn_weights, positive_angles, softmax_loss, softmax_nll, softmax_nll_max_shift, LossBatch,
};
use common::{random_batch, random_matrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pairs_strategy() -> impl Strategy<Value = (usize, usize, Vec<(usize, usize)>)> {
    (2usize..12, 2usize..15).prop_flat_map(|(nu, ni)| {
        let cells = proptest::collection::vec(any::<bool>(), nu * ni);
        cells.prop_map(move |c| {
            let pairs = (0..nu * ni).filter(|&k| c[k]).map(|k| (k / ni, k % ni)).collect();
            (nu, ni, pairs)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn margin_stays_in_feasible_range(xi in 0.0..=PI, theta in 0.0..=PI, strength in 0.0..3.0f64) {
        let m = margin(xi, theta, strength);
        prop_assert!(m >= 0.0);
        prop_assert!(m <= PI - theta);
    }

    #[test]
    fn margin_monotone(xi in 0.0..=PI, dxi in 0.0..1.0f64, theta in 0.0..=PI, dtheta in 0.0..1.0f64) {
        prop_assert!(margin((xi + dxi).min(PI), theta, 1.0) >= margin(xi, theta, 1.0));
        prop_assert!(margin(xi, (theta + dtheta).min(PI), 1.0) <= margin(xi, theta, 1.0));
    }

    #[test]
    fn zero_margin_bc_equals_softmax(seed in any::<u64>(), d in 1usize..16, tau in 0.05..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (u, it) = (random_matrix(5, d, &mut rng), random_matrix(9, d, &mut rng));
        let b = random_batch(5, 9, 4, 3, &mut rng);
        let a = softmax_loss(&u, &it, &b, tau).unwrap();
        let c = bc_loss(&u, &it, &b, &[0.0; 4], tau).unwrap();
        prop_assert!((a.value - c.value).abs() < 1e-9);
    }

    #[test]
    fn bc_loss_monotone_in_margin(seed in any::<u64>(), d in 2usize..16, tau in 0.05..2.0f64, f0 in 0.0..1.0f64, f1 in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (u, it) = (random_matrix(4, d, &mut rng), random_matrix(8, d, &mut rng));
        let b = random_batch(4, 8, 3, 3, &mut rng);
        let theta = positive_angles(&u, &it, &b).unwrap();
        let (lo, hi) = (f0.min(f1), f0.max(f1));
        let mut m = vec![0.3 * (PI - theta[0]), 0.0, 0.5 * (PI - theta[2])];
        m[1] = lo * (PI - theta[1]);
        let a = bc_loss(&u, &it, &b, &m, tau).unwrap().value;
        m[1] = hi * (PI - theta[1]);
        let c = bc_loss(&u, &it, &b, &m, tau).unwrap().value;
        prop_assert!(c >= a, "{c} < {a}");
    }

    #[test]
    fn batch_loss_is_sum_of_rows(seed in any::<u64>(), tau in 0.05..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (u, it) = (random_matrix(5, 6, &mut rng), random_matrix(9, 6, &mut rng));
        let b = random_batch(5, 9, 5, 4, &mut rng);
        let whole = softmax_loss(&u, &it, &b, tau).unwrap().value;
        let parts: f64 = (0..b.len()).map(|r| softmax_loss(&u, &it, &b.row(r), tau).unwrap().value).sum();
        prop_assert!((whole - parts).abs() < 1e-9 * whole.abs().max(1.0));
    }

    #[test]
    fn stabilizers_agree(pos in -50.0..50.0f64, negs in proptest::collection::vec(-50.0..50.0f64, 1..20)) {
        let (a, da, ga) = softmax_nll(pos, &negs);
        let (b, db, gb) = softmax_nll_max_shift(pos, &negs);
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        prop_assert!((da - db).abs() <= 1e-12);
        for (x, y) in ga.iter().zip(&gb) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn ips_weights_have_unit_mean(pops in proptest::collection::vec(1usize..1000, 1..40), clip in 0.001..2.0f64) {
        let items: Vec<usize> = (0..pops.len()).collect();
        let w = ips_cn_weights(&pops, &items, clip).unwrap();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn random_split_partitions_exactly((nu, ni, pairs) in pairs_strategy(), seed in any::<u64>(), bal in 0.0..0.3f64) {
        prop_assume!(!pairs.is_empty());
        let ds = Dataset::from_pairs(nu, ni, &pairs).unwrap();
        let fr = SplitFractions { balanced: bal, train: 0.6, validation: 0.1, test: 0.3 - bal };
        let s = split_random(&ds, fr, seed).unwrap();
        let mut all: Vec<(usize, usize)> = s.members()
            .flat_map(|(_, d)| d.interactions().iter().map(|it| (it.user, it.item)).collect::<Vec<_>>())
            .collect();
        prop_assert_eq!(all.len(), pairs.len());
        all.sort_unstable();
        let mut want = pairs.clone();
        want.sort_unstable();
        prop_assert_eq!(all, want);
    }

    #[test]
    fn k_core_is_k_and_idempotent((nu, ni, pairs) in pairs_strategy(), k in 1usize..4) {
        prop_assume!(!pairs.is_empty());
        let ds = Dataset::from_pairs(nu, ni, &pairs).unwrap();
        let core = ds.k_core_filter(k).unwrap();
        prop_assert!(core.user_pop().iter().all(|&c| c >= k));
        prop_assert!(core.item_pop().iter().all(|&c| c >= k));
        let again = core.k_core_filter(k).unwrap();
        prop_assert_eq!(again.interactions(), core.interactions());
        prop_assert_eq!(again.num_users(), core.num_users());
    }

    #[test]
    fn subgroups_cover_in_thirds(pop in proptest::collection::vec(0usize..50, 1..60)) {
        let g = subgroup_partition(&pop);
        let n = pop.len();
        let third = n.div_ceil(3);
        let count = |s: Subgroup| g.iter().filter(|&&x| x == s).count();
        prop_assert_eq!(count(Subgroup::Head), third.min(n));
        prop_assert_eq!(count(Subgroup::Mid), third.min(n - third.min(n)));
        for a in 0..n {
            for b in 0..n {
                if pop[a] > pop[b] {
                    prop_assert!(g[a].index() <= g[b].index());
                }
            }
        }
    }

    #[test]
    fn kl_is_nonnegative(counts in proptest::collection::vec(0usize..30, 1..30)) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        prop_assert!(kl_divergence_uniform(&counts).unwrap() >= -1e-12);
    }

    #[test]
    fn topk_is_sorted_and_excludes(scores in proptest::collection::vec(-3i32..3, 1..60), k in 0usize..25, ex in proptest::collection::vec(0usize..60, 0..10)) {
        let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
        let mut ex = ex;
        ex.retain(|&e| e < s.len());
        ex.sort_unstable();
        ex.dedup();
        let top = rank_topk(&s, k, &ex).items;
        prop_assert_eq!(top.len(), k.min(s.len() - ex.len()));
        for w in top.windows(2) {
            prop_assert!(s[w[0]] > s[w[1]] || (s[w[0]] == s[w[1]] && w[0] < w[1]));
        }
        prop_assert!(top.iter().all(|i| ex.binary_search(i).is_err()));
    }
}

#[test]
fn loss_batch_rejects_ragged_columns() {
    assert!(LossBatch::new(vec![0], vec![0, 1], vec![vec![]]).is_err());
}

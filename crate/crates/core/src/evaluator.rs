//! All-ranking top-K evaluation: every item outside the user's training
//! positives is scored, and HR/Recall/NDCG are computed overall and per
//! head/mid/tail item subgroup.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Subgroup};
use crate::encoders::Scorer;
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 20;

/// Top-K ranking of one user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopK {
    pub items: Vec<usize>,
    /// Set when fewer than `k` candidates remained after exclusions.
    pub truncated: bool,
}

fn by_score_then_id(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Highest-scoring `k` items not in `exclude`, ties broken by ascending id.
pub fn rank_topk(scores: &[f64], k: usize, exclude: &[usize]) -> TopK {
    let mut excluded = vec![false; scores.len()];
    for &e in exclude {
        if e < excluded.len() {
            excluded[e] = true;
        }
    }
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&i| !excluded[i]).collect();
    let truncated = cand.len() < k;
    let cmp = by_score_then_id(scores);
    if cand.len() > k && k > 0 {
        cand.select_nth_unstable_by(k - 1, &cmp);
        cand.truncate(k);
    } else if k == 0 {
        cand.clear();
    }
    cand.sort_unstable_by(&cmp);
    TopK {
        items: cand,
        truncated,
    }
}

fn hits(ranked: &[usize], relevant: &[usize]) -> usize {
    ranked.iter().filter(|i| relevant.contains(i)).count()
}

/// `|ranked ∩ relevant| / |relevant|`
pub fn recall_at_k(ranked: &[usize], relevant: &[usize]) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    hits(ranked, relevant) as f64 / relevant.len() as f64
}

/// Binary-relevance NDCG with `1/log2(p+1)` discounts; the ideal DCG is
/// truncated at `min(k, |relevant|)`.
pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    if relevant.is_empty() || k == 0 {
        return 0.0;
    }
    let disc = |p: usize| 1.0 / ((p + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(pos, _)| disc(pos + 1))
        .sum();
    let idcg: f64 = (1..=k.min(relevant.len())).map(disc).sum();
    dcg / idcg
}

/// 1 if any relevant item was ranked, else 0.
pub fn hr_at_k(ranked: &[usize], relevant: &[usize]) -> f64 {
    if ranked.iter().any(|i| relevant.contains(i)) {
        1.0
    } else {
        0.0
    }
}

/// Averages over the users that had at least one relevant item. Metrics are
/// `None` when no user qualified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub recall: Option<f64>,
    pub ndcg: Option<f64>,
    pub hr: Option<f64>,
    pub users: usize,
    pub interactions: usize,
}

#[derive(Debug, Clone, Default)]
struct Accum {
    recall: f64,
    ndcg: f64,
    hr: f64,
    users: usize,
    interactions: usize,
}

impl Accum {
    fn push(&mut self, ranked: &[usize], relevant: &[usize], k: usize) {
        self.interactions += relevant.len();
        if relevant.is_empty() {
            return;
        }
        self.recall += recall_at_k(ranked, relevant);
        self.ndcg += ndcg_at_k(ranked, relevant, k);
        self.hr += hr_at_k(ranked, relevant);
        self.users += 1;
    }

    fn finish(&self) -> MetricSet {
        let avg = |x: f64| (self.users > 0).then(|| x / self.users as f64);
        MetricSet {
            recall: avg(self.recall),
            ndcg: avg(self.ndcg),
            hr: avg(self.hr),
            users: self.users,
            interactions: self.interactions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupMetrics {
    pub subgroup: Subgroup,
    pub items: usize,
    pub metrics: MetricSet,
}

/// Metrics for one evaluated split member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub member: String,
    pub k: usize,
    pub overall: MetricSet,
    pub subgroups: Vec<SubgroupMetrics>,
    /// Users whose candidate pool was smaller than `k`.
    pub truncated_users: usize,
}

/// Serializable bundle of member reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub k: usize,
    pub protocol: String,
    pub subgroup_rule: String,
    pub members: Vec<MemberReport>,
}

impl EvalReport {
    pub fn new(k: usize, members: Vec<MemberReport>) -> Self {
        EvalReport {
            schema_version: 1,
            k,
            protocol: "all-ranking; candidates = catalog minus training positives; ties by item id".into(),
            subgroup_rule: "items split by training popularity thirds (ceil(n/3) head, ceil(n/3) mid, rest tail, ties by id); \
                            relevant set restricted to the subgroup, ranking unchanged; users without relevant items in a subgroup skipped"
                .into(),
            members,
        }
    }

    /// Flat CSV, one row per (member, subgroup, metric).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["member", "subgroup", "metric", "k", "value", "users"])?;
        for m in &self.members {
            let groups = std::iter::once(("overall", &m.overall))
                .chain(m.subgroups.iter().map(|s| (s.subgroup.as_str(), &s.metrics)));
            for (name, set) in groups {
                for (metric, v) in [("recall", set.recall), ("ndcg", set.ndcg), ("hr", set.hr)] {
                    w.write_record([
                        m.member.clone(),
                        name.to_string(),
                        metric.to_string(),
                        m.k.to_string(),
                        v.map_or(String::new(), |x| format!("{x:.10}")),
                        set.users.to_string(),
                    ])?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Evaluates `scorer` on `test`, excluding each user's `train` positives
/// from the candidate pool.
pub fn evaluate(
    scorer: &Scorer,
    train: &Dataset,
    test: &Dataset,
    labels: &[Subgroup],
    k: usize,
    member: &str,
) -> Result<MemberReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if labels.len() != scorer.num_items() || train.num_items() != scorer.num_items() || test.num_items() != scorer.num_items() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels, {} scored items, {} train items, {} test items",
            labels.len(),
            scorer.num_items(),
            train.num_items(),
            test.num_items()
        )));
    }
    let items = scorer.representations().items.row_normalized();
    let users: Vec<usize> = (0..test.num_users()).filter(|&u| !test.user_positives(u).is_empty()).collect();

    let per_user: Vec<(TopK, usize)> = users
        .par_iter()
        .map(|&u| {
            let scores = scorer.score_all(u, &items)?;
            Ok((rank_topk(&scores, k, train.user_positives(u)), u))
        })
        .collect::<Result<_>>()?;

    let mut overall = Accum::default();
    let mut groups: [Accum; 3] = Default::default();
    let mut truncated_users = 0;
    for (top, u) in &per_user {
        truncated_users += top.truncated as usize;
        let rel = test.user_positives(*u);
        overall.push(&top.items, rel, k);
        for g in Subgroup::ALL {
            let sub: Vec<usize> = rel.iter().copied().filter(|&i| labels[i] == g).collect();
            groups[g.index()].push(&top.items, &sub, k);
        }
    }
    Ok(MemberReport {
        member: member.to_string(),
        k,
        overall: overall.finish(),
        subgroups: Subgroup::ALL
            .iter()
            .map(|&g| SubgroupMetrics {
                subgroup: g,
                items: labels.iter().filter(|&&l| l == g).count(),
                metrics: groups[g.index()].finish(),
            })
            .collect(),
        truncated_users,
    })
}

/// Mean Recall@k over users with test positives; the early-stopping signal.
pub fn mean_recall(scorer: &Scorer, train: &Dataset, test: &Dataset, k: usize) -> Result<f64> {
    let labels = vec![Subgroup::Head; scorer.num_items()];
    Ok(evaluate(scorer, train, test, &labels, k, "validation")?
        .overall
        .recall
        .unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_basic_and_exclusion() {
        let scores = [0.9, 0.8, 0.7, 0.6, 0.5];
        assert_eq!(rank_topk(&scores, 3, &[]).items, vec![0, 1, 2]);
        assert_eq!(rank_topk(&scores, 3, &[1]).items, vec![0, 2, 3]);
    }

    #[test]
    fn topk_ties_by_id_and_truncation() {
        let scores = [0.5, 0.7, 0.5, 0.7];
        assert_eq!(rank_topk(&scores, 3, &[]).items, vec![1, 3, 0]);
        let t = rank_topk(&scores, 5, &[0]);
        assert_eq!(t.items, vec![1, 3, 2]);
        assert!(t.truncated);
        assert!(rank_topk(&scores, 0, &[]).items.is_empty());
    }

    #[test]
    fn recall_cases() {
        assert_eq!(recall_at_k(&[3, 1, 2], &[1, 2]), 1.0);
        assert_eq!(recall_at_k(&[3, 1, 5], &[1, 2]), 0.5);
    }

    #[test]
    fn ndcg_cases() {
        assert_eq!(ndcg_at_k(&[7, 1, 2], &[7], 3), 1.0);
        assert!((ndcg_at_k(&[1, 2, 7], &[7], 3) - 0.5).abs() < 1e-15);
        let v = ndcg_at_k(&[7, 1, 2, 8, 9], &[7, 8], 5);
        let expected = (1.0 + 1.0 / 5f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.877_215_3).abs() < 1e-6);
    }

    #[test]
    fn hr_cases() {
        assert_eq!(hr_at_k(&[1, 2], &[2, 9]), 1.0);
        assert_eq!(hr_at_k(&[1, 2], &[9]), 0.0);
    }
}

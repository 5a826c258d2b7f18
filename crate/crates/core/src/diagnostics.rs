//! Geometry diagnostics: per-user angle distributions, compactness and
//! dispersion sums, and bias-degree correlation analyses.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bias_extractor::PopularityEmbeddings;
use crate::dataset::{subgroup_partition, Dataset, IdMap, Interaction, Subgroup};
use crate::encoders::{angle, EmbeddingTable, NORM_FLOOR};
use crate::error::{Error, Result};
use crate::linalg::{norm, squared_distance, Matrix};
use crate::trainer::sample_negatives;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_BIN_WIDTH: f64 = PI / 30.0;
/// Items plotted per user: all positives plus uniform negatives up to this.
pub const DEFAULT_ANGLE_ITEMS: usize = 500;
pub const DEFAULT_DISPERSION_NEGATIVES: usize = 128;

fn histogram(angles: &[f64], bin_width: f64) -> Vec<usize> {
    let bins = (PI / bin_width).ceil() as usize;
    let mut h = vec![0; bins.max(1)];
    for &a in angles {
        let b = ((a / bin_width) as usize).min(h.len() - 1);
        h[b] += 1;
    }
    h
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleReport {
    pub user: usize,
    pub user_id: String,
    pub num_positive: usize,
    pub num_negative: usize,
    pub mean_positive: f64,
    pub mean_negative: Option<f64>,
    pub bin_width: f64,
    pub positive_hist: Vec<usize>,
    pub negative_hist: Vec<usize>,
}

/// Angles between `user` and the given items on (already propagated)
/// representations.
pub fn angle_report(
    reps: &EmbeddingTable,
    user: usize,
    user_id: &str,
    positives: &[usize],
    negatives: &[usize],
    bin_width: f64,
) -> Result<AngleReport> {
    if positives.is_empty() {
        return Err(Error::Config(format!("user {user_id} has no positives")));
    }
    if !(bin_width > 0.0) {
        return Err(Error::Config(format!("bin width must be positive, got {bin_width}")));
    }
    let u = reps.users.row(user);
    let angles = |items: &[usize]| -> Result<Vec<f64>> { items.iter().map(|&i| angle(u, reps.items.row(i))).collect() };
    let pos = angles(positives)?;
    let neg = angles(negatives)?;
    Ok(AngleReport {
        user,
        user_id: user_id.to_string(),
        num_positive: pos.len(),
        num_negative: neg.len(),
        mean_positive: mean(&pos).expect("non-empty"),
        mean_negative: mean(&neg),
        bin_width,
        positive_hist: histogram(&pos, bin_width),
        negative_hist: histogram(&neg, bin_width),
    })
}

/// Uniform negatives without replacement so that positives plus negatives
/// total `total_items` (or every non-positive when fewer exist).
pub fn plot_negatives(train: &Dataset, user: usize, total_items: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let pos = train.user_positives(user);
    let pool: Vec<usize> = (0..train.num_items()).filter(|i| pos.binary_search(i).is_err()).collect();
    let want = total_items.saturating_sub(pos.len()).min(pool.len());
    let mut picked: Vec<usize> = sample(rng, pool.len(), want).into_iter().map(|k| pool[k]).collect();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleSummary {
    pub schema_version: u32,
    pub total_items_per_user: usize,
    pub seed: u64,
    pub users: Vec<AngleReport>,
    /// Among users with at least 3 positives, the share whose mean positive
    /// angle is below their mean negative angle.
    pub fraction_positive_closer: Option<f64>,
    pub eligible_users: usize,
}

impl AngleSummary {
    /// One row per (user, kind, bin).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("user,kind,bin,bin_start,bin_end,count\n");
        for r in &self.users {
            for (kind, hist) in [("positive", &r.positive_hist), ("negative", &r.negative_hist)] {
                for (b, c) in hist.iter().enumerate() {
                    let lo = b as f64 * r.bin_width;
                    let hi = (lo + r.bin_width).min(PI);
                    let _ = writeln!(out, "{},{kind},{b},{lo:.10},{hi:.10},{c}", r.user_id);
                }
            }
        }
        out
    }
}

/// Angle reports for every user with a training positive.
pub fn angle_reports(
    reps: &EmbeddingTable,
    train: &Dataset,
    total_items: usize,
    bin_width: f64,
    seed: u64,
) -> Result<AngleSummary> {
    let users: Vec<usize> = (0..train.num_users()).filter(|&u| train.user_pop()[u] > 0).collect();
    let reports = users
        .par_iter()
        .map(|&u| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(u as u64);
            let negs = plot_negatives(train, u, total_items, &mut rng);
            angle_report(reps, u, train.user_ids().name(u), train.user_positives(u), &negs, bin_width)
        })
        .collect::<Result<Vec<_>>>()?;
    let eligible: Vec<&AngleReport> = reports
        .iter()
        .filter(|r| r.num_positive >= 3 && r.mean_negative.is_some())
        .collect();
    let closer = eligible
        .iter()
        .filter(|r| r.mean_positive < r.mean_negative.expect("filtered"))
        .count();
    Ok(AngleSummary {
        schema_version: SCHEMA_VERSION,
        total_items_per_user: total_items,
        seed,
        fraction_positive_closer: (!eligible.is_empty()).then(|| closer as f64 / eligible.len() as f64),
        eligible_users: eligible.len(),
        users: reports,
    })
}

/// Which negatives enter the dispersion sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum NegativeSpec {
    /// Every non-positive item of each user.
    Full,
    /// `per_user` uniform draws with replacement from a per-user seeded stream.
    Sampled { per_user: usize, seed: u64 },
}

impl Default for NegativeSpec {
    fn default() -> Self {
        NegativeSpec::Sampled {
            per_user: DEFAULT_DISPERSION_NEGATIVES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub schema_version: u32,
    pub normalized: bool,
    pub negatives: NegativeSpec,
    pub compactness_sum: f64,
    pub user_compactness: f64,
    pub item_compactness: f64,
    pub dispersion_sum: f64,
    pub negative_pairs: usize,
    /// `-dispersion_sum / negative_pairs`.
    pub mean_negative_sq_distance: Option<f64>,
    pub excluded_users: usize,
    pub excluded_items: usize,
}

impl GeometryReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("quantity,value\n");
        let rows: [(&str, String); 8] = [
            ("compactness_sum", format!("{:.15e}", self.compactness_sum)),
            ("user_compactness", format!("{:.15e}", self.user_compactness)),
            ("item_compactness", format!("{:.15e}", self.item_compactness)),
            ("dispersion_sum", format!("{:.15e}", self.dispersion_sum)),
            ("negative_pairs", self.negative_pairs.to_string()),
            (
                "mean_negative_sq_distance",
                self.mean_negative_sq_distance.map_or(String::new(), |v| format!("{v:.15e}")),
            ),
            ("excluded_users", self.excluded_users.to_string()),
            ("excluded_items", self.excluded_items.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }
}

fn normalized_copy(m: &Matrix, what: &str) -> Result<Matrix> {
    for r in 0..m.rows() {
        if norm(m.row(r)) <= NORM_FLOOR {
            return Err(Error::ZeroNorm(format!("{what} {r}")));
        }
    }
    Ok(m.row_normalized())
}

/// Sum over members of `||v_a - mean_{b in P_a} v_b||^2` with the centroid
/// kept unnormalized. Returns the sum and the number of anchors skipped for
/// having no positives.
fn compactness(anchors: &Matrix, others: &Matrix, positives: impl Fn(usize) -> Vec<usize> + Sync) -> (f64, usize) {
    let terms: Vec<Option<f64>> = (0..anchors.rows())
        .into_par_iter()
        .map(|a| {
            let p = positives(a);
            if p.is_empty() {
                return None;
            }
            let mut c = vec![0.0; anchors.cols()];
            for &b in &p {
                c.iter_mut().zip(others.row(b)).for_each(|(ci, x)| *ci += x);
            }
            let n = p.len() as f64;
            c.iter_mut().for_each(|ci| *ci /= n);
            Some(squared_distance(anchors.row(a), &c))
        })
        .collect();
    let skipped = terms.iter().filter(|t| t.is_none()).count();
    (terms.into_iter().flatten().sum(), skipped)
}

/// Compactness and dispersion sums on L2-normalized copies of `table`.
pub fn geometry_report(table: &EmbeddingTable, train: &Dataset, negatives: NegativeSpec) -> Result<GeometryReport> {
    if table.num_users() != train.num_users() || table.num_items() != train.num_items() {
        return Err(Error::DimensionMismatch(format!(
            "table {}x{} vs dataset {}x{}",
            table.num_users(),
            table.num_items(),
            train.num_users(),
            train.num_items()
        )));
    }
    let users = normalized_copy(&table.users, "user")?;
    let items = normalized_copy(&table.items, "item")?;
    let (user_compactness, excluded_users) = compactness(&users, &items, |u| train.user_positives(u).to_vec());
    let (item_compactness, excluded_items) = compactness(&items, &users, |i| train.item_positives(i).to_vec());

    let per_user: Vec<(f64, usize)> = (0..train.num_users())
        .into_par_iter()
        .map(|u| {
            let pos = train.user_positives(u);
            if pos.is_empty() {
                return (0.0, 0);
            }
            let negs: Vec<usize> = match negatives {
                NegativeSpec::Full => (0..train.num_items()).filter(|j| pos.binary_search(j).is_err()).collect(),
                NegativeSpec::Sampled { per_user, seed } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(u as u64);
                    sample_negatives(u, per_user, pos, train.num_items(), &mut rng).unwrap_or_default()
                }
            };
            let s: f64 = negs.iter().map(|&j| squared_distance(users.row(u), items.row(j))).sum();
            (s, negs.len())
        })
        .collect();
    let dist: f64 = per_user.iter().map(|p| p.0).sum();
    let pairs: usize = per_user.iter().map(|p| p.1).sum();
    Ok(GeometryReport {
        schema_version: SCHEMA_VERSION,
        normalized: true,
        negatives,
        compactness_sum: user_compactness + item_compactness,
        user_compactness,
        item_compactness,
        dispersion_sum: -dist,
        negative_pairs: pairs,
        mean_negative_sq_distance: (pairs > 0).then(|| dist / pairs as f64),
        excluded_users,
        excluded_items,
    })
}

/// Pearson correlation; `None` when either series is constant or shorter
/// than two points.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let mx = mean(x)?;
    let my = mean(y)?;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    // rounding noise around a constant is still a constant series
    let flat = |v: &[f64], ss: f64, m: f64| ss <= (1e-12 * m.abs().max(1.0)).powi(2) * v.len() as f64;
    if flat(x, sxx, mx) || flat(y, syy, my) {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub index: usize,
    pub id: String,
    pub popularity: usize,
    pub mean_cos_xi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCorrelation {
    pub schema_version: u32,
    pub pearson_item: Option<f64>,
    pub pearson_item_log: Option<f64>,
    pub pearson_user: Option<f64>,
    pub pearson_user_log: Option<f64>,
    pub items: Vec<ScatterPoint>,
    pub users: Vec<ScatterPoint>,
}

impl BiasCorrelation {
    /// One row per scatter point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("side,id,popularity,mean_cos_xi\n");
        for (side, pts) in [("item", &self.items), ("user", &self.users)] {
            for p in pts {
                let _ = writeln!(out, "{side},{},{},{:.15e}", p.id, p.popularity, p.mean_cos_xi);
            }
        }
        out
    }
}

/// Per-interaction `cos(xi)` over the training set.
fn interaction_scores(pe: &PopularityEmbeddings, train: &Dataset) -> Result<Vec<f64>> {
    train
        .interactions()
        .iter()
        .map(|it| pe.bias_score(train.user_pop()[it.user], train.item_pop()[it.item]))
        .collect()
}

fn side_points(
    train: &Dataset,
    scores: &[f64],
    n: usize,
    pop: &[usize],
    ids: &IdMap,
    select: impl Fn(&Interaction) -> usize,
) -> Vec<ScatterPoint> {
    let mut sum = vec![0.0; n];
    let mut cnt = vec![0usize; n];
    for (it, s) in train.interactions().iter().zip(scores) {
        let k = select(it);
        sum[k] += s;
        cnt[k] += 1;
    }
    (0..n)
        .filter(|&k| cnt[k] > 0)
        .map(|k| ScatterPoint {
            index: k,
            id: ids.name(k).to_string(),
            popularity: pop[k],
            mean_cos_xi: sum[k] / cnt[k] as f64,
        })
        .collect()
}

fn correlations(points: &[ScatterPoint]) -> (Option<f64>, Option<f64>) {
    let pop: Vec<f64> = points.iter().map(|p| p.popularity as f64).collect();
    let log: Vec<f64> = pop.iter().map(|p| p.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.mean_cos_xi).collect();
    (pearson(&pop, &y), pearson(&log, &y))
}

/// Correlation between mean `cos(xi)` and popularity, item side and user
/// side, on raw and log popularity.
pub fn bias_correlation(pe: &PopularityEmbeddings, train: &Dataset) -> Result<BiasCorrelation> {
    let scores = interaction_scores(pe, train)?;
    let items = side_points(train, &scores, train.num_items(), train.item_pop(), train.item_ids(), |it| it.item);
    let users = side_points(train, &scores, train.num_users(), train.user_pop(), train.user_ids(), |it| it.user);
    let (pearson_item, pearson_item_log) = correlations(&items);
    let (pearson_user, pearson_user_log) = correlations(&users);
    Ok(BiasCorrelation {
        schema_version: SCHEMA_VERSION,
        pearson_item,
        pearson_item_log,
        pearson_user,
        pearson_user_log,
        items,
        users,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleCell {
    pub user_group: Subgroup,
    pub item_group: Subgroup,
    pub count: usize,
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupAngleMatrix {
    pub schema_version: u32,
    /// Row-major: user group (head, mid, tail) by item group.
    pub cells: Vec<AngleCell>,
}

impl SubgroupAngleMatrix {
    pub fn cell(&self, user: Subgroup, item: Subgroup) -> &AngleCell {
        &self.cells[user.index() * 3 + item.index()]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("user_group,item_group,count,mean_xi,std_xi\n");
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.15e}"));
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.user_group.as_str(),
                c.item_group.as_str(),
                c.count,
                opt(c.mean),
                opt(c.std)
            );
        }
        out
    }
}

/// Mean and standard deviation of `xi` per (user subgroup, item subgroup).
pub fn subgroup_angle_matrix(pe: &PopularityEmbeddings, train: &Dataset) -> Result<SubgroupAngleMatrix> {
    let ug = subgroup_partition(train.user_pop());
    let ig = subgroup_partition(train.item_pop());
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); 9];
    for it in train.interactions() {
        let xi = pe.bias_angle(train.user_pop()[it.user], train.item_pop()[it.item])?;
        buckets[ug[it.user].index() * 3 + ig[it.item].index()].push(xi);
    }
    let mut cells = Vec::with_capacity(9);
    for u in Subgroup::ALL {
        for i in Subgroup::ALL {
            let b = &buckets[u.index() * 3 + i.index()];
            let m = mean(b);
            let std = m.map(|m| (b.iter().map(|x| (x - m).powi(2)).sum::<f64>() / b.len() as f64).sqrt());
            cells.push(AngleCell {
                user_group: u,
                item_group: i,
                count: b.len(),
                mean: m,
                std,
            });
        }
    }
    Ok(SubgroupAngleMatrix {
        schema_version: SCHEMA_VERSION,
        cells,
    })
}

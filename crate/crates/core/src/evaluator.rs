//! Full-catalog ranking evaluation and representation-geometry
//! diagnostics.
//!
//! For every user with ground truth in the target split, all bundles are
//! scored with the chosen view, already-seen bundles are masked to
//! negative infinity, and the top-K (ties broken by ascending bundle id)
//! yields Recall@K and NDCG@K. Users without ground truth are excluded
//! from the averages.
//!
//! The diagnostics report the mean cross-view cosine of matched entities
//! (alignment) and the mean within-view cosine among distinct entities
//! (dispersion), the latter over sampled pairs to bound the quadratic
//! cost.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SplitDataset;
use crate::encoder::ViewRepresentations;
use crate::error::{Error, Result};
use crate::mat::{dot, norm, Mat};
use crate::objectives::ScoreView;
use crate::seeds;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Which split supplies the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTarget {
    Validation,
    Test,
}

/// Recall@K / NDCG@K for one scoring view.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub recall_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
}

/// Ranking metrics for the requested view plus the per-view breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub view: ScoreView,
    pub recall_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub per_view: BTreeMap<String, ViewMetrics>,
    pub evaluated_users: usize,
}

impl MetricsReport {
    /// Aligned plain-text table: one `view metric K value` row each.
    pub fn to_table(&self) -> String {
        let mut out = String::from("view    metric  K     value\n");
        for (view, metrics) in &self.per_view {
            for (k, v) in &metrics.recall_at {
                out.push_str(&format!("{view:<7} recall  {k:<5} {v:.6}\n"));
            }
            for (k, v) in &metrics.ndcg_at {
                out.push_str(&format!("{view:<7} ndcg    {k:<5} {v:.6}\n"));
            }
        }
        out.push_str(&format!("evaluated_users: {}\n", self.evaluated_users));
        out
    }

    /// CSV rows `view,metric,k,value` for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("view,metric,k,value\n");
        for (view, metrics) in &self.per_view {
            for (k, v) in &metrics.recall_at {
                out.push_str(&format!("{view},recall,{k},{v}\n"));
            }
            for (k, v) in &metrics.ndcg_at {
                out.push_str(&format!("{view},ndcg,{k},{v}\n"));
            }
        }
        out
    }
}

/// Alignment (matched cross-view cosine) and dispersion (within-view
/// cosine among distinct entities) averages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentDispersionReport {
    /// Mean cross-view cosine of matched users.
    pub alignment_users: f64,
    /// Mean cross-view cosine of matched bundles.
    pub alignment_bundles: f64,
    /// Mean pairwise cosine among distinct users, bundle view.
    pub dispersion_users_bundle_view: f64,
    /// Mean pairwise cosine among distinct users, item view.
    pub dispersion_users_item_view: f64,
    /// Mean pairwise cosine among distinct bundles, bundle view.
    pub dispersion_bundles_bundle_view: f64,
    /// Mean pairwise cosine among distinct bundles, item view.
    pub dispersion_bundles_item_view: f64,
    /// Requested pair-sample count (0 = exact all-pairs).
    pub sample_size: usize,
}

impl AlignmentDispersionReport {
    /// CSV rows `metric,value` for plotting.
    pub fn to_csv(&self) -> String {
        format!(
            "metric,value\nalignment_users,{}\nalignment_bundles,{}\ndispersion_users_bundle_view,{}\ndispersion_users_item_view,{}\ndispersion_bundles_bundle_view,{}\ndispersion_bundles_item_view,{}\n",
            self.alignment_users,
            self.alignment_bundles,
            self.dispersion_users_bundle_view,
            self.dispersion_users_item_view,
            self.dispersion_bundles_bundle_view,
            self.dispersion_bundles_item_view,
        )
    }

    pub fn to_table(&self) -> String {
        format!(
            "metric                       value\n\
             alignment_users              {:+.6}\n\
             alignment_bundles            {:+.6}\n\
             dispersion_users_bundle_view {:+.6}\n\
             dispersion_users_item_view   {:+.6}\n\
             dispersion_bundles_bundle    {:+.6}\n\
             dispersion_bundles_item      {:+.6}\n",
            self.alignment_users,
            self.alignment_bundles,
            self.dispersion_users_bundle_view,
            self.dispersion_users_item_view,
            self.dispersion_bundles_bundle_view,
            self.dispersion_bundles_item_view,
        )
    }
}

fn per_user_lists(pairs: &[(u32, u32)], num_users: usize) -> Vec<Vec<u32>> {
    let mut lists = vec![Vec::new(); num_users];
    for &(u, b) in pairs {
        lists[u as usize].push(b);
    }
    lists
}

/// Recall/NDCG sums for one user's ranking, evaluated at each K.
fn user_metrics(
    scores: &mut [f64],
    truth: &[u32],
    masked: &[u32],
    ks: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    for &b in masked {
        scores[b as usize] = f64::NEG_INFINITY;
    }
    // canonicalize -0.0 so the tie rule sees one zero
    for s in scores.iter_mut() {
        *s += 0.0;
    }
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });

    let max_k = ks.iter().copied().max().unwrap_or(0).min(order.len());
    let mut recalls = Vec::with_capacity(ks.len());
    let mut ndcgs = Vec::with_capacity(ks.len());
    let mut hits = 0usize;
    let mut dcg = 0.0;
    let mut ki = 0;
    let sorted_truth = {
        let mut t = truth.to_vec();
        t.sort_unstable();
        t
    };
    for rank in 1..=max_k {
        let b = order[rank - 1];
        if sorted_truth.binary_search(&b).is_ok() {
            hits += 1;
            dcg += 1.0 / ((rank + 1) as f64).log2();
        }
        while ki < ks.len() && ks[ki] == rank {
            recalls.push(hits as f64 / truth.len() as f64);
            let ideal_slots = ks[ki].min(truth.len());
            let idcg: f64 = (1..=ideal_slots).map(|r| 1.0 / ((r + 1) as f64).log2()).sum();
            ndcgs.push(if idcg > 0.0 { dcg / idcg } else { 0.0 });
            ki += 1;
        }
    }
    // Ks beyond the catalog size see the full ranking
    while ki < ks.len() {
        recalls.push(hits as f64 / truth.len() as f64);
        let ideal_slots = ks[ki].min(truth.len());
        let idcg: f64 = (1..=ideal_slots).map(|r| 1.0 / ((r + 1) as f64).log2()).sum();
        ndcgs.push(if idcg > 0.0 { dcg / idcg } else { 0.0 });
        ki += 1;
    }
    (recalls, ndcgs)
}

fn score_all_bundles(reps: &ViewRepresentations, user: usize, view: ScoreView) -> Vec<f64> {
    let n = reps.bundle_bundle_view.rows();
    let u_b = reps.user_bundle_view.row(user);
    let u_i = reps.user_item_view.row(user);
    (0..n)
        .map(|b| match view {
            ScoreView::Bundle => dot(u_b, reps.bundle_bundle_view.row(b)),
            ScoreView::Item => dot(u_i, reps.bundle_item_view.row(b)),
            ScoreView::Both => {
                dot(u_b, reps.bundle_bundle_view.row(b)) + dot(u_i, reps.bundle_item_view.row(b))
            }
        })
        .collect()
}

/// Metrics for one scoring view; also returns the evaluated-user count.
pub fn rank_view_metrics(
    reps: &ViewRepresentations,
    split: &SplitDataset,
    target: EvalTarget,
    ks: &[usize],
    view: ScoreView,
    mask_validation_at_test: bool,
) -> Result<(ViewMetrics, usize)> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("Ks must be positive".into()));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let num_users = split.base.num_users;
    let truth_pairs = match target {
        EvalTarget::Validation => &split.validation,
        EvalTarget::Test => &split.test,
    };
    let truth = per_user_lists(truth_pairs, num_users);
    let train = per_user_lists(&split.train, num_users);
    let val_mask = match target {
        EvalTarget::Test if mask_validation_at_test => {
            Some(per_user_lists(&split.validation, num_users))
        }
        _ => None,
    };

    let eval_user = |u: usize| -> Option<(Vec<f64>, Vec<f64>)> {
        if truth[u].is_empty() {
            return None;
        }
        let mut scores = score_all_bundles(reps, u, view);
        let mut masked = train[u].clone();
        if let Some(vm) = &val_mask {
            masked.extend_from_slice(&vm[u]);
        }
        Some(user_metrics(&mut scores, &truth[u], &masked, &ks))
    };

    #[cfg(feature = "parallel")]
    let per_user: Vec<Option<(Vec<f64>, Vec<f64>)>> =
        (0..num_users).into_par_iter().map(eval_user).collect();
    #[cfg(not(feature = "parallel"))]
    let per_user: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..num_users).map(eval_user).collect();

    let mut recall_sums = vec![0.0; ks.len()];
    let mut ndcg_sums = vec![0.0; ks.len()];
    let mut evaluated = 0usize;
    for entry in per_user.into_iter().flatten() {
        evaluated += 1;
        for (s, v) in recall_sums.iter_mut().zip(&entry.0) {
            *s += v;
        }
        for (s, v) in ndcg_sums.iter_mut().zip(&entry.1) {
            *s += v;
        }
    }
    let mut metrics = ViewMetrics::default();
    for (i, &k) in ks.iter().enumerate() {
        let denom = evaluated.max(1) as f64;
        metrics.recall_at.insert(k, recall_sums[i] / denom);
        metrics.ndcg_at.insert(k, ndcg_sums[i] / denom);
    }
    Ok((metrics, evaluated))
}

/// Full report: metrics for all three views, with the requested view
/// copied to the top level.
pub fn rank_and_score(
    reps: &ViewRepresentations,
    split: &SplitDataset,
    target: EvalTarget,
    ks: &[usize],
    view: ScoreView,
    mask_validation_at_test: bool,
) -> Result<MetricsReport> {
    let mut per_view = BTreeMap::new();
    let mut evaluated_users = 0;
    for v in [ScoreView::Bundle, ScoreView::Item, ScoreView::Both] {
        let (metrics, evaluated) =
            rank_view_metrics(reps, split, target, ks, v, mask_validation_at_test)?;
        evaluated_users = evaluated;
        per_view.insert(v.name().to_string(), metrics);
    }
    let top = per_view[view.name()].clone();
    Ok(MetricsReport {
        view,
        recall_at: top.recall_at,
        ndcg_at: top.ndcg_at,
        per_view,
        evaluated_users,
    })
}

/// Rows normalized to unit length; errors on an exactly zero row.
fn unit_rows(mat: &Mat, entity: &'static str) -> Result<Mat> {
    let mut out = mat.clone();
    for i in 0..mat.rows() {
        let n = norm(mat.row(i));
        if n == 0.0 {
            return Err(Error::ZeroNormRow { entity, id: i });
        }
        for v in out.row_mut(i) {
            *v /= n;
        }
    }
    Ok(out)
}

fn mean_matched_cosine(a: &Mat, b: &Mat) -> f64 {
    let total: f64 = (0..a.rows()).map(|i| dot(a.row(i), b.row(i))).sum();
    total / a.rows() as f64
}

/// Mean cosine over distinct unordered pairs: exact when `sample` is 0,
/// otherwise over `sample` uniform draws.
fn mean_pairwise_cosine(unit: &Mat, sample: usize, rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let n = unit.rows();
    if sample == 0 {
        let mut total = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                total += dot(unit.row(i), unit.row(j));
            }
        }
        total / (n * (n - 1) / 2) as f64
    } else {
        let mut total = 0.0;
        for _ in 0..sample {
            let i = rng.random_range(0..n);
            let j = loop {
                let j = rng.random_range(0..n);
                if j != i {
                    break j;
                }
            };
            total += dot(unit.row(i), unit.row(j));
        }
        total / sample as f64
    }
}

/// Alignment and dispersion diagnostics over the final representations.
pub fn alignment_dispersion(
    reps: &ViewRepresentations,
    sample: usize,
    seed: u64,
) -> Result<AlignmentDispersionReport> {
    if reps.user_bundle_view.rows() < 2 || reps.bundle_bundle_view.rows() < 2 {
        return Err(Error::Config(
            "alignment-dispersion needs at least 2 users and 2 bundles".into(),
        ));
    }
    let user_b = unit_rows(&reps.user_bundle_view, "user")?;
    let user_i = unit_rows(&reps.user_item_view, "user")?;
    let bundle_b = unit_rows(&reps.bundle_bundle_view, "bundle")?;
    let bundle_i = unit_rows(&reps.bundle_item_view, "bundle")?;
    let mut rng = seeds::rng(seed, "dispersion", &[]);
    Ok(AlignmentDispersionReport {
        alignment_users: mean_matched_cosine(&user_b, &user_i),
        alignment_bundles: mean_matched_cosine(&bundle_b, &bundle_i),
        dispersion_users_bundle_view: mean_pairwise_cosine(&user_b, sample, &mut rng),
        dispersion_users_item_view: mean_pairwise_cosine(&user_i, sample, &mut rng),
        dispersion_bundles_bundle_view: mean_pairwise_cosine(&bundle_b, sample, &mut rng),
        dispersion_bundles_item_view: mean_pairwise_cosine(&bundle_i, sample, &mut rng),
        sample_size: sample,
    })
}

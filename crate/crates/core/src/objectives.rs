//! The joint training objective and its analytic gradients.
//!
//! The total loss combines the BPR ranking loss, the lambda1-weighted
//! cross-view contrastive loss, and the lambda2-weighted L2 term. The
//! contrastive loss is an InfoNCE over cosine similarities between the
//! two views of the same entity, with in-batch negatives; users and
//! bundles get one loss each and the two are averaged. Gradients are
//! produced with respect to the four final representation matrices (to
//! be chained through the encoder backward) plus direct layer-0
//! contributions from the L2 term.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingState, RepGradients, ViewRepresentations};
use crate::error::{Error, Result};
use crate::mat::{dot, norm, Mat};

/// Which view's inner product scores a (user, bundle) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreView {
    Bundle,
    Item,
    Both,
}

impl ScoreView {
    pub fn name(self) -> &'static str {
        match self {
            ScoreView::Bundle => "bundle",
            ScoreView::Item => "item",
            ScoreView::Both => "both",
        }
    }
}

/// Which terms enter the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// BPR + InfoNCE contrastive + L2.
    Full,
    /// BPR + L2 only (contrastive still reported for the log).
    NoCl,
    /// Contrastive term replaced by negative mean cross-view cosine.
    AlignOnly,
    /// InfoNCE with the numerator similarity pinned to 1, so only the
    /// denominator (dispersion) pushes gradients.
    DisperseOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Contrastive weight lambda1.
    pub lambda1: f64,
    /// L2 weight lambda2.
    pub lambda2: f64,
    /// InfoNCE temperature tau.
    pub temperature: f64,
    pub mode: LossMode,
    /// Divide the BPR sum by the batch size (keeps lambda grids comparable
    /// across batch sizes).
    pub bpr_mean: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 0.1,
            lambda2: 2e-5,
            temperature: 0.2,
            mode: LossMode::Full,
            bpr_mean: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("lambda weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// A batch of (user, positive bundle, negative bundle) triples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    pub users: Vec<u32>,
    pub pos_bundles: Vec<u32>,
    pub neg_bundles: Vec<u32>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn distinct_users(&self) -> Vec<u32> {
        self.users.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn distinct_pos_bundles(&self) -> Vec<u32> {
        self.pos_bundles
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn distinct_neg_bundles(&self) -> Vec<u32> {
        self.neg_bundles
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Every term of one step's loss. `total` always satisfies
/// total = bpr + lambda1_eff * contrastive + lambda2 * l2.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub contrastive_user: f64,
    pub contrastive_bundle: f64,
    pub contrastive: f64,
    pub l2: f64,
    pub total: f64,
}

/// Inner-product scores for (user, bundle) pairs under the chosen view.
pub fn predict_scores(
    reps: &ViewRepresentations,
    pairs: &[(u32, u32)],
    view: ScoreView,
) -> Result<Vec<f64>> {
    let m = reps.user_bundle_view.rows();
    let n = reps.bundle_bundle_view.rows();
    let mut out = Vec::with_capacity(pairs.len());
    for &(u, b) in pairs {
        if u as usize >= m {
            return Err(Error::IdOutOfRange {
                entity: "user",
                id: u as usize,
                count: m,
            });
        }
        if b as usize >= n {
            return Err(Error::IdOutOfRange {
                entity: "bundle",
                id: b as usize,
                count: n,
            });
        }
        let bundle_score = dot(
            reps.user_bundle_view.row(u as usize),
            reps.bundle_bundle_view.row(b as usize),
        );
        let item_score = dot(
            reps.user_item_view.row(u as usize),
            reps.bundle_item_view.row(b as usize),
        );
        out.push(match view {
            ScoreView::Bundle => bundle_score,
            ScoreView::Item => item_score,
            ScoreView::Both => bundle_score + item_score,
        });
    }
    Ok(out)
}

/// Numerically stable ln(1 + e^x).
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic sigmoid.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise ranking loss, summed over triples:
/// sum_t softplus(-(pos_t - neg_t)). Returns (loss, d/d pos, d/d neg).
pub fn bpr_loss(scores_pos: &[f64], scores_neg: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    assert_eq!(scores_pos.len(), scores_neg.len());
    let mut loss = 0.0;
    let mut d_pos = Vec::with_capacity(scores_pos.len());
    let mut d_neg = Vec::with_capacity(scores_pos.len());
    for (&p, &n) in scores_pos.iter().zip(scores_neg) {
        let delta = p - n;
        loss += softplus(-delta);
        let g = sigmoid(-delta);
        d_pos.push(-g);
        d_neg.push(g);
    }
    (loss, d_pos, d_neg)
}

/// Row-normalized copy plus the norms; errors on an exactly zero row.
fn normalize_rows(mat: &Mat, entity: &'static str, ids: &[u32]) -> Result<(Mat, Vec<f64>)> {
    let mut normed = mat.clone();
    let mut norms = Vec::with_capacity(mat.rows());
    for i in 0..mat.rows() {
        let n = norm(mat.row(i));
        if n == 0.0 {
            return Err(Error::ZeroNormRow {
                entity,
                id: ids.get(i).map_or(i, |&x| x as usize),
            });
        }
        for v in normed.row_mut(i) {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((normed, norms))
}

/// InfoNCE over matched rows of two views (row i of each matrix is the
/// same entity). Loss per anchor i:
/// -log( exp(cos(a_i, z_i)/tau) / sum_j exp(cos(a_i, z_j)/tau) ),
/// averaged over anchors; the denominator includes j = i. Returns the loss
/// and gradients w.r.t. both input matrices.
pub fn infonce_loss(anchor: &Mat, other: &Mat, temperature: f64) -> Result<(f64, Mat, Mat)> {
    infonce_impl(anchor, other, temperature, "entity", &[], false)
}

fn infonce_impl(
    anchor: &Mat,
    other: &Mat,
    temperature: f64,
    entity: &'static str,
    ids: &[u32],
    static_numerator: bool,
) -> Result<(f64, Mat, Mat)> {
    let n = anchor.rows();
    let d = anchor.cols();
    if n < 2 {
        return Err(Error::ContrastiveBatchTooSmall(n));
    }
    other.check_shape(n, d, "contrastive other view")?;
    let (a_hat, a_norms) = normalize_rows(anchor, entity, ids)?;
    let (z_hat, z_norms) = normalize_rows(other, entity, ids)?;

    // cosine matrix
    let mut cos = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            cos.row_mut(i)[j] = dot(a_hat.row(i), z_hat.row(j));
        }
    }

    // softmax over each anchor's row, max-subtracted
    let mut probs = Mat::zeros(n, n);
    let mut loss = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = cos.row(i).iter().map(|c| c / temperature).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &l in &logits {
            z += (l - max).exp();
        }
        let log_denom = max + z.ln();
        let numerator = if static_numerator {
            1.0 / temperature
        } else {
            logits[i]
        };
        loss += log_denom - numerator;
        for (p, &logit) in probs.row_mut(i).iter_mut().zip(&logits) {
            *p = (logit - max).exp() / z;
        }
    }
    loss /= n as f64;

    // W = (P - I)/n for the standard loss, P/n when the numerator is static
    let mut g_anchor = Mat::zeros(n, d);
    let mut g_other = Mat::zeros(n, d);
    let scale = 1.0 / (n as f64 * temperature);
    for i in 0..n {
        let mut w_row = probs.row(i).to_vec();
        if !static_numerator {
            w_row[i] -= 1.0;
        }
        // d loss / d a_i = scale/(|a_i|) * (sum_j w_ij z_hat_j - (sum_j w_ij cos_ij) a_hat_i)
        let mut coeff = 0.0;
        for j in 0..n {
            let w = w_row[j];
            if w != 0.0 {
                g_anchor.axpy_row(i, w * scale / a_norms[i], z_hat.row(j));
                coeff += w * cos.row(i)[j];
            }
            // transpose side: d loss / d z_j gets w_ij * a_hat_i
            g_other.axpy_row(j, w * scale / z_norms[j], a_hat.row(i));
        }
        g_anchor.axpy_row(i, -coeff * scale / a_norms[i], a_hat.row(i));
        for j in 0..n {
            let w = w_row[j];
            if w != 0.0 {
                g_other.axpy_row(j, -w * cos.row(i)[j] * scale / z_norms[j], z_hat.row(j));
            }
        }
    }
    Ok((loss, g_anchor, g_other))
}

/// Negative mean cross-view cosine of matched rows (alignment-only
/// objective). Returns the loss and gradients w.r.t. both matrices.
fn cosine_alignment_loss(
    anchor: &Mat,
    other: &Mat,
    entity: &'static str,
    ids: &[u32],
) -> Result<(f64, Mat, Mat)> {
    let n = anchor.rows();
    let d = anchor.cols();
    other.check_shape(n, d, "alignment other view")?;
    let (a_hat, a_norms) = normalize_rows(anchor, entity, ids)?;
    let (z_hat, z_norms) = normalize_rows(other, entity, ids)?;
    let mut loss = 0.0;
    let mut g_anchor = Mat::zeros(n, d);
    let mut g_other = Mat::zeros(n, d);
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let c = dot(a_hat.row(i), z_hat.row(i));
        loss -= c * inv_n;
        // d(-cos)/da = -(z_hat - cos*a_hat)/|a|
        g_anchor.axpy_row(i, -inv_n / a_norms[i], z_hat.row(i));
        g_anchor.axpy_row(i, c * inv_n / a_norms[i], a_hat.row(i));
        g_other.axpy_row(i, -inv_n / z_norms[i], a_hat.row(i));
        g_other.axpy_row(i, c * inv_n / z_norms[i], z_hat.row(i));
    }
    Ok((loss, g_anchor, g_other))
}

/// Sparse per-row gradients destined for one embedding table.
pub type RowGrads = Vec<(u32, Vec<f64>)>;

/// Direct layer-0 gradients (currently only the L2 term produces these).
#[derive(Debug, Clone, Default)]
pub struct DirectTableGradients {
    pub user: RowGrads,
    pub bundle: RowGrads,
    pub item: RowGrads,
}

impl DirectTableGradients {
    /// Accumulate into dense per-table gradients.
    pub fn add_to(&self, grads: &mut crate::encoder::TableGradients) {
        for (id, row) in &self.user {
            grads.user.axpy_row(*id as usize, 1.0, row);
        }
        for (id, row) in &self.bundle {
            grads.bundle.axpy_row(*id as usize, 1.0, row);
        }
        for (id, row) in &self.item {
            grads.item.axpy_row(*id as usize, 1.0, row);
        }
    }
}

/// Squared layer-0 embedding norm of the batch's distinct users, distinct
/// positive bundles, and distinct negative bundles, divided by the batch
/// size. Returns the value and its (unweighted) gradients.
pub fn l2_term(state: &EmbeddingState, batch: &TrainBatch) -> (f64, DirectTableGradients) {
    let t = batch.len() as f64;
    let mut value = 0.0;
    let mut grads = DirectTableGradients::default();
    let mut add = |table: &Mat, ids: &[u32], out: &mut RowGrads| {
        for &id in ids {
            let row = table.row(id as usize);
            value += dot(row, row) / t;
            out.push((id, row.iter().map(|v| 2.0 * v / t).collect()));
        }
    };
    add(&state.user, &batch.distinct_users(), &mut grads.user);
    add(&state.bundle, &batch.distinct_pos_bundles(), &mut grads.bundle);
    add(&state.bundle, &batch.distinct_neg_bundles(), &mut grads.bundle);
    (value, grads)
}

/// Everything `total_loss` produces for one batch.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    /// Gradients w.r.t. the final representations (already weighted).
    pub rep_grads: RepGradients,
    /// Layer-0 gradients from the L2 term (already weighted by lambda2).
    pub direct_grads: DirectTableGradients,
}

fn gather_rows(mat: &Mat, ids: &[u32]) -> Mat {
    let mut out = Mat::zeros(ids.len(), mat.cols());
    for (i, &id) in ids.iter().enumerate() {
        out.row_mut(i).copy_from_slice(mat.row(id as usize));
    }
    out
}

fn scatter_rows(target: &mut Mat, ids: &[u32], grads: &Mat, scale: f64) {
    for (i, &id) in ids.iter().enumerate() {
        target.axpy_row(id as usize, scale, grads.row(i));
    }
}

/// Compute the full training objective and all gradients for one batch.
pub fn total_loss(
    reps: &ViewRepresentations,
    state: &EmbeddingState,
    batch: &TrainBatch,
    config: &LossConfig,
) -> Result<LossOutput> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let num_users = reps.user_bundle_view.rows();
    let num_bundles = reps.bundle_bundle_view.rows();
    let dim = reps.user_bundle_view.cols();
    let t = batch.len() as f64;
    let bpr_scale = if config.bpr_mean { 1.0 / t } else { 1.0 };

    let mut rep_grads = RepGradients::zeros(num_users, num_bundles, dim);

    // ---- BPR over both-view scores -------------------------------------
    let pos_pairs: Vec<(u32, u32)> = batch
        .users
        .iter()
        .copied()
        .zip(batch.pos_bundles.iter().copied())
        .collect();
    let neg_pairs: Vec<(u32, u32)> = batch
        .users
        .iter()
        .copied()
        .zip(batch.neg_bundles.iter().copied())
        .collect();
    let pos_scores = predict_scores(reps, &pos_pairs, ScoreView::Both)?;
    let neg_scores = predict_scores(reps, &neg_pairs, ScoreView::Both)?;
    let (bpr_sum, d_pos, d_neg) = bpr_loss(&pos_scores, &neg_scores);
    let bpr_value = bpr_sum * bpr_scale;

    for i in 0..batch.len() {
        let (u, bp, bn) = (
            batch.users[i] as usize,
            batch.pos_bundles[i] as usize,
            batch.neg_bundles[i] as usize,
        );
        let (gp, gn) = (d_pos[i] * bpr_scale, d_neg[i] * bpr_scale);
        // d y_ub / d e_u = e_b (per view) and vice versa
        let u_b_row: Vec<f64> = reps.user_bundle_view.row(u).to_vec();
        let u_i_row: Vec<f64> = reps.user_item_view.row(u).to_vec();
        rep_grads
            .user_bundle_view
            .axpy_row(u, gp, reps.bundle_bundle_view.row(bp));
        rep_grads
            .user_bundle_view
            .axpy_row(u, gn, reps.bundle_bundle_view.row(bn));
        rep_grads.bundle_bundle_view.axpy_row(bp, gp, &u_b_row);
        rep_grads.bundle_bundle_view.axpy_row(bn, gn, &u_b_row);
        rep_grads
            .user_item_view
            .axpy_row(u, gp, reps.bundle_item_view.row(bp));
        rep_grads
            .user_item_view
            .axpy_row(u, gn, reps.bundle_item_view.row(bn));
        rep_grads.bundle_item_view.axpy_row(bp, gp, &u_i_row);
        rep_grads.bundle_item_view.axpy_row(bn, gn, &u_i_row);
    }

    // ---- cross-view contrastive terms ----------------------------------
    let users = batch.distinct_users();
    let bundles = batch.distinct_pos_bundles();
    let user_anchor = gather_rows(&reps.user_bundle_view, &users);
    let user_other = gather_rows(&reps.user_item_view, &users);
    let bundle_anchor = gather_rows(&reps.bundle_bundle_view, &bundles);
    let bundle_other = gather_rows(&reps.bundle_item_view, &bundles);

    let contrastive_pair = |anchor: &Mat,
                            other: &Mat,
                            entity: &'static str,
                            ids: &[u32]|
     -> Result<(f64, Mat, Mat)> {
        match config.mode {
            LossMode::Full | LossMode::NoCl => {
                infonce_impl(anchor, other, config.temperature, entity, ids, false)
            }
            LossMode::DisperseOnly => {
                infonce_impl(anchor, other, config.temperature, entity, ids, true)
            }
            LossMode::AlignOnly => cosine_alignment_loss(anchor, other, entity, ids),
        }
    };

    let (cl_user, cl_bundle, lambda1_eff) = if config.mode == LossMode::NoCl {
        // contrastive terms are reported for the log but carry no gradient;
        // fall back to 0 when the batch cannot support them
        let lu = contrastive_pair(&user_anchor, &user_other, "user", &users)
            .map(|(l, _, _)| l)
            .unwrap_or(0.0);
        let lb = contrastive_pair(&bundle_anchor, &bundle_other, "bundle", &bundles)
            .map(|(l, _, _)| l)
            .unwrap_or(0.0);
        (lu, lb, 0.0)
    } else {
        let (lu, gu_anchor, gu_other) =
            contrastive_pair(&user_anchor, &user_other, "user", &users)?;
        let (lb, gb_anchor, gb_other) =
            contrastive_pair(&bundle_anchor, &bundle_other, "bundle", &bundles)?;
        let w = config.lambda1 * 0.5;
        scatter_rows(&mut rep_grads.user_bundle_view, &users, &gu_anchor, w);
        scatter_rows(&mut rep_grads.user_item_view, &users, &gu_other, w);
        scatter_rows(&mut rep_grads.bundle_bundle_view, &bundles, &gb_anchor, w);
        scatter_rows(&mut rep_grads.bundle_item_view, &bundles, &gb_other, w);
        (lu, lb, config.lambda1)
    };
    let contrastive = 0.5 * (cl_user + cl_bundle);

    // ---- L2 over touched layer-0 rows ----------------------------------
    let (l2_value, l2_grads) = l2_term(state, batch);
    let mut direct_grads = l2_grads;
    for grads in [
        &mut direct_grads.user,
        &mut direct_grads.bundle,
        &mut direct_grads.item,
    ] {
        for (_, row) in grads.iter_mut() {
            for v in row.iter_mut() {
                *v *= config.lambda2;
            }
        }
    }

    let total = bpr_value + lambda1_eff * contrastive + config.lambda2 * l2_value;
    Ok(LossOutput {
        breakdown: LossBreakdown {
            bpr: bpr_value,
            contrastive_user: cl_user,
            contrastive_bundle: cl_bundle,
            contrastive,
            l2: l2_value,
            total,
        },
        rep_grads,
        direct_grads,
    })
}

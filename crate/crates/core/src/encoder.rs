//! Embedding tables and the two-view encoder.
//!
//! Three learnable tables (users, bundles, items; the user table is shared
//! between views) are propagated over the user-bundle and user-item
//! graphs. Layer k of one side is the normalized weighted sum of the other
//! side's layer k-1; the final representation is the plain sum of layers
//! 0..=K. Item-view bundle representations are the average of their items'
//! final representations.
//!
//! The whole encoder is linear in the tables, so the backward pass is a
//! reverse traversal of the same sparse products (with the message-dropout
//! masks replayed); no nonlinearities, no transformation matrices.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::BundleDataset;
use crate::error::{Error, Result};
use crate::graph::{
    build_ub_graph, build_ui_graph, edge_dropout, AugmentationConfig, AugmentationMode,
    NormalizedBipartiteGraph,
};
use crate::mat::Mat;
use crate::seeds;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// The learnable state: layer-0 embedding tables for users, bundles, items.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingState {
    pub user: Mat,
    pub bundle: Mat,
    pub item: Mat,
}

impl EmbeddingState {
    pub fn dim(&self) -> usize {
        self.user.cols()
    }

    pub fn num_users(&self) -> usize {
        self.user.rows()
    }

    pub fn num_bundles(&self) -> usize {
        self.bundle.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item.rows()
    }

    /// Total learnable parameter count: (M + N + O) * d.
    pub fn param_count(&self) -> usize {
        (self.num_users() + self.num_bundles() + self.num_items()) * self.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.user.is_finite() && self.bundle.is_finite() && self.item.is_finite()
    }
}

/// Encoder hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding dimensionality d.
    pub embedding_dim: usize,
    /// Propagation depth K.
    pub num_layers: usize,
    /// Multiplier on the Xavier-normal std (1.0 = plain Xavier).
    pub init_scale: f64,
    pub include_self_connections: bool,
    pub include_bundle_bundle: bool,
    pub augmentation: AugmentationConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 64,
            num_layers: 2,
            init_scale: 1.0,
            include_self_connections: false,
            include_bundle_bundle: false,
            augmentation: AugmentationConfig::default(),
        }
    }
}

/// Xavier-normal std for square fan: sqrt(2/(d+d)) = 1/sqrt(d).
pub fn xavier_std(dim: usize) -> f64 {
    (2.0 / (dim as f64 + dim as f64)).sqrt()
}

/// Draw the three tables i.i.d. normal with Xavier-normal std,
/// deterministic given the seed.
pub fn init_embeddings(
    num_users: usize,
    num_bundles: usize,
    num_items: usize,
    dim: usize,
    init_scale: f64,
    seed: u64,
) -> EmbeddingState {
    let std = init_scale * xavier_std(dim);
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    let mut rng = seeds::rng(seed, "init", &[]);
    let mut table = |rows: usize| {
        let data: Vec<f64> = (0..rows * dim).map(|_| normal.sample(&mut rng)).collect();
        Mat::from_vec(rows, dim, data)
    };
    EmbeddingState {
        user: table(num_users),
        bundle: table(num_bundles),
        item: table(num_items),
    }
}

/// Mean pooling from item rows to bundle rows over the bundle-item
/// relation, with the transpose index for the backward pass.
#[derive(Debug, Clone)]
pub struct BundleItemPool {
    num_bundles: usize,
    num_items: usize,
    bundle_ptr: Vec<usize>,
    /// (item, 1/|N_b|) per bundle, sorted by (bundle, item).
    bundle_adj: Vec<(u32, f64)>,
    item_ptr: Vec<usize>,
    item_adj: Vec<(u32, f64)>,
}

impl BundleItemPool {
    pub fn new(dataset: &BundleDataset) -> Self {
        let mut counts = vec![0usize; dataset.num_bundles];
        for &(b, _) in &dataset.bundle_item {
            counts[b as usize] += 1;
        }
        let weighted: Vec<(u32, u32, f64)> = dataset
            .bundle_item
            .iter()
            .map(|&(b, i)| (b, i, 1.0 / counts[b as usize] as f64))
            .collect();
        let mut bundle_ptr = vec![0usize; dataset.num_bundles + 1];
        for &(b, _, _) in &weighted {
            bundle_ptr[b as usize + 1] += 1;
        }
        for i in 0..dataset.num_bundles {
            bundle_ptr[i + 1] += bundle_ptr[i];
        }
        let bundle_adj: Vec<(u32, f64)> = weighted.iter().map(|&(_, i, w)| (i, w)).collect();

        let mut transposed: Vec<(u32, u32, f64)> =
            weighted.iter().map(|&(b, i, w)| (i, b, w)).collect();
        transposed.sort_unstable_by_key(|&(i, b, _)| (i, b));
        let mut item_ptr = vec![0usize; dataset.num_items + 1];
        for &(i, _, _) in &transposed {
            item_ptr[i as usize + 1] += 1;
        }
        for i in 0..dataset.num_items {
            item_ptr[i + 1] += item_ptr[i];
        }
        let item_adj: Vec<(u32, f64)> = transposed.iter().map(|&(_, b, w)| (b, w)).collect();

        BundleItemPool {
            num_bundles: dataset.num_bundles,
            num_items: dataset.num_items,
            bundle_ptr,
            bundle_adj,
            item_ptr,
            item_adj,
        }
    }

    pub fn item_count_of(&self, bundle: usize) -> usize {
        self.bundle_ptr[bundle + 1] - self.bundle_ptr[bundle]
    }

    fn gather_row(adj: &[(u32, f64)], src: &Mat, out: &mut [f64]) {
        out.fill(0.0);
        for &(j, w) in adj {
            for (o, v) in out.iter_mut().zip(src.row(j as usize)) {
                *o += w * v;
            }
        }
    }

    /// Bundle rows as the mean of their items' rows. Errors on a bundle
    /// with zero items (the mean is undefined).
    pub fn forward(&self, item_reps: &Mat) -> Result<Mat> {
        item_reps.check_shape(self.num_items, item_reps.cols(), "item reps")?;
        for b in 0..self.num_bundles {
            if self.item_count_of(b) == 0 {
                return Err(Error::EmptyBundle(b));
            }
        }
        let cols = item_reps.cols();
        let mut out = Mat::zeros(self.num_bundles, cols);
        let fill = |b: usize, row: &mut [f64]| {
            Self::gather_row(
                &self.bundle_adj[self.bundle_ptr[b]..self.bundle_ptr[b + 1]],
                item_reps,
                row,
            )
        };
        #[cfg(feature = "parallel")]
        out.data_mut()
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(b, row)| fill(b, row));
        #[cfg(not(feature = "parallel"))]
        for b in 0..self.num_bundles {
            fill(b, out.row_mut(b));
        }
        Ok(out)
    }

    /// Scatter bundle-level gradients back to items (transpose product).
    pub fn backward(&self, bundle_grads: &Mat) -> Mat {
        let cols = bundle_grads.cols();
        let mut out = Mat::zeros(self.num_items, cols);
        let fill = |i: usize, row: &mut [f64]| {
            Self::gather_row(
                &self.item_adj[self.item_ptr[i]..self.item_ptr[i + 1]],
                bundle_grads,
                row,
            )
        };
        #[cfg(feature = "parallel")]
        out.data_mut()
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| fill(i, row));
        #[cfg(not(feature = "parallel"))]
        for i in 0..self.num_items {
            fill(i, out.row_mut(i));
        }
        out
    }
}

/// Free-function form of the pooling operation.
pub fn pool_bundle_item(item_reps: &Mat, pool: &BundleItemPool) -> Result<Mat> {
    pool.forward(item_reps)
}

/// The two propagation graphs plus the pooling index, built once per split.
#[derive(Debug, Clone)]
pub struct Graphs {
    pub ub: NormalizedBipartiteGraph,
    pub ui: NormalizedBipartiteGraph,
    pub pool: BundleItemPool,
}

impl Graphs {
    /// Build from the training interactions of a dataset.
    pub fn build(
        dataset: &BundleDataset,
        train_pairs: &[(u32, u32)],
        config: &ModelConfig,
    ) -> Self {
        let train_view = BundleDataset {
            user_bundle: train_pairs.to_vec(),
            ..dataset.clone()
        };
        Graphs {
            ub: build_ub_graph(
                &train_view,
                config.include_self_connections,
                config.include_bundle_bundle,
            ),
            ui: build_ui_graph(dataset),
            pool: BundleItemPool::new(dataset),
        }
    }
}

/// Message-dropout parameters for one propagation run.
#[derive(Debug, Clone, Copy)]
pub struct MessageDropout {
    pub ratio: f64,
    pub seed: u64,
}

/// Per-layer values (and dropout masks) retained for the backward pass.
#[derive(Debug, Clone)]
pub struct PropagationTrace {
    /// (left, right) matrices for layers 0..=K.
    pub layers: Vec<(Mat, Mat)>,
    /// Keep-masks for layers 1..=K when message dropout was active.
    masks: Option<Vec<(Vec<bool>, Vec<bool>)>>,
    keep: f64,
}

fn draw_mask(rng: &mut rand_chacha::ChaCha8Rng, len: usize, rho: f64) -> Vec<bool> {
    (0..len).map(|_| rng.random::<f64>() >= rho).collect()
}

fn apply_mask(mat: &mut Mat, mask: &[bool], keep: f64) {
    for (v, &m) in mat.data_mut().iter_mut().zip(mask) {
        *v = if m { *v / keep } else { 0.0 };
    }
}

/// K layers of alternating propagation plus layer-sum aggregation.
///
/// With message dropout, each propagated layer (k >= 1) is masked i.i.d.
/// with probability rho and survivors are rescaled by 1/(1-rho) so the
/// expectation matches the undropped pass; the masked values feed the next
/// layer. Layer 0 is never masked.
pub fn propagate(
    graph: &NormalizedBipartiteGraph,
    left0: &Mat,
    right0: &Mat,
    num_layers: usize,
    md: Option<MessageDropout>,
) -> Result<(Mat, Mat, PropagationTrace)> {
    left0.check_shape(graph.left_count(), left0.cols(), "left table")?;
    right0.check_shape(graph.right_count(), right0.cols(), "right table")?;
    if left0.cols() != right0.cols() {
        return Err(Error::ShapeMismatch {
            expected: format!("matching embedding dims, left has {}", left0.cols()),
            got: format!("right has {}", right0.cols()),
        });
    }
    if let Some(md) = md {
        if !(0.0..1.0).contains(&md.ratio) {
            return Err(Error::InvalidDropoutRatio(md.ratio));
        }
    }
    let keep = md.map_or(1.0, |m| 1.0 - m.ratio);
    let mut mask_rng = md.map(|m| seeds::rng(m.seed, "message_dropout", &[]));
    let active_md = md.is_some_and(|m| m.ratio > 0.0);

    let mut layers = vec![(left0.clone(), right0.clone())];
    let mut masks = active_md.then(Vec::new);
    for _ in 0..num_layers {
        let (prev_left, prev_right) = layers.last().expect("layer 0 present");
        let mut next_left = graph.prop_left(prev_left, prev_right);
        let mut next_right = graph.prop_right(prev_left, prev_right);
        if active_md {
            let rng = mask_rng.as_mut().expect("rng present when md active");
            let rho = md.expect("md present").ratio;
            let left_mask = draw_mask(rng, next_left.data().len(), rho);
            let right_mask = draw_mask(rng, next_right.data().len(), rho);
            apply_mask(&mut next_left, &left_mask, keep);
            apply_mask(&mut next_right, &right_mask, keep);
            masks
                .as_mut()
                .expect("mask storage")
                .push((left_mask, right_mask));
        }
        layers.push((next_left, next_right));
    }

    let mut left_star = layers[0].0.clone();
    let mut right_star = layers[0].1.clone();
    for (l, r) in &layers[1..] {
        left_star.axpy(1.0, l);
        right_star.axpy(1.0, r);
    }
    Ok((
        left_star,
        right_star,
        PropagationTrace {
            layers,
            masks,
            keep,
        },
    ))
}

/// Gradients of a loss w.r.t. the layer-0 inputs of `propagate`, given the
/// gradients w.r.t. the aggregated outputs.
///
/// Every layer contributes to the output sum directly and feeds the next
/// layer, so walking k = K..1 accumulates g[k-1] = g_star + P(mask(g[k])),
/// where P is the (symmetric) normalized propagation step.
pub fn propagate_backward(
    graph: &NormalizedBipartiteGraph,
    trace: &PropagationTrace,
    g_left_star: &Mat,
    g_right_star: &Mat,
) -> (Mat, Mat) {
    let num_layers = trace.layers.len() - 1;
    let mut g_left = g_left_star.clone();
    let mut g_right = g_right_star.clone();
    for k in (1..=num_layers).rev() {
        let (mut gl, mut gr) = (g_left, g_right);
        if let Some(masks) = &trace.masks {
            let (left_mask, right_mask) = &masks[k - 1];
            apply_mask(&mut gl, left_mask, trace.keep);
            apply_mask(&mut gr, right_mask, trace.keep);
        }
        g_left = g_left_star.clone();
        g_left.axpy(1.0, &graph.prop_left(&gl, &gr));
        g_right = g_right_star.clone();
        g_right.axpy(1.0, &graph.prop_right(&gl, &gr));
    }
    (g_left, g_right)
}

/// Final representations of one forward pass plus everything the backward
/// pass needs to replay it.
#[derive(Debug, Clone)]
pub struct ViewRepresentations {
    /// e_u in the bundle view, M x d.
    pub user_bundle_view: Mat,
    /// e_b in the bundle view, N x d.
    pub bundle_bundle_view: Mat,
    /// e_u in the item view, M x d.
    pub user_item_view: Mat,
    /// e_b in the item view (pooled), N x d.
    pub bundle_item_view: Mat,
    /// e_i in the item view, O x d.
    pub item_item_view: Mat,
    pub ub_trace: PropagationTrace,
    pub ui_trace: PropagationTrace,
    /// Dropped graphs when edge dropout was active this pass.
    ub_graph_override: Option<NormalizedBipartiteGraph>,
    ui_graph_override: Option<NormalizedBipartiteGraph>,
}

impl ViewRepresentations {
    pub fn is_finite(&self) -> bool {
        self.user_bundle_view.is_finite()
            && self.bundle_bundle_view.is_finite()
            && self.user_item_view.is_finite()
            && self.bundle_item_view.is_finite()
            && self.item_item_view.is_finite()
    }

    fn ub_graph<'a>(&'a self, base: &'a NormalizedBipartiteGraph) -> &'a NormalizedBipartiteGraph {
        self.ub_graph_override.as_ref().unwrap_or(base)
    }

    fn ui_graph<'a>(&'a self, base: &'a NormalizedBipartiteGraph) -> &'a NormalizedBipartiteGraph {
        self.ui_graph_override.as_ref().unwrap_or(base)
    }
}

/// Gradients of the loss w.r.t. the four final representation matrices.
#[derive(Debug, Clone)]
pub struct RepGradients {
    pub user_bundle_view: Mat,
    pub bundle_bundle_view: Mat,
    pub user_item_view: Mat,
    pub bundle_item_view: Mat,
}

impl RepGradients {
    pub fn zeros(num_users: usize, num_bundles: usize, dim: usize) -> Self {
        RepGradients {
            user_bundle_view: Mat::zeros(num_users, dim),
            bundle_bundle_view: Mat::zeros(num_bundles, dim),
            user_item_view: Mat::zeros(num_users, dim),
            bundle_item_view: Mat::zeros(num_bundles, dim),
        }
    }
}

/// Gradients w.r.t. the three embedding tables.
#[derive(Debug, Clone)]
pub struct TableGradients {
    pub user: Mat,
    pub bundle: Mat,
    pub item: Mat,
}

/// Full two-view forward pass.
///
/// Bundle view: propagate (user, bundle) tables over the U-B graph.
/// Item view: propagate (user, item) tables over the U-I graph, then pool
/// item representations into bundles. Edge dropout redraws the graphs from
/// (augmentation seed, `epoch_seed`, view tag); message dropout masks each
/// propagated layer; OP touches nothing and is fully deterministic.
pub fn forward(
    state: &EmbeddingState,
    graphs: &Graphs,
    config: &ModelConfig,
    epoch_seed: u64,
) -> Result<ViewRepresentations> {
    let aug = &config.augmentation;
    let (ub_override, ui_override) = match aug.mode {
        AugmentationMode::Ed if aug.dropout_ratio > 0.0 => {
            let ub_seed = seeds::derive(aug.seed, "ed-ub", &[epoch_seed]);
            let ui_seed = seeds::derive(aug.seed, "ed-ui", &[epoch_seed]);
            (
                Some(edge_dropout(&graphs.ub, aug.dropout_ratio, ub_seed)?),
                Some(edge_dropout(&graphs.ui, aug.dropout_ratio, ui_seed)?),
            )
        }
        _ => (None, None),
    };
    let md = |tag: &str| -> Option<MessageDropout> {
        (aug.mode == AugmentationMode::Md).then(|| MessageDropout {
            ratio: aug.dropout_ratio,
            seed: seeds::derive(aug.seed, tag, &[epoch_seed]),
        })
    };

    let ub_graph = ub_override.as_ref().unwrap_or(&graphs.ub);
    let (user_bundle_view, bundle_bundle_view, ub_trace) = propagate(
        ub_graph,
        &state.user,
        &state.bundle,
        config.num_layers,
        md("md-ub"),
    )?;

    let ui_graph = ui_override.as_ref().unwrap_or(&graphs.ui);
    let (user_item_view, item_item_view, ui_trace) = propagate(
        ui_graph,
        &state.user,
        &state.item,
        config.num_layers,
        md("md-ui"),
    )?;
    let bundle_item_view = graphs.pool.forward(&item_item_view)?;

    Ok(ViewRepresentations {
        user_bundle_view,
        bundle_bundle_view,
        user_item_view,
        bundle_item_view,
        item_item_view,
        ub_trace,
        ui_trace,
        ub_graph_override: ub_override,
        ui_graph_override: ui_override,
    })
}

/// Chain representation-level gradients back into the three tables.
///
/// The shared user table receives contributions from both views; item
/// gradients arrive only through the pooling transpose.
pub fn backward(
    reps: &ViewRepresentations,
    graphs: &Graphs,
    grads: &RepGradients,
) -> TableGradients {
    let (g_user_b, g_bundle) = propagate_backward(
        reps.ub_graph(&graphs.ub),
        &reps.ub_trace,
        &grads.user_bundle_view,
        &grads.bundle_bundle_view,
    );
    let g_item_star = graphs.pool.backward(&grads.bundle_item_view);
    let (g_user_i, g_item) = propagate_backward(
        reps.ui_graph(&graphs.ui),
        &reps.ui_trace,
        &grads.user_item_view,
        &g_item_star,
    );
    let mut user = g_user_b;
    user.axpy(1.0, &g_user_i);
    TableGradients {
        user,
        bundle: g_bundle,
        item: g_item,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};

    fn small_dataset() -> BundleDataset {
        generate_synthetic(&SyntheticSpec {
            users: 12,
            bundles: 8,
            items: 16,
            blocks: 4,
            noise_rate: 0.25,
            seed: 5,
        })
        .unwrap()
    }

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = seeds::rng(seed, "test_mat", &[]);
        let data = (0..rows * cols)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        Mat::from_vec(rows, cols, data)
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_embeddings(2, 2, 2, 4, 1.0, 9);
        let b = init_embeddings(2, 2, 2, 4, 1.0, 9);
        assert_eq!(a, b);
        let c = init_embeddings(2, 2, 2, 4, 1.0, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn xavier_std_formula() {
        assert_eq!(xavier_std(64), 0.125);
    }

    #[test]
    fn init_variance_matches_xavier() {
        let state = init_embeddings(10000, 1, 1, 64, 1.0, 3);
        let data = state.user.data();
        let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let var: f64 = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (data.len() - 1) as f64;
        let expected = 1.0 / 64.0;
        assert!(
            (var - expected).abs() / expected < 0.05,
            "sample variance {var} too far from {expected}"
        );
    }

    #[test]
    fn param_count_is_total_table_size() {
        let state = init_embeddings(3, 5, 7, 4, 1.0, 0);
        assert_eq!(state.param_count(), (3 + 5 + 7) * 4);
    }

    #[test]
    fn propagate_k0_is_identity() {
        let d = small_dataset();
        let g = build_ub_graph(&d, false, false);
        let left = random_mat(12, 3, 1);
        let right = random_mat(8, 3, 2);
        let (l, r, trace) = propagate(&g, &left, &right, 0, None).unwrap();
        assert_eq!(l, left);
        assert_eq!(r, right);
        assert_eq!(trace.layers.len(), 1);
    }

    #[test]
    fn propagate_matches_hand_example() {
        // graph {u1-b1, u1-b2, u2-b2}, d=1, e_u=(1,2), e_b=(3,4), K=1
        let d = BundleDataset::new(
            2,
            2,
            2,
            vec![(0, 0), (0, 1), (1, 1)],
            vec![],
            vec![(0, 0), (1, 1)],
        )
        .unwrap();
        let g = build_ub_graph(&d, false, false);
        let left = Mat::from_rows(&[&[1.0], &[2.0]]);
        let right = Mat::from_rows(&[&[3.0], &[4.0]]);
        let (l_star, r_star, trace) = propagate(&g, &left, &right, 1, None).unwrap();
        let u1_layer1 = 3.0 / 2f64.sqrt() + 4.0 / 2.0;
        let b2_layer1 = 1.0 / 2.0 + 2.0 / 2f64.sqrt();
        assert!((trace.layers[1].0.row(0)[0] - u1_layer1).abs() < 1e-12);
        assert!((trace.layers[1].1.row(1)[0] - b2_layer1).abs() < 1e-12);
        assert!((l_star.row(0)[0] - (1.0 + u1_layer1)).abs() < 1e-12);
        assert!((r_star.row(1)[0] - (4.0 + b2_layer1)).abs() < 1e-12);
    }

    #[test]
    fn isolated_node_keeps_layer0() {
        // user 2 has no edges
        let d = BundleDataset::new(
            3,
            1,
            1,
            vec![(0, 0), (1, 0)],
            vec![],
            vec![(0, 0)],
        )
        .unwrap();
        let g = build_ub_graph(&d, false, false);
        let left = random_mat(3, 4, 3);
        let right = random_mat(1, 4, 4);
        let (l_star, _, _) = propagate(&g, &left, &right, 3, None).unwrap();
        assert_eq!(l_star.row(2), left.row(2));
    }

    #[test]
    fn sparse_matches_dense_oracle() {
        for (sc, bb, seed) in [(false, false, 0u64), (true, false, 1), (false, true, 2), (true, true, 3)] {
            let d = small_dataset();
            let g = build_ub_graph(&d, sc, bb);
            let left = random_mat(12, 4, seed + 10);
            let right = random_mat(8, 4, seed + 20);
            for k in 0..=3 {
                let (l, r, _) = propagate(&g, &left, &right, k, None).unwrap();
                let (dl, dr) = dense_propagate_oracle(&g, &left, &right, k);
                for (a, b) in l.data().iter().zip(dl.data()) {
                    assert!((a - b).abs() < 1e-12, "left mismatch sc={sc} bb={bb} k={k}");
                }
                for (a, b) in r.data().iter().zip(dr.data()) {
                    assert!((a - b).abs() < 1e-12, "right mismatch sc={sc} bb={bb} k={k}");
                }
            }
        }
    }

    /// Dense reference: assemble the full (loops + cross + right-right)
    /// normalized block matrix, propagate [L; R] jointly with dense
    /// products, and sum the layers.
    #[allow(clippy::needless_range_loop)]
    fn dense_propagate_oracle(
        graph: &NormalizedBipartiteGraph,
        left0: &Mat,
        right0: &Mat,
        num_layers: usize,
    ) -> (Mat, Mat) {
        let (nl, nr) = (graph.left_count(), graph.right_count());
        let n = nl + nr;
        let d = left0.cols();
        let mut adj = vec![vec![0.0; n]; n];
        for &(l, r, w) in graph.edges() {
            adj[l as usize][nl + r as usize] = w;
            adj[nl + r as usize][l as usize] = w;
        }
        for l in 0..nl {
            if let Some(w) = graph.left_loop_weight(l) {
                adj[l][l] = w;
            }
        }
        for r in 0..nr {
            if let Some(w) = graph.right_loop_weight(r) {
                adj[nl + r][nl + r] = w;
            }
            for &(q, w) in graph.right_right_neighbors(r) {
                adj[nl + r][nl + q as usize] = w;
            }
        }
        let mut x = vec![vec![0.0; d]; n];
        for i in 0..nl {
            x[i].copy_from_slice(left0.row(i));
        }
        for i in 0..nr {
            x[nl + i].copy_from_slice(right0.row(i));
        }
        let mut acc = x.clone();
        for _ in 0..num_layers {
            let mut next = vec![vec![0.0; d]; n];
            for (i, arow) in adj.iter().enumerate() {
                for (j, &w) in arow.iter().enumerate() {
                    if w != 0.0 {
                        for c in 0..d {
                            next[i][c] += w * x[j][c];
                        }
                    }
                }
            }
            for i in 0..n {
                for c in 0..d {
                    acc[i][c] += next[i][c];
                }
            }
            x = next;
        }
        let mut left = Mat::zeros(nl, d);
        let mut right = Mat::zeros(nr, d);
        for i in 0..nl {
            left.row_mut(i).copy_from_slice(&acc[i]);
        }
        for i in 0..nr {
            right.row_mut(i).copy_from_slice(&acc[nl + i]);
        }
        (left, right)
    }

    #[test]
    fn pooling_examples() {
        let d = BundleDataset::new(
            1,
            2,
            3,
            vec![(0, 0)],
            vec![],
            vec![(0, 0), (1, 1), (1, 2)],
        )
        .unwrap();
        let pool = BundleItemPool::new(&d);
        let items = Mat::from_rows(&[&[7.0, 7.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let pooled = pool.forward(&items).unwrap();
        assert_eq!(pooled.row(0), &[7.0, 7.0]); // singleton mean
        assert_eq!(pooled.row(1), &[0.5, 0.5]); // two-point mean
    }

    #[test]
    fn pooling_matches_bruteforce() {
        let d = small_dataset();
        let pool = BundleItemPool::new(&d);
        let items = random_mat(d.num_items, 3, 8);
        let pooled = pool.forward(&items).unwrap();
        let lists = BundleDataset::neighbor_lists(&d.bundle_item, d.num_bundles);
        for (b, list) in lists.iter().enumerate() {
            for c in 0..3 {
                let mean: f64 =
                    list.iter().map(|&i| items.row(i as usize)[c]).sum::<f64>() / list.len() as f64;
                assert!((pooled.row(b)[c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_rejects_empty_bundle() {
        let d = BundleDataset::new(1, 2, 1, vec![(0, 0)], vec![], vec![(0, 0)]).unwrap();
        let pool = BundleItemPool::new(&d);
        let items = Mat::zeros(1, 2);
        assert!(matches!(pool.forward(&items), Err(Error::EmptyBundle(1))));
    }

    #[test]
    fn forward_op_is_deterministic_and_md_zero_matches() {
        let d = small_dataset();
        let cfg = ModelConfig {
            embedding_dim: 4,
            num_layers: 2,
            ..ModelConfig::default()
        };
        let graphs = Graphs::build(&d, &d.user_bundle, &cfg);
        let state = init_embeddings(12, 8, 16, 4, 1.0, 1);
        let a = forward(&state, &graphs, &cfg, 7).unwrap();
        let b = forward(&state, &graphs, &cfg, 8).unwrap();
        assert_eq!(a.user_bundle_view, b.user_bundle_view);
        assert_eq!(a.bundle_item_view, b.bundle_item_view);

        let mut md_cfg = cfg.clone();
        md_cfg.augmentation.mode = AugmentationMode::Md;
        md_cfg.augmentation.dropout_ratio = 0.0;
        let c = forward(&state, &graphs, &md_cfg, 9).unwrap();
        assert_eq!(a.user_bundle_view, c.user_bundle_view);
        assert_eq!(a.item_item_view, c.item_item_view);
    }

    #[test]
    fn forward_is_linear_in_tables() {
        let d = small_dataset();
        let cfg = ModelConfig {
            embedding_dim: 3,
            num_layers: 2,
            ..ModelConfig::default()
        };
        let graphs = Graphs::build(&d, &d.user_bundle, &cfg);
        let state = init_embeddings(12, 8, 16, 3, 1.0, 2);
        let mut doubled = state.clone();
        doubled.user.scale(2.0);
        doubled.bundle.scale(2.0);
        doubled.item.scale(2.0);
        let a = forward(&state, &graphs, &cfg, 0).unwrap();
        let b = forward(&doubled, &graphs, &cfg, 0).unwrap();
        for (x, y) in a
            .bundle_item_view
            .data()
            .iter()
            .zip(b.bundle_item_view.data())
        {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        for (x, y) in a
            .user_bundle_view
            .data()
            .iter()
            .zip(b.user_bundle_view.data())
        {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn relabeling_users_permutes_outputs() {
        // swap users 0 and 1 in every relation; outputs must swap rows
        let base = BundleDataset::new(
            3,
            2,
            2,
            vec![(0, 0), (1, 0), (1, 1), (2, 1)],
            vec![(0, 1), (1, 0)],
            vec![(0, 0), (1, 1)],
        )
        .unwrap();
        let swapped = BundleDataset::new(
            3,
            2,
            2,
            vec![(1, 0), (0, 0), (0, 1), (2, 1)],
            vec![(1, 1), (0, 0)],
            vec![(0, 0), (1, 1)],
        )
        .unwrap();
        let cfg = ModelConfig {
            embedding_dim: 3,
            num_layers: 2,
            ..ModelConfig::default()
        };
        let ga = Graphs::build(&base, &base.user_bundle, &cfg);
        let gb = Graphs::build(&swapped, &swapped.user_bundle, &cfg);
        let state = init_embeddings(3, 2, 2, 3, 1.0, 4);
        let mut permuted = state.clone();
        let row0: Vec<f64> = state.user.row(0).to_vec();
        let row1: Vec<f64> = state.user.row(1).to_vec();
        permuted.user.row_mut(0).copy_from_slice(&row1);
        permuted.user.row_mut(1).copy_from_slice(&row0);
        let a = forward(&state, &ga, &cfg, 0).unwrap();
        let b = forward(&permuted, &gb, &cfg, 0).unwrap();
        assert_eq!(a.user_bundle_view.row(0), b.user_bundle_view.row(1));
        assert_eq!(a.user_bundle_view.row(1), b.user_bundle_view.row(0));
        assert_eq!(a.user_bundle_view.row(2), b.user_bundle_view.row(2));
        assert_eq!(a.bundle_bundle_view, b.bundle_bundle_view);
    }

    #[test]
    fn message_dropout_mean_approaches_op() {
        let d = BundleDataset::new(
            3,
            2,
            3,
            vec![(0, 0), (1, 0), (1, 1), (2, 1)],
            vec![(0, 0), (1, 1), (2, 2)],
            vec![(0, 0), (0, 1), (1, 2)],
        )
        .unwrap();
        let g = build_ub_graph(&d, false, false);
        let left = random_mat(3, 2, 30);
        let right = random_mat(2, 2, 31);
        let (op_left, _, _) = propagate(&g, &left, &right, 2, None).unwrap();

        let draws = 20_000;
        let mut sums = vec![0.0; op_left.data().len()];
        let mut sq_sums = vec![0.0; op_left.data().len()];
        for i in 0..draws {
            let (l, _, _) = propagate(
                &g,
                &left,
                &right,
                2,
                Some(MessageDropout {
                    ratio: 0.3,
                    seed: i,
                }),
            )
            .unwrap();
            for (j, v) in l.data().iter().enumerate() {
                sums[j] += v;
                sq_sums[j] += v * v;
            }
        }
        for (j, target) in op_left.data().iter().enumerate() {
            let mean = sums[j] / draws as f64;
            let var = (sq_sums[j] / draws as f64 - mean * mean).max(0.0);
            let se = (var / draws as f64).sqrt();
            assert!(
                (mean - target).abs() <= 3.0 * se + 1e-9,
                "entry {j}: mean {mean} vs op {target}, se {se}"
            );
        }
    }

    #[test]
    fn backward_matches_finite_differences_with_dropout_masks() {
        // deterministic masks (fixed seed) make FD through the MD forward valid
        let d = small_dataset();
        let cfg = ModelConfig {
            embedding_dim: 2,
            num_layers: 2,
            include_self_connections: true,
            include_bundle_bundle: true,
            ..ModelConfig::default()
        };
        let graphs = Graphs::build(&d, &d.user_bundle, &cfg);
        let state = init_embeddings(12, 8, 16, 2, 1.0, 6);
        let md = Some(MessageDropout { ratio: 0.4, seed: 11 });

        // loss = sum of all aggregated outputs, so g_star = ones
        let run = |left: &Mat, right: &Mat| -> f64 {
            let (l, r, _) = propagate(&graphs.ub, left, right, 2, md).unwrap();
            l.data().iter().sum::<f64>() + r.data().iter().sum::<f64>()
        };
        let (_, _, trace) = propagate(&graphs.ub, &state.user, &state.bundle, 2, md).unwrap();
        let ones_l = Mat::from_vec(12, 2, vec![1.0; 24]);
        let ones_r = Mat::from_vec(8, 2, vec![1.0; 16]);
        let (gl, gr) = propagate_backward(&graphs.ub, &trace, &ones_l, &ones_r);

        let h = 1e-6;
        for idx in 0..state.user.data().len() {
            let mut plus = state.user.clone();
            plus.data_mut()[idx] += h;
            let mut minus = state.user.clone();
            minus.data_mut()[idx] -= h;
            let fd = (run(&plus, &state.bundle) - run(&minus, &state.bundle)) / (2.0 * h);
            assert!(
                (fd - gl.data()[idx]).abs() < 1e-6,
                "user grad {idx}: fd {fd} vs {got}",
                got = gl.data()[idx]
            );
        }
        for idx in 0..state.bundle.data().len() {
            let mut plus = state.bundle.clone();
            plus.data_mut()[idx] += h;
            let mut minus = state.bundle.clone();
            minus.data_mut()[idx] -= h;
            let fd = (run(&state.user, &plus) - run(&state.user, &minus)) / (2.0 * h);
            assert!(
                (fd - gr.data()[idx]).abs() < 1e-6,
                "bundle grad {idx}: fd {fd} vs {got}",
                got = gr.data()[idx]
            );
        }
    }
}

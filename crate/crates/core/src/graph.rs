//! Symmetric-degree-normalized bipartite graphs and the sparse products
//! that drive embedding propagation.
//!
//! A graph stores its cross edges in coordinate order plus CSR indexes for
//! both directions, so one layer of propagation is two row-parallel sparse
//! products. Each output row accumulates its neighbors in a fixed order,
//! which keeps results bit-identical between the sequential and rayon
//! paths.
//!
//! Optional extensions used by ablation variants: unit self-loops added
//! before normalization, and bundle-bundle edges weighted by item overlap.

use serde::{Deserialize, Serialize};

use crate::dataset::BundleDataset;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::seeds;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How a training forward pass perturbs the data, if at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentationMode {
    /// Original preservation: no augmentation, fully deterministic.
    Op,
    /// Edge dropout: remove a fraction of graph edges, redrawn per epoch.
    Ed,
    /// Message dropout: mask elements of each propagated layer.
    Md,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub mode: AugmentationMode,
    /// Dropout ratio rho; unused in OP mode.
    pub dropout_ratio: f64,
    /// Extra seed material mixed into the per-call augmentation streams.
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            mode: AugmentationMode::Op,
            dropout_ratio: 0.2,
            seed: 0,
        }
    }
}

/// Sparse normalized adjacency between two disjoint node sets.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedBipartiteGraph {
    left_count: usize,
    right_count: usize,
    /// Cross edges (left, right, weight), sorted by (left, right).
    edges: Vec<(u32, u32, f64)>,
    left_degrees: Vec<u32>,
    right_degrees: Vec<u32>,
    /// CSR offsets into `edges` per left node.
    left_ptr: Vec<usize>,
    /// Transposed adjacency: (left, weight) sorted by (right, left).
    right_adj: Vec<(u32, f64)>,
    right_ptr: Vec<usize>,
    /// Self-loop weight per node; empty when self-connections are off.
    left_loops: Vec<f64>,
    right_loops: Vec<f64>,
    /// Right-right edges as CSR (both directions present); empty when off.
    rr_adj: Vec<(u32, f64)>,
    rr_ptr: Vec<usize>,
}

/// Optional graph-construction extras for the ablation variants.
#[derive(Debug, Clone, Default)]
struct BuildOptions {
    self_connections: bool,
    /// Symmetric right-right weights, one entry per unordered pair (p<q).
    right_right: Vec<(u32, u32, f64)>,
}

fn csr_from_sorted(
    pairs: impl Iterator<Item = (u32, u32, f64)> + Clone,
    row_count: usize,
) -> (Vec<usize>, Vec<(u32, f64)>) {
    let mut ptr = vec![0usize; row_count + 1];
    for (row, _, _) in pairs.clone() {
        ptr[row as usize + 1] += 1;
    }
    for i in 0..row_count {
        ptr[i + 1] += ptr[i];
    }
    let mut adj = vec![(0u32, 0.0); ptr[row_count]];
    let mut fill = ptr.clone();
    for (row, col, w) in pairs {
        adj[fill[row as usize]] = (col, w);
        fill[row as usize] += 1;
    }
    (ptr, adj)
}

impl NormalizedBipartiteGraph {
    /// Normalize a deduplicated sorted pair list: weight(l, r) =
    /// 1/sqrt(deg(l)*deg(r)), with degrees counting self-loops and the
    /// weighted right-right block when present.
    fn build(
        left_count: usize,
        right_count: usize,
        pairs: &[(u32, u32)],
        opts: BuildOptions,
    ) -> Self {
        let mut left_degrees = vec![0u32; left_count];
        let mut right_degrees = vec![0u32; right_count];
        for &(l, r) in pairs {
            left_degrees[l as usize] += 1;
            right_degrees[r as usize] += 1;
        }
        // weighted degrees used by the normalization
        let mut left_norm: Vec<f64> = left_degrees.iter().map(|&d| f64::from(d)).collect();
        let mut right_norm: Vec<f64> = right_degrees.iter().map(|&d| f64::from(d)).collect();
        if opts.self_connections {
            for d in &mut left_norm {
                *d += 1.0;
            }
            for d in &mut right_norm {
                *d += 1.0;
            }
        }
        for &(p, q, w) in &opts.right_right {
            right_norm[p as usize] += w;
            right_norm[q as usize] += w;
        }

        let edges: Vec<(u32, u32, f64)> = pairs
            .iter()
            .map(|&(l, r)| {
                let w = 1.0 / (left_norm[l as usize] * right_norm[r as usize]).sqrt();
                (l, r, w)
            })
            .collect();

        let (left_ptr, _) = csr_from_sorted(edges.iter().copied(), left_count);
        let mut transposed: Vec<(u32, u32, f64)> =
            edges.iter().map(|&(l, r, w)| (r, l, w)).collect();
        transposed.sort_unstable_by_key(|&(r, l, _)| (r, l));
        let (right_ptr, right_adj) = csr_from_sorted(transposed.into_iter(), right_count);

        let (left_loops, right_loops) = if opts.self_connections {
            (
                left_norm.iter().map(|&d| 1.0 / d).collect(),
                right_norm.iter().map(|&d| 1.0 / d).collect(),
            )
        } else {
            (Vec::new(), Vec::new())
        };

        let (rr_ptr, rr_adj) = if opts.right_right.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            let mut both: Vec<(u32, u32, f64)> = Vec::with_capacity(opts.right_right.len() * 2);
            for &(p, q, w) in &opts.right_right {
                let norm = w / (right_norm[p as usize] * right_norm[q as usize]).sqrt();
                both.push((p, q, norm));
                both.push((q, p, norm));
            }
            both.sort_unstable_by_key(|&(p, q, _)| (p, q));
            csr_from_sorted(both.into_iter(), right_count)
        };

        NormalizedBipartiteGraph {
            left_count,
            right_count,
            edges,
            left_degrees,
            right_degrees,
            left_ptr,
            right_adj,
            right_ptr,
            left_loops,
            right_loops,
            rr_adj,
            rr_ptr,
        }
    }

    pub fn left_count(&self) -> usize {
        self.left_count
    }

    pub fn right_count(&self) -> usize {
        self.right_count
    }

    pub fn edges(&self) -> &[(u32, u32, f64)] {
        &self.edges
    }

    pub fn left_degrees(&self) -> &[u32] {
        &self.left_degrees
    }

    pub fn right_degrees(&self) -> &[u32] {
        &self.right_degrees
    }

    pub fn has_self_connections(&self) -> bool {
        !self.left_loops.is_empty()
    }

    pub fn right_right_edge_count(&self) -> usize {
        self.rr_adj.len() / 2
    }

    pub fn left_loop_weight(&self, l: usize) -> Option<f64> {
        self.left_loops.get(l).copied()
    }

    pub fn right_loop_weight(&self, r: usize) -> Option<f64> {
        self.right_loops.get(r).copied()
    }

    /// Right-right neighbors of `r` as (node, weight), empty without BB.
    pub fn right_right_neighbors(&self, r: usize) -> &[(u32, f64)] {
        if self.rr_ptr.is_empty() {
            &[]
        } else {
            &self.rr_adj[self.rr_ptr[r]..self.rr_ptr[r + 1]]
        }
    }

    /// Debug dump: one `left<TAB>right<TAB>weight` line per cross edge.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for &(l, r, w) in &self.edges {
            out.push_str(&format!("{l}\t{r}\t{w}\n"));
        }
        out
    }

    fn left_row_into(&self, l: usize, left_in: &Mat, right_in: &Mat, out: &mut [f64]) {
        out.fill(0.0);
        for &(_, r, w) in &self.edges[self.left_ptr[l]..self.left_ptr[l + 1]] {
            for (o, v) in out.iter_mut().zip(right_in.row(r as usize)) {
                *o += w * v;
            }
        }
        if let Some(&loop_w) = self.left_loops.get(l) {
            for (o, v) in out.iter_mut().zip(left_in.row(l)) {
                *o += loop_w * v;
            }
        }
    }

    fn right_row_into(&self, r: usize, left_in: &Mat, right_in: &Mat, out: &mut [f64]) {
        out.fill(0.0);
        for &(l, w) in &self.right_adj[self.right_ptr[r]..self.right_ptr[r + 1]] {
            for (o, v) in out.iter_mut().zip(left_in.row(l as usize)) {
                *o += w * v;
            }
        }
        if let Some(&loop_w) = self.right_loops.get(r) {
            for (o, v) in out.iter_mut().zip(right_in.row(r)) {
                *o += loop_w * v;
            }
        }
        if !self.rr_ptr.is_empty() {
            for &(q, w) in &self.rr_adj[self.rr_ptr[r]..self.rr_ptr[r + 1]] {
                for (o, v) in out.iter_mut().zip(right_in.row(q as usize)) {
                    *o += w * v;
                }
            }
        }
    }

    /// One propagation step toward the left side, sequential.
    pub fn prop_left_seq(&self, left_in: &Mat, right_in: &Mat) -> Mat {
        let cols = right_in.cols();
        let mut out = Mat::zeros(self.left_count, cols);
        for l in 0..self.left_count {
            self.left_row_into(l, left_in, right_in, out.row_mut(l));
        }
        out
    }

    /// One propagation step toward the right side, sequential.
    pub fn prop_right_seq(&self, left_in: &Mat, right_in: &Mat) -> Mat {
        let cols = left_in.cols();
        let mut out = Mat::zeros(self.right_count, cols);
        for r in 0..self.right_count {
            self.right_row_into(r, left_in, right_in, out.row_mut(r));
        }
        out
    }

    /// One propagation step toward the left side, row-parallel.
    #[cfg(feature = "parallel")]
    pub fn prop_left_par(&self, left_in: &Mat, right_in: &Mat) -> Mat {
        let cols = right_in.cols();
        let mut out = Mat::zeros(self.left_count, cols);
        out.data_mut()
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(l, row)| self.left_row_into(l, left_in, right_in, row));
        out
    }

    /// One propagation step toward the right side, row-parallel.
    #[cfg(feature = "parallel")]
    pub fn prop_right_par(&self, left_in: &Mat, right_in: &Mat) -> Mat {
        let cols = left_in.cols();
        let mut out = Mat::zeros(self.right_count, cols);
        out.data_mut()
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(r, row)| self.right_row_into(r, left_in, right_in, row));
        out
    }

    /// Propagate toward the left side: parallel when the feature is on.
    pub fn prop_left(&self, left_in: &Mat, right_in: &Mat) -> Mat {
        #[cfg(feature = "parallel")]
        {
            self.prop_left_par(left_in, right_in)
        }
        #[cfg(not(feature = "parallel"))]
        {
            self.prop_left_seq(left_in, right_in)
        }
    }

    /// Propagate toward the right side: parallel when the feature is on.
    pub fn prop_right(&self, left_in: &Mat, right_in: &Mat) -> Mat {
        #[cfg(feature = "parallel")]
        {
            self.prop_right_par(left_in, right_in)
        }
        #[cfg(not(feature = "parallel"))]
        {
            self.prop_right_seq(left_in, right_in)
        }
    }
}

/// Build the user-bundle graph. `include_self_connections` adds unit
/// self-loops before normalization; `include_bundle_bundle` adds
/// bundle-bundle edges weighted by the raw count of overlapping items.
pub fn build_ub_graph(
    dataset: &BundleDataset,
    include_self_connections: bool,
    include_bundle_bundle: bool,
) -> NormalizedBipartiteGraph {
    let right_right = if include_bundle_bundle {
        bundle_overlaps(dataset)
    } else {
        Vec::new()
    };
    NormalizedBipartiteGraph::build(
        dataset.num_users,
        dataset.num_bundles,
        &dataset.user_bundle,
        BuildOptions {
            self_connections: include_self_connections,
            right_right,
        },
    )
}

/// Build the user-item graph (no optional flags).
pub fn build_ui_graph(dataset: &BundleDataset) -> NormalizedBipartiteGraph {
    NormalizedBipartiteGraph::build(
        dataset.num_users,
        dataset.num_items,
        &dataset.user_item,
        BuildOptions::default(),
    )
}

/// Item-overlap counts for every unordered bundle pair sharing an item.
fn bundle_overlaps(dataset: &BundleDataset) -> Vec<(u32, u32, f64)> {
    let mut by_item = vec![Vec::new(); dataset.num_items];
    for &(b, i) in &dataset.bundle_item {
        by_item[i as usize].push(b);
    }
    let mut counts = std::collections::BTreeMap::new();
    for bundles in &by_item {
        for (i, &p) in bundles.iter().enumerate() {
            for &q in &bundles[i + 1..] {
                *counts.entry((p.min(q), p.max(q))).or_insert(0u32) += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|((p, q), c)| (p, q, f64::from(c)))
        .collect()
}

/// Keep exactly ceil((1-rho)*|E|) cross edges, sampled uniformly without
/// replacement. Surviving edges retain their original normalization
/// weights; degrees are recounted from the survivors. Self-loops and
/// right-right edges are untouched.
pub fn edge_dropout(
    graph: &NormalizedBipartiteGraph,
    rho: f64,
    seed: u64,
) -> Result<NormalizedBipartiteGraph> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidDropoutRatio(rho));
    }
    let total = graph.edges.len();
    // fp guard so exact-decimal products do not ceil one too high
    let keep = (((1.0 - rho) * total as f64) - 1e-9).ceil().max(0.0) as usize;
    let keep = keep.min(total);
    if keep == total {
        return Ok(graph.clone());
    }
    let mut rng = seeds::rng(seed, "edge_dropout", &[]);
    let mut kept: Vec<usize> = rand::seq::index::sample(&mut rng, total, keep).into_vec();
    kept.sort_unstable();
    let edges: Vec<(u32, u32, f64)> = kept.into_iter().map(|i| graph.edges[i]).collect();

    let mut left_degrees = vec![0u32; graph.left_count];
    let mut right_degrees = vec![0u32; graph.right_count];
    for &(l, r, _) in &edges {
        left_degrees[l as usize] += 1;
        right_degrees[r as usize] += 1;
    }
    let (left_ptr, _) = csr_from_sorted(edges.iter().copied(), graph.left_count);
    let mut transposed: Vec<(u32, u32, f64)> = edges.iter().map(|&(l, r, w)| (r, l, w)).collect();
    transposed.sort_unstable_by_key(|&(r, l, _)| (r, l));
    let (right_ptr, right_adj) = csr_from_sorted(transposed.into_iter(), graph.right_count);

    Ok(NormalizedBipartiteGraph {
        left_count: graph.left_count,
        right_count: graph.right_count,
        edges,
        left_degrees,
        right_degrees,
        left_ptr,
        right_adj,
        right_ptr,
        left_loops: graph.left_loops.clone(),
        right_loops: graph.right_loops.clone(),
        rr_adj: graph.rr_adj.clone(),
        rr_ptr: graph.rr_ptr.clone(),
    })
}

//! Engine for bundle recommendation with two-view graph embeddings.
//!
//! The pipeline: a dataset of user-bundle, user-item, and bundle-item
//! relations is turned into two normalized bipartite graphs; embedding
//! tables are propagated over each graph and layer-aggregated into a
//! bundle-view and an item-view representation per user and bundle; the
//! views are trained jointly with a BPR ranking loss and a cross-view
//! contrastive alignment loss; evaluation ranks the full bundle catalog
//! per user and reports Recall@K / NDCG@K plus alignment-dispersion
//! diagnostics of the learned geometry.
//!
//! Heavy inner loops (sparse propagation, full-catalog ranking) are
//! row-parallel via rayon under the default `parallel` feature, with a
//! sequential fallback producing bit-identical results when the feature
//! is disabled.

pub mod checkpoint;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod graph;
pub mod mat;
pub mod objectives;
pub mod seeds;
pub mod trainer;

pub use error::{Error, Result};

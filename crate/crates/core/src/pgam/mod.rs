//! Prototype graph attention: pseudo-masks, foreground projection, prototype
//! clustering and graph-attention enhancement.

mod cosine;
mod graph;
mod kmeans;
mod projection;
mod prototypes;
mod pseudo_mask;

pub use cosine::{cosine_matrix, cosine_matrix_backward, cosine_similarity, COSINE_EPS};
pub use graph::{
    edge_weights, enhance_prototypes, enhance_prototypes_backward, enhance_prototypes_forward, graph_attention,
    graph_attention_backward, graph_attention_forward, EnhanceCache, EnhanceGrads, GraphAttentionCache,
    GraphAttentionGrads, GraphAttentionParams, PgamParams, ValueSource, DEFAULT_LAMBDA_CO, DEFAULT_LAMBDA_SELF,
    EDGE_DEN_EPS,
};
pub use kmeans::{kmeans, kmeans_with, KMeansResult, DEFAULT_MAX_ITERS, DEFAULT_RESTARTS};
pub use projection::{project_and_mask, project_tokens, project_tokens_backward, ProjectionGrads, ProjectionParams};
pub use prototypes::{cluster_query_prototypes, cluster_support_prototypes, Origin, PrototypeSet};
pub use pseudo_mask::{compute_pseudo_masks, masks_at_level, max_support_similarity, min_max_normalize};

/// Default pseudo-mask threshold for pixels entering query clustering.
pub const DEFAULT_TAU_FG: f64 = 0.5;

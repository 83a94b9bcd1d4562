//! Region pooling over the token grid and cluster/unfold token reduction.

mod cluster;
mod roi;

pub use cluster::{
    cluster_tokens, cosine_matrix, density_peaks, representative_count, unfold_tokens, ClusterMap,
    DENSITY_NEIGHBOURS,
};
pub(crate) use cluster::{cluster_with_prefix, size_bias};
pub use roi::{quadrant_points, roi_align, RegionBoxSet};

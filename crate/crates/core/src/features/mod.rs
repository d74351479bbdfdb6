//! Per-detection, per-modality feature extraction: frustum point selection,
//! the point-set and image-patch encoders, skip pooling, and cached-feature
//! injection.

pub mod cache;
pub mod encoders;
pub mod frustum;

use crate::diffcore::ValueId;

/// Which sensor a feature batch came from. `Fused` is only ever produced by
/// the fusion module, never by an encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModalityTag {
    Image,
    Cloud,
    Fused,
}

impl std::fmt::Display for ModalityTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModalityTag::Image => write!(f, "image"),
            ModalityTag::Cloud => write!(f, "cloud"),
            ModalityTag::Fused => write!(f, "fused"),
        }
    }
}

/// One modality's features for a two-frame window: a tape value of shape
/// `feature_dim x (N+M)`, columns in window detection order.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingBatch {
    pub modality: ModalityTag,
    pub features: ValueId,
}

pub use cache::FeatureCache;
pub use encoders::{
    encode_image, encode_points, encode_points_with_absent, global_avg_pool, patch_descriptor,
    skip_pool, skip_pool_project, ImageEncoderWeights, PointEncoderWeights, SkipPoolWeights,
    SKIP_LEVEL_CHANNELS,
};
pub use frustum::{gather_selected, select_box3d_points, select_frustum_points, FrustumSelection};

//! The region relation network: two flow streams per region, region
//! attention, a similarity graph over the six region features, and the
//! classification heads.

mod attention;
mod backbone;
mod graph;
pub mod layers;
mod model;
pub mod tensor;

use alloc::string::String;

pub use attention::{region_attention, region_squeeze, weight_regions, AttentionState, RegionAttention, RegionSqueeze};
pub use backbone::{BackboneConfig, BackboneVariant};
pub use graph::{aggregate, build_graph, gcn_forward, AggregateFeature, RegionGraph, RelationReasoning};
pub(crate) use model::argmax;
pub use model::{ForwardOutput, Heads, ModelConfig, RrrnModel, SampleLoss};
pub use tensor::{FeatureMap, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown parameter tensor {0}")]
    UnknownTensor(String),
}


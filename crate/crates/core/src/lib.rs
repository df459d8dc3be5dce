//! Region attention and graph relation reasoning for occlusion-robust
//! micro-expression recognition.
//!
//! The crate is `no_std` (with `alloc`) and free of IO: it holds the sample
//! metadata model, the optical-flow preprocessing, the augmentation recipe,
//! occlusion synthesis on in-memory frames, the network with its hand-written
//! backward pass, the training losses and metrics, and the cross-validation
//! protocol. File formats and the command line live in the `rrrn` crate.
//!
//! Pipeline, one sample at a time:
//!
//! 1. dense flow between the onset and (enriched) apex frame ([`flow`]),
//! 2. six fixed-position crops of both flow components ([`flow::crop_regions`]),
//! 3. two-stream backbone, region squeeze and region attention ([`nn`]),
//! 4. cosine-similarity region graph with two propagation layers,
//! 5. residual aggregation and the classification heads.

#![no_std]

extern crate alloc;

pub mod augment;
pub mod dataset;
pub mod flow;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod occlusion;
pub mod optim;
pub mod protocol;
pub mod seed;
pub mod synthetic;

mod math;

pub use dataset::{
    AnnotationRecord, DatabaseId, DatasetManifest, ObjectiveClass, OcclusionTag, NUM_CLASSES,
};
pub use flow::{FlowEstimator, FlowField, RegionCropSpec, RegionStack, TvL1, REGIONS};
pub use image::Plane;
pub use metrics::{ConfusionMatrix, Metrics};
pub use nn::{BackboneConfig, BackboneVariant, RrrnModel};

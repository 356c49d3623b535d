//! gensynth-core: building blocks for turning a small real image set plus
//! rendered 3D-model images into synthetic detection-training datasets.
//!
//! Stages, in pipeline order:
//!
//! 1. [`prompting`]: caption real images, synthesize generation prompts,
//!    strip geometric phrases for structurally guided synthesis.
//! 2. [`guidance`]: foreground Canny edge maps from renders, paired with the
//!    render's box and pose metadata.
//! 3. [`generation`]: per-class LoRA job specs, adapter registry, plain and
//!    edge-conditioned synthesis through a text-to-image backend.
//! 4. [`labeling`]: open-vocabulary top-1 boxes or annotation transfer from
//!    guidance pairs.
//! 5. [`assembly`]: subset selection, dataset assembly, balanced mixing.
//! 6. [`trainer`]: detector job specs and checkpoint selection.
//! 7. [`metrics`]: IoU matching, 101-point AP, mAP, seed aggregation and
//!    result tables.
//!
//! Every generative or detection model sits behind a trait in [`backend`];
//! deterministic mock implementations live in [`backend::mock`].

pub mod artifact;
pub mod assembly;
pub mod backend;
pub mod data;
pub mod generation;
pub mod guidance;
pub mod labeling;
pub mod metrics;
pub mod prompting;
pub mod trainer;

pub use data::{
    Annotation, BoundingBox, DetectionDataset, ImageRecord, Provenance, Split, Superclass,
    Taxonomy, VehicleClass,
};

//! Captioning real images, synthesizing generation prompts, and stripping
//! geometric descriptions for structurally guided synthesis.

mod captioning;
mod geometry;
mod promptgen;
mod template;

use thiserror::Error;

pub use captioning::{caption_images, CaptionBatch, CaptionPair, CaptionRejection, CaptionRejectionReason};
pub use geometry::{strip_geometry, GeometryLexicon, StripOutcome};
pub use promptgen::{generate_prompts, GenerationMeta, PromptSet};
pub use template::{
    format_examples, render_template, Bindings, Placeholder, PromptTemplate, TemplateRole, TemplateSet,
    BUILTIN_TEMPLATE_VERSION,
};

use crate::backend::BackendError;
use crate::data::{ClassId, ImageId, TaxonomyError};

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template {template:?} uses unknown placeholder {{{token}}}")]
    UnknownPlaceholder { template: String, token: String },
    #[error("template {template:?}: no binding for {{{token}}}")]
    UnresolvedPlaceholder { template: String, token: String },
    #[error("record {0} has no annotation to take a class from")]
    Unlabeled(ImageId),
    #[error("record {image_id} is class {found}, batch is class {expected}")]
    MixedClasses { expected: ClassId, found: ClassId, image_id: ImageId },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend failed after {attempts} attempt(s): {error}")]
    Backend { error: BackendError, attempts: u32 },
    #[error("could not parse backend prompt list: {0}")]
    Parse(String),
    #[error("backend returned {received} of {requested} requested prompts")]
    Shortfall { requested: usize, received: usize, partial: Box<PromptSet> },
    #[error("template I/O: {0}")]
    Io(String),
}

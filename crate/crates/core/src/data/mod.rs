//! Class taxonomy, image/annotation data model, dataset container and
//! manifest serialization shared by every stage.

mod coco;
mod model;
mod taxonomy;
mod validate;

pub use coco::{dataset_from_json, dataset_to_json, load_dataset, save_dataset, DataError, SCHEMA_VERSION};
pub use model::{
    split_count_key, Annotation, BoundingBox, DetectionDataset, ImageId, ImageRecord, Provenance,
    Split,
};
pub use taxonomy::{slugify, ClassId, Superclass, Taxonomy, TaxonomyError, VehicleClass, CLASS_COUNT};
pub use validate::{validate_dataset, ValidationReport, Violation, ViolationKind};

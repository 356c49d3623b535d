//! COCO-style JSON manifests.
//!
//! On-disk layout (`schema_version` 1.0):
//!
//! ```json
//! {
//!   "schema_version": "1.0",
//!   "meta": { "seed": "0", "source": "flux" },
//!   "images": [{ "id": 1, "file_name": "generated/r24/boxer/flux_0000.png",
//!                "width": 96, "height": 96, "split": "train", "source": "flux",
//!                "attributes": {}, "repetition_of": 17 }],
//!   "annotations": [{ "id": 1, "image_id": 1, "category_id": 0,
//!                     "bbox": [x_min, y_min, width, height], "area": 1200.0,
//!                     "iscrowd": 0, "provenance": "flux", "score": 0.93 }],
//!   "categories": [{ "id": 0, "name": "Boxer",
//!                    "supercategory": "armoured personnel carrier" }]
//! }
//! ```
//!
//! `attributes`, `repetition_of` and `score` are omitted when empty. File
//! names are relative to the dataset root directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{Annotation, BoundingBox, DetectionDataset, ImageId, ImageRecord, Provenance, Split};
use super::taxonomy::{ClassId, Superclass, Taxonomy, TaxonomyError, VehicleClass};
use super::validate::{validate_dataset, ValidationReport};
use crate::artifact;

pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: I/O error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("schema error at `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("taxonomy error: {0}")]
    Taxonomy(#[from] TaxonomyError),
    #[error("dataset failed validation: {0}")]
    Validation(ValidationReport),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CocoFile {
    schema_version: String,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CocoImage {
    id: ImageId,
    file_name: String,
    width: u32,
    height: u32,
    split: Split,
    source: Provenance,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    attributes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    repetition_of: Option<ImageId>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CocoAnnotation {
    id: u64,
    image_id: ImageId,
    category_id: ClassId,
    bbox: [f64; 4],
    area: f64,
    iscrowd: u8,
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CocoCategory {
    id: ClassId,
    name: String,
    supercategory: String,
}

fn schema_error(field: impl Into<String>, message: impl Into<String>) -> DataError {
    DataError::Schema {
        field: field.into(),
        message: message.into(),
    }
}

/// Parses a manifest without running dataset validation.
pub fn dataset_from_json(text: &str) -> Result<DetectionDataset, DataError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: CocoFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        schema_error(field, e.into_inner().to_string())
    })?;

    if file.schema_version.split('.').next() != Some("1") {
        return Err(schema_error(
            "schema_version",
            format!("unsupported version {:?}, expected {SCHEMA_VERSION}", file.schema_version),
        ));
    }

    let mut classes = Vec::with_capacity(file.categories.len());
    for (i, c) in file.categories.into_iter().enumerate() {
        let superclass = Superclass::from_name(&c.supercategory).ok_or_else(|| {
            schema_error(
                format!("categories[{i}].supercategory"),
                TaxonomyError::UnknownSuperclass(c.supercategory.clone()).to_string(),
            )
        })?;
        classes.push(VehicleClass {
            id: c.id,
            name: c.name,
            superclass,
        });
    }
    let taxonomy = Taxonomy::from_classes(classes)?;

    let mut index: HashMap<ImageId, usize> = HashMap::with_capacity(file.images.len());
    let mut records: Vec<ImageRecord> = Vec::with_capacity(file.images.len());
    for img in file.images {
        index.entry(img.id).or_insert(records.len());
        records.push(ImageRecord {
            image_id: img.id,
            uri: img.file_name,
            width: img.width,
            height: img.height,
            annotations: Vec::new(),
            split: img.split,
            source: img.source,
            attributes: img.attributes,
            repetition_of: img.repetition_of,
        });
    }

    for (i, ann) in file.annotations.into_iter().enumerate() {
        if !taxonomy.contains(ann.category_id) {
            return Err(TaxonomyError::UnknownClass(ann.category_id).into());
        }
        let slot = *index.get(&ann.image_id).ok_or_else(|| {
            schema_error(
                format!("annotations[{i}].image_id"),
                format!("references unknown image {}", ann.image_id),
            )
        })?;
        records[slot].annotations.push(Annotation {
            bbox: BoundingBox::from_xywh(ann.bbox),
            class_id: ann.category_id,
            confidence: ann.score,
            provenance: ann.provenance,
        });
    }

    Ok(DetectionDataset {
        taxonomy,
        records,
        meta: file.meta,
    })
}

/// Serializes a manifest. Annotation ids are assigned sequentially from 1 in
/// record order.
pub fn dataset_to_json(dataset: &DetectionDataset) -> String {
    let mut annotations = Vec::new();
    let mut next_id = 1u64;
    let images = dataset
        .records
        .iter()
        .map(|r| {
            for a in &r.annotations {
                annotations.push(CocoAnnotation {
                    id: next_id,
                    image_id: r.image_id,
                    category_id: a.class_id,
                    bbox: a.bbox.to_xywh(),
                    area: a.bbox.area(),
                    iscrowd: 0,
                    provenance: a.provenance,
                    score: a.confidence,
                });
                next_id += 1;
            }
            CocoImage {
                id: r.image_id,
                file_name: r.uri.clone(),
                width: r.width,
                height: r.height,
                split: r.split,
                source: r.source,
                attributes: r.attributes.clone(),
                repetition_of: r.repetition_of,
            }
        })
        .collect();
    let categories = dataset
        .taxonomy
        .classes()
        .iter()
        .map(|c| CocoCategory {
            id: c.id,
            name: c.name.clone(),
            supercategory: c.superclass.name().to_string(),
        })
        .collect();
    let file = CocoFile {
        schema_version: SCHEMA_VERSION.to_string(),
        meta: dataset.meta.clone(),
        images,
        annotations,
        categories,
    };
    let mut text = serde_json::to_string_pretty(&file).expect("manifest serialization cannot fail");
    text.push('\n');
    text
}

/// Loads and validates a manifest.
pub fn load_dataset(path: &Path) -> Result<DetectionDataset, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let dataset = dataset_from_json(&text)?;
    let report = validate_dataset(&dataset);
    if !report.is_valid() {
        return Err(DataError::Validation(report));
    }
    Ok(dataset)
}

/// Validates, then writes atomically. An invalid dataset leaves no file behind.
pub fn save_dataset(dataset: &DetectionDataset, path: &Path) -> Result<(), DataError> {
    let report = validate_dataset(dataset);
    if !report.is_valid() {
        return Err(DataError::Validation(report));
    }
    artifact::write_atomic(path, dataset_to_json(dataset).as_bytes()).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DetectionDataset {
        let mut r = ImageRecord::new(4, "real/boxer/4.jpg", 640, 480, Split::Train, Provenance::Real)
            .with_annotation(Annotation::ground_truth(
                BoundingBox::new(0.1, 0.2, 300.7, 400.3),
                0,
                Provenance::Real,
            ))
            .with_annotation(Annotation::ground_truth(
                BoundingBox::new(310.0, 5.0, 639.5, 479.0),
                14,
                Provenance::Real,
            ));
        r.attributes.insert("viewpoint".into(), "side".into());
        let s = ImageRecord::new(9, "sim/9.png", 96, 96, Split::Train, Provenance::Sim3d)
            .with_annotation(Annotation::ground_truth(
                BoundingBox::new(10.0, 12.0, 80.0, 70.0),
                8,
                Provenance::Sim3d,
            ));
        DetectionDataset::new(vec![r, s]).with_meta("seed", "3")
    }

    #[test]
    fn json_round_trip() {
        let ds = sample();
        let text = dataset_to_json(&ds);
        assert_eq!(dataset_from_json(&text).unwrap(), ds);
        assert_eq!(dataset_to_json(&dataset_from_json(&text).unwrap()), text);
    }

    #[test]
    fn unknown_class_is_taxonomy_error() {
        let text = dataset_to_json(&sample()).replace("\"category_id\": 14", "\"category_id\": 15");
        let err = dataset_from_json(&text).unwrap_err();
        assert!(matches!(err, DataError::Taxonomy(TaxonomyError::UnknownClass(15))), "{err}");
    }

    #[test]
    fn schema_error_names_field() {
        let text = dataset_to_json(&sample()).replace("\"width\": 96", "\"width\": \"wide\"");
        match dataset_from_json(&text).unwrap_err() {
            DataError::Schema { field, .. } => assert_eq!(field, "images[1].width"),
            other => panic!("unexpected {other}"),
        }
        let text = dataset_to_json(&sample()).replace("\"split\": \"train\",\n      \"source\": \"sim_3d\"", "\"source\": \"sim_3d\"");
        match dataset_from_json(&text).unwrap_err() {
            DataError::Schema { field, message } => {
                assert_eq!(field, "images[1]");
                assert!(message.contains("split"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn dangling_annotation_rejected() {
        let text = dataset_to_json(&sample()).replace("\"image_id\": 9", "\"image_id\": 99");
        match dataset_from_json(&text).unwrap_err() {
            DataError::Schema { field, .. } => assert_eq!(field, "annotations[2].image_id"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unsupported_version_rejected() {
        let text = dataset_to_json(&sample()).replace("\"1.0\"", "\"2.0\"");
        assert!(matches!(dataset_from_json(&text), Err(DataError::Schema { .. })));
    }

    #[test]
    fn save_refuses_invalid_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let mut ds = sample();
        ds.records[1].annotations[0].bbox.x_max = 97.0;
        assert!(matches!(save_dataset(&ds, &path), Err(DataError::Validation(_))));
        assert!(!path.exists());
    }
}

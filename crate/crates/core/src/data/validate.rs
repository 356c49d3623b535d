use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use super::model::{split_count_key, DetectionDataset, ImageId};
use super::Split;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    DuplicateImageId,
    ZeroDimension,
    UnknownClass,
    MalformedBox,
    BoxOutsideImage,
    GroundTruthConfidence,
    SyntheticAnnotationCount,
    ProvenanceMismatch,
    SplitCountMismatch,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub image_id: Option<ImageId>,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.image_id {
            Some(id) => write!(f, "image {id}: {:?}: {}", self.kind, self.detail),
            None => write!(f, "{:?}: {}", self.kind, self.detail),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn of_kind(&self, kind: ViolationKind) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(move |v| v.kind == kind)
    }

    fn push(&mut self, image_id: Option<ImageId>, kind: ViolationKind, detail: String) {
        self.violations.push(Violation {
            image_id,
            kind,
            detail,
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            return f.write_str("no violations");
        }
        write!(f, "{} violation(s)", self.violations.len())?;
        for v in self.violations.iter().take(10) {
            write!(f, "; {v}")?;
        }
        if self.violations.len() > 10 {
            write!(f, "; ...")?;
        }
        Ok(())
    }
}

/// Checks every dataset invariant and lists each violation with the record
/// it concerns. Never fails; an empty report means the dataset is valid.
pub fn validate_dataset(dataset: &DetectionDataset) -> ValidationReport {
    use ViolationKind::*;

    let mut report = ValidationReport::default();
    let mut seen = HashSet::with_capacity(dataset.records.len());
    let mut reported_dupes = HashSet::new();

    for record in &dataset.records {
        let id = Some(record.image_id);
        if !seen.insert(record.image_id) && reported_dupes.insert(record.image_id) {
            report.push(id, DuplicateImageId, format!("image_id {} appears more than once", record.image_id));
        }
        if record.width == 0 || record.height == 0 {
            report.push(id, ZeroDimension, format!("{}x{}", record.width, record.height));
        }
        if record.source.is_synthetic() && record.annotations.len() != 1 {
            report.push(
                id,
                SyntheticAnnotationCount,
                format!(
                    "{} record carries {} annotations, expected exactly 1",
                    record.source,
                    record.annotations.len()
                ),
            );
        }
        for (i, ann) in record.annotations.iter().enumerate() {
            if !dataset.taxonomy.contains(ann.class_id) {
                report.push(id, UnknownClass, format!("annotation {i}: class_id {}", ann.class_id));
            }
            if !ann.bbox.is_well_formed() {
                report.push(id, MalformedBox, format!("annotation {i}: {:?}", ann.bbox));
            } else if !ann.bbox.fits_within(record.width, record.height) {
                report.push(
                    id,
                    BoxOutsideImage,
                    format!(
                        "annotation {i}: {:?} exceeds {}x{}",
                        ann.bbox, record.width, record.height
                    ),
                );
            }
            if ann.confidence.is_some() {
                report.push(id, GroundTruthConfidence, format!("annotation {i} carries a confidence"));
            }
            if ann.provenance != record.source {
                report.push(
                    id,
                    ProvenanceMismatch,
                    format!("annotation {i} is {} on a {} image", ann.provenance, record.source),
                );
            }
        }
    }

    let counts = dataset.count_by_split();
    for split in Split::ALL {
        let Some(expected) = dataset.meta.get(&split_count_key(split)) else {
            continue;
        };
        let actual = counts.get(&split).copied().unwrap_or(0);
        if expected.parse::<usize>().ok() != Some(actual) {
            report.push(
                None,
                SplitCountMismatch,
                format!("meta says {expected} {split} records, dataset has {actual}"),
            );
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Annotation, BoundingBox, ImageRecord, Provenance};

    fn record(id: u64, source: Provenance) -> ImageRecord {
        ImageRecord::new(id, format!("img/{id}.png"), 100, 80, Split::Train, source).with_annotation(
            Annotation::ground_truth(BoundingBox::new(10.0, 10.0, 50.0, 40.0), 3, source),
        )
    }

    #[test]
    fn valid_dataset_has_empty_report() {
        let ds = DetectionDataset::new(vec![record(1, Provenance::Real), record(2, Provenance::Flux)])
            .with_split_counts();
        assert!(validate_dataset(&ds).is_valid());
        assert!(validate_dataset(&DetectionDataset::default()).is_valid());
    }

    #[test]
    fn duplicate_id_reported_once() {
        let ds = DetectionDataset::new(vec![
            record(7, Provenance::Real),
            record(7, Provenance::Real),
            record(7, Provenance::Real),
        ]);
        let report = validate_dataset(&ds);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::DuplicateImageId);
        assert_eq!(report.violations[0].image_id, Some(7));
        assert!(report.violations[0].detail.contains('7'));
    }

    #[test]
    fn box_and_class_violations() {
        let mut r = record(1, Provenance::Real);
        r.annotations[0].bbox = BoundingBox::new(10.0, 10.0, 101.0, 40.0);
        r.annotations.push(Annotation::ground_truth(
            BoundingBox::new(30.0, 10.0, 20.0, 40.0),
            15,
            Provenance::Real,
        ));
        let report = validate_dataset(&DetectionDataset::new(vec![r]));
        let kinds: Vec<_> = report.violations.iter().map(|v| v.kind).collect();
        assert_eq!(
            kinds,
            vec![ViolationKind::BoxOutsideImage, ViolationKind::UnknownClass, ViolationKind::MalformedBox]
        );
    }

    #[test]
    fn synthetic_records_need_exactly_one_box() {
        let mut r = record(1, Provenance::Sim3d);
        r.annotations.push(r.annotations[0].clone());
        let mut empty = record(2, Provenance::Flux);
        empty.annotations.clear();
        let mut multi_real = record(3, Provenance::Real);
        multi_real.annotations.push(multi_real.annotations[0].clone());
        let report = validate_dataset(&DetectionDataset::new(vec![r, empty, multi_real]));
        let ids: Vec<_> = report
            .of_kind(ViolationKind::SyntheticAnnotationCount)
            .map(|v| v.image_id.unwrap())
            .collect();
        assert_eq!(ids, vec![1, 2]);
    }

    #[test]
    fn confidence_and_provenance_checked() {
        let mut r = record(1, Provenance::Flux);
        r.annotations[0].confidence = Some(0.9);
        r.annotations[0].provenance = Provenance::Real;
        let report = validate_dataset(&DetectionDataset::new(vec![r]));
        assert_eq!(report.of_kind(ViolationKind::GroundTruthConfidence).count(), 1);
        assert_eq!(report.of_kind(ViolationKind::ProvenanceMismatch).count(), 1);
    }

    #[test]
    fn split_counts_checked_against_meta() {
        let ds = DetectionDataset::new(vec![record(1, Provenance::Real)])
            .with_split_counts()
            .with_meta("count.test", "4");
        let report = validate_dataset(&ds);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::SplitCountMismatch);
    }
}

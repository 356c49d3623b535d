//! Boxes for generated images: open-vocabulary top-1 detection for plain
//! batches, transfer from guidance pairs for edge-conditioned ones.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, OpenVocabDetector, OpenVocabRequest, RawDetection, RetryPolicy};
use crate::data::{Annotation, BoundingBox, ClassId, Provenance};
use crate::generation::{GeneratedBatch, GeneratedRecord, Regime};
use crate::guidance::GuidancePair;

#[derive(Debug, Error, PartialEq)]
pub enum LabelingError {
    #[error("open-vocabulary backend failed after {attempts} attempt(s): {error}")]
    Transport { error: BackendError, attempts: u32 },
    #[error("record {index}: {detail}")]
    Lineage { index: usize, detail: String },
    #[error("invalid query: {0}")]
    Query(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpenVocabQuery {
    pub phrase: String,
    pub min_confidence: f64,
}

impl Default for OpenVocabQuery {
    fn default() -> Self {
        Self {
            phrase: "military vehicle".into(),
            min_confidence: 0.0,
        }
    }
}

impl OpenVocabQuery {
    pub fn validate(&self) -> Result<(), LabelingError> {
        if self.phrase.trim().is_empty() {
            return Err(LabelingError::Query("phrase must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(LabelingError::Query(format!(
                "min_confidence {} outside [0, 1]",
                self.min_confidence
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelingMethod {
    OpenVocabTop1,
    GuidanceTransfer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    NoDetection,
    /// The retained box had no area left inside the image.
    InvalidBox,
    /// The transferred box does not fit the generated image.
    BoxOutsideImage,
    BackendError,
}

impl RejectionReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectionReason::NoDetection => "no_detection",
            RejectionReason::InvalidBox => "invalid_box",
            RejectionReason::BoxOutsideImage => "box_outside_image",
            RejectionReason::BackendError => "backend_error",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LabelResult {
    Accepted { annotation: Annotation },
    Rejected { reason: RejectionReason, detail: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelingOutcome {
    pub index: usize,
    pub image_uri: String,
    pub method: LabelingMethod,
    #[serde(flatten)]
    pub result: LabelResult,
}

impl LabelingOutcome {
    pub fn annotation(&self) -> Option<&Annotation> {
        match &self.result {
            LabelResult::Accepted { annotation } => Some(annotation),
            LabelResult::Rejected { .. } => None,
        }
    }

    fn rejected(record: &GeneratedRecord, method: LabelingMethod, reason: RejectionReason, detail: String) -> Self {
        Self {
            index: record.index,
            image_uri: record.image_uri.clone(),
            method,
            result: LabelResult::Rejected { reason, detail },
        }
    }
}

/// Replaces the class with the generator's; geometry is left untouched.
pub fn assign_class_label(annotation: &Annotation, lora_class: ClassId) -> Annotation {
    Annotation {
        class_id: lora_class,
        ..annotation.clone()
    }
}

// Highest confidence at or above the floor; the first wins a tie.
fn top1(detections: &[RawDetection], min_confidence: f64) -> Option<&RawDetection> {
    let mut best: Option<&RawDetection> = None;
    for d in detections {
        if !(d.confidence >= min_confidence) {
            continue;
        }
        if best.is_none_or(|b| d.confidence > b.confidence) {
            best = Some(d);
        }
    }
    best
}

/// Keeps the top-1 detection for the query phrase, clipped to the image,
/// labelled with the generating adapter's class. The backend's own label is
/// discarded.
pub fn annotate_open_vocab(
    record: &GeneratedRecord,
    backend: &dyn OpenVocabDetector,
    query: &OpenVocabQuery,
    retry: RetryPolicy,
) -> Result<LabelingOutcome, LabelingError> {
    let request = OpenVocabRequest {
        image_uri: record.image_uri.clone(),
        phrase: query.phrase.clone(),
    };
    let response = retry
        .run(|| backend.detect(&request))
        .map_err(|(error, attempts)| LabelingError::Transport { error, attempts })?;
    let method = LabelingMethod::OpenVocabTop1;
    let Some(best) = top1(&response.detections, query.min_confidence) else {
        return Ok(LabelingOutcome::rejected(
            record,
            method,
            RejectionReason::NoDetection,
            format!("{} detections, none at or above {}", response.detections.len(), query.min_confidence),
        ));
    };
    let [x0, y0, x1, y1] = best.bbox;
    let Some(bbox) = BoundingBox::new(x0, y0, x1, y1).clipped(record.width, record.height) else {
        return Ok(LabelingOutcome::rejected(
            record,
            method,
            RejectionReason::InvalidBox,
            format!("{:?} has no area inside {}x{}", best.bbox, record.width, record.height),
        ));
    };
    let raw = Annotation::ground_truth(bbox, record.class_id, Provenance::Flux);
    Ok(LabelingOutcome {
        index: record.index,
        image_uri: record.image_uri.clone(),
        method,
        result: LabelResult::Accepted {
            annotation: assign_class_label(&raw, record.class_id),
        },
    })
}

/// Copies the guidance source box bit-for-bit, with the generator's class
/// and FLUX-CN provenance.
pub fn transfer_annotation(record: &GeneratedRecord, pairs: &[GuidancePair]) -> Result<LabelingOutcome, LabelingError> {
    let pair_id = record.guidance_pair.ok_or_else(|| LabelingError::Lineage {
        index: record.index,
        detail: "record carries no guidance pair id".into(),
    })?;
    let pair = pairs.get(pair_id).ok_or_else(|| LabelingError::Lineage {
        index: record.index,
        detail: format!("guidance pair {pair_id} not among {} pairs", pairs.len()),
    })?;
    if let Some(src) = record.guidance_source_id {
        if src != pair.source_image_id {
            return Err(LabelingError::Lineage {
                index: record.index,
                detail: format!("pair {pair_id} comes from render {}, record cites {src}", pair.source_image_id),
            });
        }
    }
    let method = LabelingMethod::GuidanceTransfer;
    let annotation = Annotation {
        provenance: Provenance::FluxCn,
        ..assign_class_label(&pair.source_annotation, record.class_id)
    };
    if !annotation.bbox.fits_within(record.width, record.height) {
        return Ok(LabelingOutcome::rejected(
            record,
            method,
            RejectionReason::BoxOutsideImage,
            format!("{:?} outside {}x{}", annotation.bbox, record.width, record.height),
        ));
    }
    Ok(LabelingOutcome {
        index: record.index,
        image_uri: record.image_uri.clone(),
        method,
        result: LabelResult::Accepted { annotation },
    })
}

/// How a batch gets its boxes.
pub enum Labeler<'a> {
    OpenVocab {
        backend: &'a dyn OpenVocabDetector,
        query: &'a OpenVocabQuery,
        retry: RetryPolicy,
    },
    Transfer {
        pairs: &'a [GuidancePair],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    pub class_id: ClassId,
    pub regime: Regime,
    pub variant: Provenance,
    pub records: Vec<GeneratedRecord>,
    /// Parallel to `records`.
    pub outcomes: Vec<LabelingOutcome>,
}

impl LabeledBatch {
    pub fn accepted(&self) -> impl Iterator<Item = (&GeneratedRecord, &Annotation)> {
        self.records
            .iter()
            .zip(&self.outcomes)
            .filter_map(|(r, o)| o.annotation().map(|a| (r, a)))
    }

    pub fn rejected(&self) -> impl Iterator<Item = &LabelingOutcome> {
        self.outcomes.iter().filter(|o| o.annotation().is_none())
    }

    pub fn accepted_count(&self) -> usize {
        self.accepted().count()
    }

    pub fn rejection_count(&self) -> usize {
        self.rejected().count()
    }

    pub fn rejection_rate(&self) -> f64 {
        if self.outcomes.is_empty() {
            0.0
        } else {
            self.rejection_count() as f64 / self.outcomes.len() as f64
        }
    }
}

/// Labels every record; outcomes keep record order. Backend failures become
/// `backend_error` rejections so that accepted plus rejected always equals
/// the batch size. Lineage errors abort the pass.
pub fn label_batch(batch: &GeneratedBatch, labeler: &Labeler<'_>) -> Result<LabeledBatch, LabelingError> {
    if let Labeler::OpenVocab { query, .. } = labeler {
        query.validate()?;
    }
    let outcomes: Vec<LabelingOutcome> = batch
        .records
        .par_iter()
        .map(|record| match labeler {
            Labeler::OpenVocab { backend, query, retry } => {
                match annotate_open_vocab(record, *backend, query, *retry) {
                    Err(LabelingError::Transport { error, attempts }) => Ok(LabelingOutcome::rejected(
                        record,
                        LabelingMethod::OpenVocabTop1,
                        RejectionReason::BackendError,
                        format!("{error} after {attempts} attempt(s)"),
                    )),
                    other => other,
                }
            }
            Labeler::Transfer { pairs } => transfer_annotation(record, pairs),
        })
        .collect::<Result<_, _>>()?;
    Ok(LabeledBatch {
        class_id: batch.class_id,
        regime: batch.regime,
        variant: batch.variant,
        records: batch.records.clone(),
        outcomes,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassLabelingStats {
    pub total: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub rejection_rate: f64,
    pub reasons: BTreeMap<String, usize>,
}

/// Acceptance and rejection counts per class.
pub fn rejection_report(batches: &[LabeledBatch]) -> BTreeMap<ClassId, ClassLabelingStats> {
    let mut out: BTreeMap<ClassId, ClassLabelingStats> = BTreeMap::new();
    for b in batches {
        let s = out.entry(b.class_id).or_default();
        s.total += b.outcomes.len();
        s.accepted += b.accepted_count();
        for o in b.rejected() {
            s.rejected += 1;
            if let LabelResult::Rejected { reason, .. } = &o.result {
                *s.reasons.entry(reason.as_str().to_string()).or_default() += 1;
            }
        }
    }
    for s in out.values_mut() {
        s.rejection_rate = if s.total == 0 { 0.0 } else { s.rejected as f64 / s.total as f64 };
    }
    out
}

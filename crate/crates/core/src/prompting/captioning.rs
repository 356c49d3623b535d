use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::template::{Bindings, Placeholder, TemplateRole, TemplateSet};
use super::PromptError;
use crate::backend::{RetryPolicy, TextBackend, TextRequest};
use crate::data::{ClassId, ImageId, ImageRecord, Taxonomy};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub image_id: ImageId,
    pub image_uri: String,
    pub caption: String,
    pub class_id: ClassId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CaptionRejectionReason {
    EmptyCaption,
    Backend { error: String, attempts: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRejection {
    pub image_id: ImageId,
    pub reason: CaptionRejectionReason,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionBatch {
    pub pairs: Vec<CaptionPair>,
    pub rejections: Vec<CaptionRejection>,
}

/// Captions every record of a single class, one backend call per image.
///
/// Output pairs and rejections are ordered by image id; every input record
/// ends up in exactly one of the two lists.
pub fn caption_images(
    records: &[ImageRecord],
    taxonomy: &Taxonomy,
    templates: &TemplateSet,
    captioner: &dyn TextBackend,
    retry: RetryPolicy,
) -> Result<CaptionBatch, PromptError> {
    let Some(first) = records.first() else {
        return Ok(CaptionBatch::default());
    };
    let class_of = |r: &ImageRecord| r.primary_class().ok_or(PromptError::Unlabeled(r.image_id));
    let class_id = class_of(first)?;
    for r in records {
        let c = class_of(r)?;
        if c != class_id {
            return Err(PromptError::MixedClasses {
                expected: class_id,
                found: c,
                image_id: r.image_id,
            });
        }
    }
    let vehicle = taxonomy.require(class_id)?.name.clone();

    let bindings = Bindings::from([(Placeholder::VehicleName, vehicle.clone())]);
    let system_prompt = templates.get(TemplateRole::CaptionSystem).render(&bindings)?;
    let user_prompt = templates.get(TemplateRole::CaptionUser).render(&bindings)?;

    let mut sorted: Vec<&ImageRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.image_id);

    let results: Vec<Result<CaptionPair, CaptionRejection>> = sorted
        .par_iter()
        .map(|record| {
            let request = TextRequest {
                template_role: TemplateRole::CaptionUser,
                rendered_prompt: user_prompt.clone(),
                system_prompt: Some(system_prompt.clone()),
                image_uri: Some(record.uri.clone()),
                vehicle_name: Some(vehicle.clone()),
                count: None,
            };
            let response = retry.run(|| captioner.complete(&request)).map_err(|(e, attempts)| {
                CaptionRejection {
                    image_id: record.image_id,
                    reason: CaptionRejectionReason::Backend {
                        error: e.to_string(),
                        attempts,
                    },
                }
            })?;
            let caption = response
                .text
                .or_else(|| response.texts.and_then(|t| t.into_iter().next()))
                .unwrap_or_default()
                .trim()
                .to_string();
            if caption.is_empty() {
                return Err(CaptionRejection {
                    image_id: record.image_id,
                    reason: CaptionRejectionReason::EmptyCaption,
                });
            }
            Ok(CaptionPair {
                image_id: record.image_id,
                image_uri: record.uri.clone(),
                caption,
                class_id,
            })
        })
        .collect();

    let mut batch = CaptionBatch::default();
    for r in results {
        match r {
            Ok(p) => batch.pairs.push(p),
            Err(rej) => batch.rejections.push(rej),
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockCaptioner;
    use crate::backend::{BackendError, TextResponse};
    use crate::data::{Annotation, BoundingBox, Provenance, Split};

    fn records(class: ClassId, ids: impl Iterator<Item = u64>) -> Vec<ImageRecord> {
        ids.map(|id| {
            ImageRecord::new(id, format!("real/{id}.jpg"), 640, 480, Split::Train, Provenance::Real).with_annotation(
                Annotation::ground_truth(BoundingBox::new(1.0, 1.0, 100.0, 100.0), class, Provenance::Real),
            )
        })
        .collect()
    }

    #[test]
    fn one_pair_per_record_in_id_order() {
        let recs: Vec<_> = records(0, (0..24).rev()).into_iter().collect();
        let out = caption_images(
            &recs,
            &Taxonomy::default(),
            &TemplateSet::builtin(),
            &MockCaptioner,
            RetryPolicy::default(),
        )
        .unwrap();
        assert_eq!(out.pairs.len(), 24);
        assert!(out.rejections.is_empty());
        assert!(out.pairs.windows(2).all(|w| w[0].image_id < w[1].image_id));
        assert!(out.pairs.iter().all(|p| p.class_id == 0 && p.caption.contains("Boxer")));
    }

    #[test]
    fn empty_input_gives_empty_batch() {
        let out = caption_images(&[], &Taxonomy::default(), &TemplateSet::builtin(), &MockCaptioner, RetryPolicy::default())
            .unwrap();
        assert_eq!(out, CaptionBatch::default());
    }

    #[test]
    fn empty_caption_rejected() {
        let recs = records(8, 0..24);
        let backend = |req: &TextRequest| {
            let text = if req.image_uri.as_deref() == Some("real/5.jpg") { "  " } else { "A T90. On a road." };
            Ok(TextResponse::single(text, "stub"))
        };
        let out = caption_images(&recs, &Taxonomy::default(), &TemplateSet::builtin(), &backend, RetryPolicy::default())
            .unwrap();
        assert_eq!(out.pairs.len(), 23);
        assert_eq!(
            out.rejections,
            vec![CaptionRejection { image_id: 5, reason: CaptionRejectionReason::EmptyCaption }]
        );
    }

    #[test]
    fn backend_failure_recorded_with_attempts() {
        let recs = records(2, 0..3);
        let backend = |req: &TextRequest| {
            if req.image_uri.as_deref() == Some("real/1.jpg") {
                Err(BackendError::Transport("timeout".into()))
            } else {
                Ok(TextResponse::single("ok. ok.", "stub"))
            }
        };
        let out = caption_images(&recs, &Taxonomy::default(), &TemplateSet::builtin(), &backend, RetryPolicy { max_attempts: 4 })
            .unwrap();
        assert_eq!(out.pairs.len() + out.rejections.len(), 3);
        match &out.rejections[0].reason {
            CaptionRejectionReason::Backend { attempts, error } => {
                assert_eq!(*attempts, 4);
                assert!(error.contains("timeout"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mixed_classes_rejected() {
        let mut recs = records(0, 0..2);
        recs.extend(records(1, 2..3));
        let err = caption_images(&recs, &Taxonomy::default(), &TemplateSet::builtin(), &MockCaptioner, RetryPolicy::default())
            .unwrap_err();
        assert!(matches!(err, PromptError::MixedClasses { image_id: 2, .. }));
    }

    #[test]
    fn request_carries_rendered_prompts() {
        let recs = records(12, 0..1);
        let backend = |req: &TextRequest| {
            assert!(req.system_prompt.as_ref().unwrap().contains("Detail the Panzerhaubitze 2000"));
            assert_eq!(req.template_role, TemplateRole::CaptionUser);
            Ok(TextResponse::single("x", "stub"))
        };
        caption_images(&recs, &Taxonomy::default(), &TemplateSet::builtin(), &backend, RetryPolicy::default()).unwrap();
    }
}

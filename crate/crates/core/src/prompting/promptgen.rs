use serde::{Deserialize, Serialize};

use super::captioning::CaptionPair;
use super::template::{format_examples, Bindings, Placeholder, TemplateRole, TemplateSet};
use super::PromptError;
use crate::backend::{RetryPolicy, TextBackend, TextRequest, TextResponse};
use crate::data::{ClassId, Taxonomy};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub backend_id: String,
    pub template_hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub class_id: ClassId,
    pub prompts: Vec<String>,
    pub generation_meta: GenerationMeta,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PromptList {
    Bare(Vec<String>),
    Wrapped { prompts: Vec<String> },
}

// A `text` response must hold a JSON list of strings, bare or under "prompts".
fn parse_texts(response: TextResponse) -> Result<Vec<String>, PromptError> {
    if let Some(texts) = response.texts {
        return Ok(texts);
    }
    let text = response
        .text
        .ok_or_else(|| PromptError::Parse("response carries neither `text` nor `texts`".into()))?;
    let trimmed = text.trim();
    let body = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .and_then(|s| s.strip_suffix("```"))
        .unwrap_or(trimmed);
    match serde_json::from_str::<PromptList>(body) {
        Ok(PromptList::Bare(v)) | Ok(PromptList::Wrapped { prompts: v }) => Ok(v),
        Err(e) => Err(PromptError::Parse(format!("expected a list of strings: {e}"))),
    }
}

/// Asks the language model for `batch` new prompts modeled on the class's
/// captions. Blank entries are discarded; surplus entries are truncated.
pub fn generate_prompts(
    class_id: ClassId,
    caption_examples: &[CaptionPair],
    batch: usize,
    taxonomy: &Taxonomy,
    templates: &TemplateSet,
    llm: &dyn TextBackend,
    retry: RetryPolicy,
) -> Result<PromptSet, PromptError> {
    if batch == 0 {
        return Err(PromptError::InvalidRequest("batch must be at least 1".into()));
    }
    if caption_examples.is_empty() {
        return Err(PromptError::InvalidRequest("no caption examples".into()));
    }
    let vehicle = taxonomy.require(class_id)?.name.clone();
    let captions: Vec<&str> = caption_examples.iter().map(|c| c.caption.as_str()).collect();
    let bindings = Bindings::from([
        (Placeholder::VehicleName, vehicle.clone()),
        (Placeholder::ExamplesList, format_examples(&captions)),
        (Placeholder::Batch, batch.to_string()),
    ]);
    let system_template = templates.get(TemplateRole::PromptgenSystem);
    let user_template = templates.get(TemplateRole::PromptgenUser);
    let request = TextRequest {
        template_role: TemplateRole::PromptgenUser,
        rendered_prompt: user_template.render(&bindings)?,
        system_prompt: Some(system_template.render(&bindings)?),
        image_uri: None,
        vehicle_name: Some(vehicle),
        count: Some(batch),
    };
    let response = retry
        .run(|| llm.complete(&request))
        .map_err(|(e, attempts)| PromptError::Backend { error: e, attempts })?;
    let backend_id = response.model_id.clone();
    let mut prompts: Vec<String> = parse_texts(response)?
        .into_iter()
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect();
    prompts.truncate(batch);

    let set = PromptSet {
        class_id,
        prompts,
        generation_meta: GenerationMeta {
            backend_id,
            template_hash: crate::artifact::json_hash(&[system_template.hash(), user_template.hash()]),
        },
    };
    if set.prompts.len() < batch {
        return Err(PromptError::Shortfall {
            requested: batch,
            received: set.prompts.len(),
            partial: Box::new(set),
        });
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockPromptGenerator;
    use crate::backend::BackendError;

    fn examples(n: usize) -> Vec<CaptionPair> {
        (0..n)
            .map(|i| CaptionPair {
                image_id: i as u64,
                image_uri: format!("real/{i}.jpg"),
                caption: format!("A Boxer number {i} rolls past. Dust rises behind it."),
                class_id: 0,
            })
            .collect()
    }

    fn run(backend: &dyn TextBackend, batch: usize) -> Result<PromptSet, PromptError> {
        generate_prompts(0, &examples(24), batch, &Taxonomy::default(), &TemplateSet::builtin(), backend, RetryPolicy::default())
    }

    #[test]
    fn full_batch_of_prompts() {
        let set = run(&MockPromptGenerator::default(), 150).unwrap();
        assert_eq!(set.prompts.len(), 150);
        assert!(set.prompts.iter().all(|p| !p.trim().is_empty()));
        assert_eq!(set.generation_meta.backend_id, "mock-promptgen");
    }

    #[test]
    fn echo_backend() {
        let ex = examples(24);
        let first = ex[0].caption.clone();
        let echo = move |req: &TextRequest| {
            assert_eq!(req.count, Some(1));
            Ok(TextResponse::list(vec![first.clone()], "echo"))
        };
        let set = run(&echo, 1).unwrap();
        assert_eq!(set.prompts, vec![ex[0].caption.clone()]);
    }

    #[test]
    fn shortfall_keeps_partial_set() {
        let short = MockPromptGenerator { shortfall: 1 };
        match run(&short, 150).unwrap_err() {
            PromptError::Shortfall { requested, received, partial } => {
                assert_eq!((requested, received), (150, 149));
                assert_eq!(partial.prompts.len(), 149);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn text_list_parsing() {
        let wrapped = |_: &TextRequest| Ok(TextResponse::single(r#"{"prompts": ["a", " ", "b", "c"]}"#, "m"));
        assert_eq!(run(&wrapped, 2).unwrap().prompts, vec!["a", "b"]);
        let fenced = |_: &TextRequest| Ok(TextResponse::single("```json\n[\"x\"]\n```", "m"));
        assert_eq!(run(&fenced, 1).unwrap().prompts, vec!["x"]);
        let prose = |_: &TextRequest| Ok(TextResponse::single("Sure! Here are prompts: 1. a", "m"));
        assert!(matches!(run(&prose, 1), Err(PromptError::Parse(_))));
    }

    #[test]
    fn precondition_errors() {
        let mock = MockPromptGenerator::default();
        assert!(matches!(run(&mock, 0), Err(PromptError::InvalidRequest(_))));
        let err = generate_prompts(0, &[], 3, &Taxonomy::default(), &TemplateSet::builtin(), &mock, RetryPolicy::default());
        assert!(matches!(err, Err(PromptError::InvalidRequest(_))));
        let down = |_: &TextRequest| Err(BackendError::Transport("refused".into()));
        assert!(matches!(run(&down, 3), Err(PromptError::Backend { attempts: 3, .. })));
    }
}

//! Per-class LoRA job specs, the class/regime adapter registry, and plain or
//! edge-conditioned synthesis through a text-to-image backend.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::json_hash;
use crate::backend::{BackendError, ImageSynthesizer, RetryPolicy, SynthesisRequest};
use crate::data::{ClassId, ImageId, Provenance, Taxonomy, TaxonomyError};
use crate::guidance::GuidancePair;
use crate::prompting::{CaptionPair, PromptSet};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("regime {regime} needs {expected} caption pairs, got {got}")]
    RegimeMismatch { regime: Regime, expected: usize, got: usize },
    #[error("caption pair for image {image_id} is class {found}, spec is class {expected}")]
    ClassMismatch { expected: ClassId, found: ClassId, image_id: ImageId },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("no adapter registered for class {class_id} in regime {regime}")]
    MissingAdapter { class_id: ClassId, regime: Regime },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{} of {requested} records failed: indices {failed:?}; last error: {last_error}", failed.len())]
    Shortfall {
        requested: usize,
        failed: Vec<usize>,
        last_error: BackendError,
        partial: Box<GeneratedBatch>,
    },
}

/// Number of real images per class behind a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    R8,
    R24,
}

impl Regime {
    pub const ALL: [Regime; 2] = [Regime::R8, Regime::R24];

    pub fn per_class(self) -> usize {
        match self {
            Regime::R8 => 8,
            Regime::R24 => 24,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::R8 => "r8",
            Regime::R24 => "r24",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "r8" | "8" => Ok(Regime::R8),
            "r24" | "24" => Ok(Regime::R24),
            other => Err(format!("unknown regime {other:?}, expected r8 or r24")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraHyperparams {
    pub rank: u32,
    pub alpha: u32,
    pub full_rank_adaptation: bool,
    pub steps: u32,
    pub batch_size: u32,
    pub grad_accum: u32,
    pub optimizer_name: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub train_text_encoder: bool,
    pub gradient_checkpointing: bool,
}

impl Default for LoraHyperparams {
    fn default() -> Self {
        Self {
            rank: 32,
            alpha: 32,
            full_rank_adaptation: true,
            steps: 2000,
            batch_size: 1,
            grad_accum: 1,
            optimizer_name: "adamw-8bit".into(),
            learning_rate: 4.0e-4,
            weight_decay: 1.0e-4,
            train_text_encoder: true,
            gradient_checkpointing: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub image_uri: String,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraJobSpec {
    pub class_id: ClassId,
    pub class_name: String,
    pub regime: Regime,
    pub training_pairs: Vec<TrainingPair>,
    #[serde(flatten)]
    pub hyper: LoraHyperparams,
}

impl LoraJobSpec {
    pub fn training_hash(&self) -> String {
        json_hash(self)
    }
}

/// Fine-tuning job for one class. Pairs are kept in image-id order.
pub fn build_lora_spec(
    class_id: ClassId,
    caption_pairs: &[CaptionPair],
    regime: Regime,
    hyper: &LoraHyperparams,
    taxonomy: &Taxonomy,
) -> Result<LoraJobSpec, GenerationError> {
    let class = taxonomy.require(class_id)?;
    if let Some(p) = caption_pairs.iter().find(|p| p.class_id != class_id) {
        return Err(GenerationError::ClassMismatch {
            expected: class_id,
            found: p.class_id,
            image_id: p.image_id,
        });
    }
    if caption_pairs.len() != regime.per_class() {
        return Err(GenerationError::RegimeMismatch {
            regime,
            expected: regime.per_class(),
            got: caption_pairs.len(),
        });
    }
    if hyper.rank == 0 || hyper.steps == 0 {
        return Err(GenerationError::Invalid("rank and steps must be positive".into()));
    }
    let mut pairs: Vec<&CaptionPair> = caption_pairs.iter().collect();
    pairs.sort_by_key(|p| p.image_id);
    Ok(LoraJobSpec {
        class_id,
        class_name: class.name.clone(),
        regime,
        training_pairs: pairs
            .into_iter()
            .map(|p| TrainingPair {
                image_uri: p.image_uri.clone(),
                caption: p.caption.clone(),
            })
            .collect(),
        hyper: hyper.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraEntry {
    pub class_id: ClassId,
    pub regime: Regime,
    pub artifact_uri: String,
    pub training_hash: String,
}

/// Trained adapters, at most one per (class, regime), sorted by that key.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraRegistry {
    pub entries: Vec<LoraEntry>,
}

impl LoraRegistry {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class_id: ClassId, regime: Regime) -> Option<&LoraEntry> {
        self.entries
            .binary_search_by_key(&(class_id, regime), |e| (e.class_id, e.regime))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Inserts or replaces the (class, regime) entry.
    pub fn register(
        &self,
        class_id: ClassId,
        regime: Regime,
        artifact_uri: impl Into<String>,
        training_hash: impl Into<String>,
    ) -> Result<LoraRegistry, GenerationError> {
        let artifact_uri = artifact_uri.into();
        if artifact_uri.trim().is_empty() {
            return Err(GenerationError::Invalid("artifact uri must be non-empty".into()));
        }
        let entry = LoraEntry {
            class_id,
            regime,
            artifact_uri,
            training_hash: training_hash.into(),
        };
        let mut next = self.clone();
        match next
            .entries
            .binary_search_by_key(&(class_id, regime), |e| (e.class_id, e.regime))
        {
            Ok(i) => next.entries[i] = entry,
            Err(i) => next.entries.insert(i, entry),
        }
        Ok(next)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisJobSpec {
    pub class_id: ClassId,
    pub regime: Regime,
    /// `flux` for prompt-only synthesis, `flux_cn` for edge-conditioned.
    pub variant: Provenance,
    pub adapter: LoraEntry,
    pub prompts: PromptSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<Vec<GuidancePair>>,
    pub count: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditioning_strength: Option<f64>,
}

pub const DEFAULT_CONDITIONING_STRENGTH: f64 = 1.0;

impl SynthesisJobSpec {
    /// Resolves the adapter from the registry; fails fast if it is missing.
    /// The variant follows from whether guidance is given.
    pub fn from_registry(
        registry: &LoraRegistry,
        regime: Regime,
        prompts: PromptSet,
        guidance: Option<Vec<GuidancePair>>,
        count: usize,
        seed: u64,
    ) -> Result<Self, GenerationError> {
        let class_id = prompts.class_id;
        let adapter = registry
            .get(class_id, regime)
            .cloned()
            .ok_or(GenerationError::MissingAdapter { class_id, regime })?;
        let guided = guidance.is_some();
        Ok(Self {
            class_id,
            regime,
            variant: if guided { Provenance::FluxCn } else { Provenance::Flux },
            adapter,
            prompts,
            guidance,
            count,
            seed,
            conditioning_strength: guided.then_some(DEFAULT_CONDITIONING_STRENGTH),
        })
    }

    /// Seed for record `index`.
    pub fn record_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(10_000).wrapping_add(index as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub index: usize,
    pub image_uri: String,
    pub prompt: String,
    pub prompt_index: usize,
    /// Position in the job's guidance list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_pair: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_source_id: Option<ImageId>,
    pub class_id: ClassId,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedBatch {
    pub class_id: ClassId,
    pub regime: Regime,
    pub variant: Provenance,
    pub adapter_uri: String,
    pub records: Vec<GeneratedRecord>,
}

/// `generated/<regime>/<class-slug>/<variant>_<index>.png` under `root`.
pub fn output_path(root: &Path, regime: Regime, class_slug: &str, variant: Provenance, index: usize) -> PathBuf {
    root.join("generated")
        .join(regime.as_str())
        .join(class_slug)
        .join(format!("{}_{index:04}.png", variant.as_str()))
}

struct Planned {
    index: usize,
    prompt_index: usize,
    guidance_pair: Option<usize>,
    request: SynthesisRequest,
}

fn plan(spec: &SynthesisJobSpec, class_slug: &str, root: &Path) -> Vec<Planned> {
    let prompts = &spec.prompts.prompts;
    (0..spec.count)
        .map(|index| {
            let prompt_index = index % prompts.len();
            let guidance_pair = spec.guidance.as_ref().map(|g| index % g.len());
            let edge_map_uri = guidance_pair.map(|g| spec.guidance.as_ref().expect("guided")[g].edge_map_uri.clone());
            Planned {
                index,
                prompt_index,
                guidance_pair,
                request: SynthesisRequest {
                    prompt: prompts[prompt_index].clone(),
                    adapter_uri: spec.adapter.artifact_uri.clone(),
                    seed: spec.record_seed(index),
                    edge_map_uri,
                    conditioning_strength: spec.guidance.as_ref().and(spec.conditioning_strength),
                    output_uri: Some(
                        output_path(root, spec.regime, class_slug, spec.variant, index)
                            .to_string_lossy()
                            .into_owned(),
                    ),
                },
            }
        })
        .collect()
}

/// Runs every record of the job through `backend`, assembling the batch in
/// index order. Prompts and guidance pairs are assigned round-robin.
pub fn synthesize(
    spec: &SynthesisJobSpec,
    backend: &dyn ImageSynthesizer,
    taxonomy: &Taxonomy,
    output_root: &Path,
    retry: RetryPolicy,
) -> Result<GeneratedBatch, GenerationError> {
    if spec.count == 0 {
        return Err(GenerationError::Invalid("count must be at least 1".into()));
    }
    if spec.prompts.prompts.is_empty() {
        return Err(GenerationError::Invalid("prompt set is empty".into()));
    }
    if spec.prompts.class_id != spec.class_id || spec.adapter.class_id != spec.class_id {
        return Err(GenerationError::Invalid(format!(
            "job is class {}, prompts class {}, adapter class {}",
            spec.class_id, spec.prompts.class_id, spec.adapter.class_id
        )));
    }
    if spec.adapter.regime != spec.regime {
        return Err(GenerationError::MissingAdapter {
            class_id: spec.class_id,
            regime: spec.regime,
        });
    }
    if let Some(g) = &spec.guidance {
        if g.is_empty() {
            return Err(GenerationError::Invalid("guidance list is empty".into()));
        }
        if let Some(p) = g.iter().find(|p| p.class_id != spec.class_id) {
            return Err(GenerationError::Invalid(format!(
                "guidance pair from record {} is class {}",
                p.source_image_id, p.class_id
            )));
        }
    }
    let slug = taxonomy.require(spec.class_id)?.slug();

    let results: Vec<Result<GeneratedRecord, (usize, BackendError)>> = plan(spec, &slug, output_root)
        .into_par_iter()
        .map(|p| {
            let response = retry.run(|| backend.synthesize(&p.request)).map_err(|(e, _)| (p.index, e))?;
            let (width, height) = match (response.width, response.height) {
                (Some(w), Some(h)) => (w, h),
                _ => image::image_dimensions(&response.image_uri)
                    .map_err(|e| (p.index, BackendError::Malformed(format!("{}: {e}", response.image_uri))))?,
            };
            Ok(GeneratedRecord {
                index: p.index,
                image_uri: response.image_uri,
                prompt: p.request.prompt,
                prompt_index: p.prompt_index,
                guidance_pair: p.guidance_pair,
                guidance_source_id: p
                    .guidance_pair
                    .map(|g| spec.guidance.as_ref().expect("guided")[g].source_image_id),
                class_id: spec.class_id,
                seed: p.request.seed,
                width,
                height,
            })
        })
        .collect();

    let mut batch = GeneratedBatch {
        class_id: spec.class_id,
        regime: spec.regime,
        variant: spec.variant,
        adapter_uri: spec.adapter.artifact_uri.clone(),
        records: Vec::with_capacity(spec.count),
    };
    let mut failed = Vec::new();
    let mut last_error = None;
    for r in results {
        match r {
            Ok(rec) => batch.records.push(rec),
            Err((i, e)) => {
                failed.push(i);
                last_error = Some(e);
            }
        }
    }
    match last_error {
        None => Ok(batch),
        Some(last_error) => Err(GenerationError::Shortfall {
            requested: spec.count,
            failed,
            last_error,
            partial: Box::new(batch),
        }),
    }
}

//! Subset selection, dataset assembly from labeled batches, and balanced
//! mixing of several sources by integer repetition.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    validate_dataset, ClassId, DetectionDataset, ImageRecord, Provenance, Split, Taxonomy, ValidationReport,
};
use crate::labeling::{LabelResult, LabeledBatch, LabelingOutcome};

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("class {class_id} ({name}) has {available} records, {requested} requested")]
    Insufficient {
        class_id: ClassId,
        name: String,
        available: usize,
        requested: usize,
    },
    #[error("no batch for class(es): {}", missing.join(", "))]
    Coverage { missing: Vec<String> },
    #[error("assembled dataset is invalid:\n{0}")]
    Validation(ValidationReport),
    #[error("invalid mix: {0}")]
    Mix(String),
}

/// `per_class` records of every taxonomy class: each class's records are
/// sorted by id, shuffled with a stream keyed by `(seed, class_id)`, and the
/// first `per_class` kept. Output is in image-id order; meta is carried over
/// with split counts refreshed.
pub fn select_subset(dataset: &DetectionDataset, per_class: usize, seed: u64) -> Result<DetectionDataset, AssemblyError> {
    let mut by_class: BTreeMap<ClassId, Vec<&ImageRecord>> = dataset.taxonomy.ids().map(|c| (c, Vec::new())).collect();
    for r in &dataset.records {
        if let Some(c) = r.primary_class() {
            by_class.entry(c).or_default().push(r);
        }
    }
    let mut chosen = Vec::with_capacity(per_class * by_class.len());
    for (class_id, mut recs) in by_class {
        if recs.len() < per_class {
            return Err(AssemblyError::Insufficient {
                class_id,
                name: dataset.taxonomy.name_of(class_id).unwrap_or("?").to_string(),
                available: recs.len(),
                requested: per_class,
            });
        }
        recs.sort_by_key(|r| r.image_id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(class_id));
        recs.shuffle(&mut rng);
        chosen.extend(recs.into_iter().take(per_class).cloned());
    }
    chosen.sort_by_key(|r| r.image_id);
    let mut out = DetectionDataset {
        taxonomy: dataset.taxonomy.clone(),
        records: chosen,
        meta: dataset.meta.clone(),
    }
    .with_meta("subset.per_class", per_class.to_string())
    .with_meta("subset.seed", seed.to_string());
    if dataset.meta.keys().any(|k| k.starts_with("count.")) {
        out.meta.retain(|k, _| !k.starts_with("count."));
        out = out.with_split_counts();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectedImage {
    pub class_id: ClassId,
    pub outcome: LabelingOutcome,
}

#[derive(Clone, Debug)]
pub struct Assembled {
    pub dataset: DetectionDataset,
    pub rejections: Vec<RejectedImage>,
}

/// One training record per accepted labeling outcome, across batches of a
/// single variant. Image ids run from 0 in (class, index) order; rejected
/// images are left out and returned for logging.
pub fn assemble(batches: &[LabeledBatch], taxonomy: &Taxonomy) -> Result<Assembled, AssemblyError> {
    let missing: Vec<String> = taxonomy
        .classes()
        .iter()
        .filter(|c| !batches.iter().any(|b| b.class_id == c.id))
        .map(|c| format!("{} ({})", c.id, c.name))
        .collect();
    if !missing.is_empty() {
        return Err(AssemblyError::Coverage { missing });
    }
    let mut ordered: Vec<&LabeledBatch> = batches.iter().collect();
    ordered.sort_by_key(|b| b.class_id);

    let mut records = Vec::new();
    let mut rejections = Vec::new();
    for batch in ordered {
        for (rec, outcome) in batch.records.iter().zip(&batch.outcomes) {
            match &outcome.result {
                LabelResult::Accepted { annotation } => {
                    let mut r = ImageRecord::new(
                        records.len() as u64,
                        rec.image_uri.clone(),
                        rec.width,
                        rec.height,
                        Split::Train,
                        batch.variant,
                    )
                    .with_annotation(annotation.clone());
                    r.attributes.insert("prompt".into(), rec.prompt.clone());
                    r.attributes.insert("seed".into(), rec.seed.to_string());
                    r.attributes.insert("regime".into(), batch.regime.to_string());
                    r.attributes.insert("batch_index".into(), rec.index.to_string());
                    if let Some(g) = rec.guidance_source_id {
                        r.attributes.insert("guidance_source_id".into(), g.to_string());
                    }
                    records.push(r);
                }
                LabelResult::Rejected { .. } => rejections.push(RejectedImage {
                    class_id: batch.class_id,
                    outcome: outcome.clone(),
                }),
            }
        }
    }
    let mut dataset = DetectionDataset {
        taxonomy: taxonomy.clone(),
        records,
        meta: BTreeMap::new(),
    };
    if let Some(b) = batches.first() {
        dataset = dataset
            .with_meta("source", b.variant.as_str())
            .with_meta("regime", b.regime.as_str());
    }
    let dataset = dataset.with_split_counts();
    let report = validate_dataset(&dataset);
    if !report.is_valid() {
        return Err(AssemblyError::Validation(report));
    }
    Ok(Assembled { dataset, rejections })
}

/// Repetitions that bring every source up to roughly the largest one:
/// `max(1, round_half_up(max / n_i))`, computed in integers.
///
/// # Panics
/// If any size is zero.
pub fn compute_repetition_factors(sizes: &[usize]) -> Vec<u64> {
    let max = sizes.iter().copied().max().unwrap_or(0) as u64;
    sizes
        .iter()
        .map(|&n| {
            assert!(n > 0, "source sizes must be at least 1");
            let n = n as u64;
            ((2 * max + n) / (2 * n)).max(1)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct MixSource {
    pub name: String,
    pub dataset: DetectionDataset,
    pub target_share: f64,
}

#[derive(Clone, Debug)]
pub struct MixSpec {
    pub sources: Vec<MixSource>,
    pub seed: u64,
}

/// Share deviation above which a warning is recorded.
pub const SHARE_WARNING_TOLERANCE: f64 = 0.02;

impl MixSpec {
    /// Equal shares for every source.
    pub fn balanced(sources: Vec<(String, DetectionDataset)>, seed: u64) -> Self {
        let share = 1.0 / sources.len().max(1) as f64;
        Self {
            sources: sources
                .into_iter()
                .map(|(name, dataset)| MixSource {
                    name,
                    dataset,
                    target_share: share,
                })
                .collect(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), AssemblyError> {
        let Some(first) = self.sources.first() else {
            return Err(AssemblyError::Mix("no sources".into()));
        };
        let sum: f64 = self.sources.iter().map(|s| s.target_share).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(AssemblyError::Mix(format!("target shares sum to {sum}")));
        }
        for s in &self.sources {
            if !(s.target_share > 0.0) {
                return Err(AssemblyError::Mix(format!("source {} has share {}", s.name, s.target_share)));
            }
            if s.dataset.is_empty() {
                return Err(AssemblyError::Mix(format!("source {} is empty", s.name)));
            }
            if s.dataset.taxonomy != first.dataset.taxonomy {
                return Err(AssemblyError::Mix(format!("source {} uses a different taxonomy", s.name)));
            }
        }
        Ok(())
    }

    fn equal_targets(&self) -> bool {
        let t0 = self.sources[0].target_share;
        self.sources.iter().all(|s| (s.target_share - t0).abs() <= 1e-12)
    }

    /// Repetition factors. Equal targets use [`compute_repetition_factors`];
    /// otherwise the source needing the fewest repetitions per unit share is
    /// the anchor and the rest are scaled to it with the same rounding.
    pub fn factors(&self) -> Vec<u64> {
        let sizes: Vec<usize> = self.sources.iter().map(|s| s.dataset.len()).collect();
        if self.equal_targets() {
            return compute_repetition_factors(&sizes);
        }
        let anchor = self
            .sources
            .iter()
            .map(|s| s.dataset.len() as f64 / s.target_share)
            .fold(f64::MIN, f64::max);
        self.sources
            .iter()
            .map(|s| ((anchor * s.target_share / s.dataset.len() as f64 + 0.5).floor() as u64).max(1))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedEntry {
    pub source_index: usize,
    pub record: ImageRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedDataset {
    pub source_names: Vec<String>,
    pub records: Vec<MixedEntry>,
    pub factors: Vec<u64>,
    pub target_shares: Vec<f64>,
    pub effective_shares: Vec<f64>,
    pub warnings: Vec<String>,
    pub seed: u64,
    pub taxonomy: Taxonomy,
}

/// `factors[i] * n_i / sum_j factors[j] * n_j`.
pub fn effective_shares(sizes: &[usize], factors: &[u64]) -> Vec<f64> {
    let weighted: Vec<u64> = sizes.iter().zip(factors).map(|(&n, &f)| n as u64 * f).collect();
    let total: u64 = weighted.iter().sum();
    weighted.iter().map(|&w| w as f64 / total as f64).collect()
}

/// Repeats each source's records by its factor and shuffles the result with
/// `spec.seed`.
pub fn mix(spec: &MixSpec) -> Result<MixedDataset, AssemblyError> {
    spec.validate()?;
    let factors = spec.factors();
    let sizes: Vec<usize> = spec.sources.iter().map(|s| s.dataset.len()).collect();
    let shares = effective_shares(&sizes, &factors);
    let warnings = spec
        .sources
        .iter()
        .zip(&shares)
        .filter(|(s, e)| (*e - s.target_share).abs() > SHARE_WARNING_TOLERANCE)
        .map(|(s, e)| format!("source {} gets share {e:.4}, target {:.4}", s.name, s.target_share))
        .collect();

    let mut slots: Vec<(usize, usize)> = Vec::new();
    for (si, (src, &f)) in spec.sources.iter().zip(&factors).enumerate() {
        for _ in 0..f {
            slots.extend((0..src.dataset.len()).map(|ri| (si, ri)));
        }
    }
    slots.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let records = slots
        .into_iter()
        .map(|(si, ri)| MixedEntry {
            source_index: si,
            record: spec.sources[si].dataset.records[ri].clone(),
        })
        .collect();
    Ok(MixedDataset {
        source_names: spec.sources.iter().map(|s| s.name.clone()).collect(),
        records,
        factors,
        target_shares: spec.sources.iter().map(|s| s.target_share).collect(),
        effective_shares: shares,
        warnings,
        seed: spec.seed,
        taxonomy: spec.sources[0].dataset.taxonomy.clone(),
    })
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl MixedDataset {
    /// Manifest form: entries get fresh ids in mixed order, keep the original
    /// id in `repetition_of` and the source name in a `mix_source` attribute.
    pub fn to_manifest(&self) -> DetectionDataset {
        let records = self
            .records
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let mut r = e.record.clone();
                r.repetition_of = Some(r.image_id);
                r.image_id = i as u64;
                r.attributes
                    .insert("mix_source".into(), self.source_names[e.source_index].clone());
                r
            })
            .collect();
        DetectionDataset {
            taxonomy: self.taxonomy.clone(),
            records,
            meta: BTreeMap::new(),
        }
        .with_meta("mix.sources", join(&self.source_names))
        .with_meta("mix.factors", join(&self.factors))
        .with_meta("mix.target_shares", join(&self.target_shares))
        .with_meta(
            "mix.effective_shares",
            join(&self.effective_shares.iter().map(|s| format!("{s:.6}")).collect::<Vec<_>>()),
        )
        .with_meta("mix.seed", self.seed.to_string())
        .with_split_counts()
    }

    pub fn count_by_source(&self) -> Vec<usize> {
        let mut counts = vec![0; self.source_names.len()];
        for e in &self.records {
            counts[e.source_index] += 1;
        }
        counts
    }

    pub fn count_by_provenance(&self) -> BTreeMap<Provenance, usize> {
        let mut out = BTreeMap::new();
        for e in &self.records {
            *out.entry(e.record.source).or_default() += 1;
        }
        out
    }
}

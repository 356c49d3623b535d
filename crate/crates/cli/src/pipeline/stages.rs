use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use gensynth_core::artifact::stable_u64;
use gensynth_core::assembly::{assemble, mix, select_subset, MixSource, MixSpec, RejectedImage};
use gensynth_core::data::{ClassId, Split};
use gensynth_core::generation::{
    build_lora_spec, synthesize, GeneratedBatch, GenerationError, LoraJobSpec, LoraRegistry, SynthesisJobSpec,
};
use gensynth_core::guidance::{build_guidance_pairs, GuidanceSet};
use gensynth_core::labeling::{label_batch, rejection_report, LabeledBatch, Labeler};
use gensynth_core::metrics::{coco_thresholds, evaluate, read_detections_jsonl, MapReport, RunMetrics};
use gensynth_core::prompting::{
    caption_images, generate_prompts, strip_geometry, CaptionBatch, GeometryLexicon, PromptError, PromptSet,
    TemplateRole, TemplateSet,
};
use gensynth_core::trainer::{build_detector_spec, select_checkpoint, DetectorInputs, DetectorJobSpec, ValEntry, ValHistory};
use gensynth_core::{DetectionDataset, Provenance, VehicleClass};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{read_artifact, read_dataset, Ctx};
use crate::failure::Failure;
use crate::{fixtures, report};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Prepare,
    Caption,
    LoraSpecs,
    Prompts,
    Edges,
    Synthesize,
    Label,
    Assemble,
    Mix,
    TrainSpecs,
    Train,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 13] = [
        Stage::Prepare,
        Stage::Caption,
        Stage::LoraSpecs,
        Stage::Prompts,
        Stage::Edges,
        Stage::Synthesize,
        Stage::Label,
        Stage::Assemble,
        Stage::Mix,
        Stage::TrainSpecs,
        Stage::Train,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Caption => "caption",
            Stage::LoraSpecs => "lora-specs",
            Stage::Prompts => "prompts",
            Stage::Edges => "edges",
            Stage::Synthesize => "synthesize",
            Stage::Label => "label",
            Stage::Assemble => "assemble",
            Stage::Mix => "mix",
            Stage::TrainSpecs => "train-specs",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s.trim())
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

pub fn run_stage(ctx: &Ctx, stage: Stage) -> Result<()> {
    match stage {
        Stage::Prepare => prepare(ctx),
        Stage::Caption => caption(ctx),
        Stage::LoraSpecs => lora_specs(ctx),
        Stage::Prompts => prompts(ctx),
        Stage::Edges => edges(ctx),
        Stage::Synthesize => synthesize_stage(ctx),
        Stage::Label => label(ctx),
        Stage::Assemble => assemble_stage(ctx),
        Stage::Mix => mix_stage(ctx),
        Stage::TrainSpecs => train_specs(ctx),
        Stage::Train => train(ctx),
        Stage::Evaluate => evaluate_stage(ctx),
        Stage::Report => {
            let runs = report::find_runs(&ctx.run_dir);
            if runs.is_empty() {
                return Err(Failure::dependency(format!(
                    "no metrics/*/runs.jsonl under {}; run `gensynth evaluate` first",
                    ctx.run_dir.display()
                ))
                .into());
            }
            report::report_stage(ctx, &runs)
        }
    }
}

// ---- paths ----

const VARIANTS: [Provenance; 2] = [Provenance::Flux, Provenance::FluxCn];

fn real_train(ctx: &Ctx) -> PathBuf {
    ctx.path("data/real_train.json")
}
fn val_manifest(ctx: &Ctx) -> PathBuf {
    ctx.path("data/val.json")
}
fn test_manifest(ctx: &Ctx) -> PathBuf {
    ctx.path("data/test.json")
}
fn sim_manifest(ctx: &Ctx) -> PathBuf {
    ctx.path("data/sim.json")
}
fn subset_path(ctx: &Ctx) -> PathBuf {
    ctx.path(format!("subsets/{}/train.json", ctx.regime))
}
fn caption_path(ctx: &Ctx, c: &VehicleClass) -> PathBuf {
    ctx.path(format!("captions/{}/{}.json", ctx.regime, c.slug()))
}
fn lora_spec_path(ctx: &Ctx, c: &VehicleClass) -> PathBuf {
    ctx.path(format!("lora/{}/{}.json", ctx.regime, c.slug()))
}
fn registry_path(ctx: &Ctx) -> PathBuf {
    ctx.path(format!("lora/{}/registry.json", ctx.regime))
}
fn prompt_path(ctx: &Ctx, c: &VehicleClass) -> PathBuf {
    ctx.path(format!("prompts/{}/{}.json", ctx.regime, c.slug()))
}
fn pairs_path(ctx: &Ctx) -> PathBuf {
    ctx.path("guidance/pairs.json")
}
fn batch_path(ctx: &Ctx, v: Provenance, c: &VehicleClass) -> PathBuf {
    ctx.path(format!("batches/{}/{}/{}.json", ctx.regime, v.as_str(), c.slug()))
}
fn labeled_path(ctx: &Ctx, v: Provenance, c: &VehicleClass) -> PathBuf {
    ctx.path(format!("labeled/{}/{}/{}.json", ctx.regime, v.as_str(), c.slug()))
}
fn dataset_path(ctx: &Ctx, v: Provenance) -> PathBuf {
    ctx.path(format!("datasets/{}/{}.json", ctx.regime, v.as_str()))
}
fn mix_path(ctx: &Ctx, name: &str) -> PathBuf {
    ctx.path(format!("mixes/{}/{name}.json", ctx.regime))
}
fn run_dir(ctx: &Ctx, mix: &str, seed: u64) -> PathBuf {
    ctx.path(format!("train/{}/{mix}/seed{seed}", ctx.regime))
}
fn eval_path(ctx: &Ctx, mix: &str, seed: u64) -> PathBuf {
    ctx.path(format!("eval/{}/{mix}/seed{seed}.json", ctx.regime))
}
pub fn runs_path(ctx: &Ctx) -> PathBuf {
    ctx.path(format!("metrics/{}/runs.jsonl", ctx.regime))
}

fn regime_stage(ctx: &Ctx, stage: Stage) -> String {
    format!("{}-{}", stage.as_str(), ctx.regime)
}

fn per_class<'a>(ctx: &'a Ctx, f: impl Fn(&Ctx, &VehicleClass) -> PathBuf + 'a, producer: &'a str) -> Vec<(PathBuf, &'a str)> {
    ctx.taxonomy.classes().iter().map(|c| (f(ctx, c), producer)).collect()
}

fn prompt_failure(e: PromptError) -> anyhow::Error {
    match e {
        PromptError::Backend { .. } | PromptError::Shortfall { .. } | PromptError::Parse(_) => {
            Failure::backend(e.to_string()).into()
        }
        other => other.into(),
    }
}

fn generation_failure(e: GenerationError) -> anyhow::Error {
    match e {
        GenerationError::MissingAdapter { class_id, regime } => Failure::dependency(format!(
            "no adapter registered for class {class_id} at {regime}; run `gensynth register-adapter` after training the LoRA"
        ))
        .into(),
        GenerationError::Shortfall { .. } => Failure::backend(e.to_string()).into(),
        other => other.into(),
    }
}

// ---- prepare ----

fn absolutize(mut ds: DetectionDataset, root: &Path) -> DetectionDataset {
    for r in &mut ds.records {
        r.uri = root.join(&r.uri).to_string_lossy().into_owned();
    }
    ds
}

fn source_paths(ctx: &Ctx) -> Result<((PathBuf, PathBuf), (PathBuf, PathBuf))> {
    let d = &ctx.cfg.data;
    let mock_data = ctx.cfg.is_mock("captioner") || ctx.cfg.is_mock("synthesizer");
    let resolve = |manifest: &Option<PathBuf>, root: &Option<PathBuf>, field: &str, fixture: &str| -> Result<(PathBuf, PathBuf)> {
        match manifest {
            Some(m) => {
                let root = root.clone().unwrap_or_else(|| m.parent().unwrap_or(Path::new(".")).to_path_buf());
                Ok((m.clone(), root.canonicalize().with_context(|| format!("data root {}", root.display()))?))
            }
            None if mock_data => {
                let dir = ctx.path("fixtures").join(fixture);
                let manifest = dir.join("manifest.json");
                if !manifest.exists() {
                    eprintln!("[prepare] writing mock {fixture} fixture to {}", dir.display());
                    match fixture {
                        "real" => fixtures::write_real(&dir, ctx.cfg.data_seed)?,
                        _ => fixtures::write_sim(&dir, ctx.cfg.data_seed)?,
                    };
                }
                Ok((manifest, dir))
            }
            None => Err(Failure::config(format!("config field `data.{field}` is required outside mock mode")).into()),
        }
    };
    Ok((
        resolve(&d.real_manifest, &d.real_root, "real_manifest", "real")?,
        resolve(&d.sim_manifest, &d.sim_root, "sim_manifest", "sim")?,
    ))
}

fn prepare(ctx: &Ctx) -> Result<()> {
    let ((real, real_root), (sim, sim_root)) = source_paths(ctx)?;
    let inputs = [(real.clone(), "prepare"), (sim.clone(), "prepare")];
    let part = (&real_root, &sim_root);
    ctx.stage("prepare", &inputs, &part, |run| {
        let real_ds = absolutize(read_dataset(&real, "prepare")?, &real_root);
        for (split, path) in [(Split::Train, real_train(ctx)), (Split::Val, val_manifest(ctx)), (Split::Test, test_manifest(ctx))] {
            let part = real_ds.split(split).with_split_counts();
            if part.is_empty() {
                bail!(Failure::dependency(format!("real manifest {} has no {split} records", real.display())));
            }
            run.write_dataset(path, part)?;
        }
        let sim_ds = absolutize(read_dataset(&sim, "prepare")?, &sim_root);
        run.write_dataset(sim_manifest(ctx), sim_ds)
    })?;
    Ok(())
}

// ---- caption ----

fn caption(ctx: &Ctx) -> Result<()> {
    let p = &ctx.cfg.prompts;
    let part = (ctx.regime, ctx.cfg.data_seed, ctx.cfg.backends.get("captioner"), &p.template_dir, &p.roles);
    let name = regime_stage(ctx, Stage::Caption);
    let mut inputs = vec![(real_train(ctx), "prepare")];
    inputs.extend(template_inputs(ctx));
    ctx.stage(&name, &inputs, &part, |run| {
        let train = read_dataset(&real_train(ctx), "prepare")?;
        let subset = select_subset(&train, ctx.regime.per_class(), ctx.cfg.data_seed).map_err(|e| Failure::dependency(e.to_string()))?;
        run.write_dataset(subset_path(ctx), subset.clone())?;
        let templates = templates(ctx)?;
        let captioner = ctx.text_backend("captioner")?;
        for class in ctx.taxonomy.classes() {
            let records: Vec<_> = subset.records_of_class(class.id).cloned().collect();
            let batch = caption_images(&records, &ctx.taxonomy, &templates, captioner.as_ref(), ctx.retry)
                .map_err(prompt_failure)?;
            if !batch.rejections.is_empty() {
                eprintln!("[{}] {}: {} image(s) without caption", run.name, class.name, batch.rejections.len());
            }
            run.write_json(caption_path(ctx, class), batch)?;
        }
        Ok(())
    })?;
    Ok(())
}

fn templates(ctx: &Ctx) -> Result<TemplateSet> {
    let set = match &ctx.cfg.prompts.template_dir {
        Some(dir) => TemplateSet::load_dir(dir)
            .map_err(|e| Failure::config(format!("config field `prompts.template_dir`: {e}")))?,
        None => TemplateSet::builtin(),
    };
    Ok(set.with_roles(&ctx.cfg.prompts.roles))
}

/// Template override files, so edits to them invalidate cached stages.
fn template_inputs(ctx: &Ctx) -> Vec<(PathBuf, &'static str)> {
    let Some(dir) = &ctx.cfg.prompts.template_dir else {
        return Vec::new();
    };
    TemplateRole::ALL
        .iter()
        .map(|r| dir.join(format!("{}.txt", r.as_str())))
        .filter(|p| p.exists())
        .map(|p| (p, "prompts"))
        .collect()
}

// ---- lora specs ----

fn lora_specs(ctx: &Ctx) -> Result<()> {
    let mock = ctx.cfg.is_mock("synthesizer");
    let part = (&ctx.cfg.generation.lora, mock);
    let name = regime_stage(ctx, Stage::LoraSpecs);
    ctx.stage(&name, &per_class(ctx, caption_path, "caption"), &part, |run| {
        let mut registry = LoraRegistry::default();
        for class in ctx.taxonomy.classes() {
            let batch: CaptionBatch = read_artifact(&caption_path(ctx, class), "caption")?;
            let spec = build_lora_spec(class.id, &batch.pairs, ctx.regime, &ctx.cfg.generation.lora, &ctx.taxonomy)
                .map_err(|e| match e {
                    GenerationError::RegimeMismatch { .. } if !batch.rejections.is_empty() => {
                        Failure::backend(format!("{}: {e}; {} caption(s) were rejected", class.name, batch.rejections.len())).into()
                    }
                    other => anyhow::Error::from(other),
                })?;
            if mock {
                // The mock synthesizer ignores adapter weights; any uri will do.
                let uri = format!("mock://lora/{}/{}", ctx.regime, class.slug());
                registry = registry.register(class.id, ctx.regime, &uri, spec.training_hash())?;
            }
            run.write_json(lora_spec_path(ctx, class), spec)?;
        }
        if mock {
            run.write_json(registry_path(ctx), registry)?;
        }
        Ok(())
    })?;
    Ok(())
}

/// Records a trained adapter for one class in the regime's registry.
pub fn register_adapter(ctx: &Ctx, class: &str, uri: &str) -> Result<()> {
    let c = ctx
        .taxonomy
        .by_name(class)
        .or_else(|| class.parse::<ClassId>().ok().and_then(|id| ctx.taxonomy.get(id)))
        .or_else(|| ctx.taxonomy.classes().iter().find(|c| c.slug() == class))
        .ok_or_else(|| Failure::config(format!("unknown class {class:?}")))?;
    let spec: LoraJobSpec = read_artifact(&lora_spec_path(ctx, c), "lora-specs")?;
    let path = registry_path(ctx);
    let registry: LoraRegistry = if path.exists() { read_artifact(&path, "lora-specs")? } else { LoraRegistry::default() };
    let registry = registry.register(c.id, ctx.regime, uri, spec.training_hash())?;
    let art = super::Artifact {
        stage: "register-adapter".to_string(),
        config_hash: ctx.config_hash.clone(),
        inputs: BTreeMap::new(),
        body: registry,
    };
    gensynth_core::artifact::write_json_atomic(&path, &art)?;
    eprintln!("registered {uri} for {} at {}", c.name, ctx.regime);
    Ok(())
}

// ---- prompts ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassPrompts {
    pub raw: PromptSet,
    /// Geometry phrases removed, for edge-conditioned synthesis. Prompts left
    /// empty by stripping are dropped.
    pub stripped: PromptSet,
    pub removed_clauses: usize,
    pub dropped: usize,
}

fn prompts(ctx: &Ctx) -> Result<()> {
    let part = (&ctx.cfg.prompts, ctx.cfg.backends.get("promptgen"));
    let mut inputs = per_class(ctx, caption_path, "caption");
    inputs.extend(template_inputs(ctx));
    if let Some(l) = &ctx.cfg.prompts.lexicon {
        inputs.push((l.clone(), "prompts"));
    }
    let name = regime_stage(ctx, Stage::Prompts);
    ctx.stage(&name, &inputs, &part, |run| {
        let templates = templates(ctx)?;
        let lexicon = match &ctx.cfg.prompts.lexicon {
            Some(p) => GeometryLexicon::parse(&fs::read_to_string(p).with_context(|| p.display().to_string())?),
            None => GeometryLexicon::default(),
        };
        let llm = ctx.text_backend("promptgen")?;
        let results: Vec<Result<ClassPrompts>> = ctx
            .taxonomy
            .classes()
            .par_iter()
            .map(|class| {
                let batch: CaptionBatch = read_artifact(&caption_path(ctx, class), "caption")?;
                let raw = generate_prompts(
                    class.id,
                    &batch.pairs,
                    ctx.cfg.prompts.batch,
                    &ctx.taxonomy,
                    &templates,
                    llm.as_ref(),
                    ctx.retry,
                )
                .map_err(prompt_failure)?;
                let mut removed = 0;
                let mut kept = Vec::new();
                for p in &raw.prompts {
                    let out = strip_geometry(p, &lexicon);
                    removed += out.removed_clauses.len();
                    if !out.empty_output && !out.text.trim().is_empty() {
                        kept.push(out.text);
                    }
                }
                if kept.is_empty() {
                    bail!("{}: every prompt was removed by geometry stripping", class.name);
                }
                let dropped = raw.prompts.len() - kept.len();
                Ok(ClassPrompts {
                    stripped: PromptSet {
                        prompts: kept,
                        ..raw.clone()
                    },
                    raw,
                    removed_clauses: removed,
                    dropped,
                })
            })
            .collect();
        for (class, r) in ctx.taxonomy.classes().iter().zip(results) {
            run.write_json(prompt_path(ctx, class), r?)?;
        }
        Ok(())
    })?;
    Ok(())
}

// ---- edges ----

fn edges(ctx: &Ctx) -> Result<()> {
    ctx.stage("edges", &[(sim_manifest(ctx), "prepare")], &ctx.cfg.edges, |run| {
        let sim = read_dataset(&sim_manifest(ctx), "prepare")?;
        let out_dir = ctx.path("guidance/edges");
        let set = build_guidance_pairs(&sim, &ctx.cfg.edges, &ctx.run_dir, &out_dir)?;
        if !set.errors.is_empty() {
            eprintln!("[edges] {} render(s) skipped, first: {}", set.errors.len(), set.errors[0].message);
        }
        for p in &set.pairs {
            run.output(PathBuf::from(&p.edge_map_uri));
        }
        run.write_json(pairs_path(ctx), set)
    })?;
    Ok(())
}

// ---- synthesize ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthesisArtifact {
    pub job: SynthesisJobSpec,
    pub batch: GeneratedBatch,
}

fn job_seed(ctx: &Ctx, variant: Provenance, class: &VehicleClass) -> u64 {
    stable_u64(&format!("{}/{}/{}/{}", variant.as_str(), ctx.regime, class.id, ctx.cfg.data_seed)) % 1_000_000
}

fn synthesize_stage(ctx: &Ctx) -> Result<()> {
    let mut inputs = per_class(ctx, prompt_path, "prompts");
    inputs.push((registry_path(ctx), "lora-specs` (mock mode) or `gensynth register-adapter"));
    inputs.push((pairs_path(ctx), "edges"));
    let part = (ctx.cfg.generation.images_per_class, ctx.cfg.data_seed, ctx.cfg.backends.get("synthesizer"));
    let name = regime_stage(ctx, Stage::Synthesize);
    ctx.stage(&name, &inputs, &part, |run| {
        let registry: LoraRegistry = read_artifact(&registry_path(ctx), "lora-specs")?;
        let guidance: GuidanceSet = read_artifact(&pairs_path(ctx), "edges")?;
        let backend = ctx.synthesizer()?;
        let n = ctx.cfg.generation.images_per_class;
        for class in ctx.taxonomy.classes() {
            let prompts: ClassPrompts = read_artifact(&prompt_path(ctx, class), "prompts")?;
            for variant in VARIANTS {
                let (set, pairs) = match variant {
                    Provenance::FluxCn => {
                        let pairs = guidance.of_class(class.id);
                        if pairs.is_empty() {
                            bail!(Failure::dependency(format!("no guidance pairs for {}; check the edges stage", class.name)));
                        }
                        (prompts.stripped.clone(), Some(pairs))
                    }
                    _ => (prompts.raw.clone(), None),
                };
                let job = SynthesisJobSpec::from_registry(&registry, ctx.regime, set, pairs, n, job_seed(ctx, variant, class))
                    .map_err(generation_failure)?;
                let batch = synthesize(&job, backend.as_ref(), &ctx.taxonomy, &ctx.run_dir, ctx.retry)
                    .map_err(generation_failure)?;
                for r in &batch.records {
                    run.output(PathBuf::from(&r.image_uri));
                }
                run.write_json(batch_path(ctx, variant, class), SynthesisArtifact { job, batch })?;
            }
        }
        Ok(())
    })?;
    Ok(())
}

// ---- label ----

fn label(ctx: &Ctx) -> Result<()> {
    let mut inputs = Vec::new();
    for v in VARIANTS {
        inputs.extend(per_class(ctx, move |c, cl| batch_path(c, v, cl), "synthesize"));
    }
    let part = (&ctx.cfg.labeling, ctx.cfg.backends.get("annotator"));
    let name = regime_stage(ctx, Stage::Label);
    ctx.stage(&name, &inputs, &part, |run| {
        let annotator = ctx.annotator()?;
        let mut report = BTreeMap::new();
        for variant in VARIANTS {
            let mut labeled = Vec::new();
            for class in ctx.taxonomy.classes() {
                let art: SynthesisArtifact = read_artifact(&batch_path(ctx, variant, class), "synthesize")?;
                let pairs = art.job.guidance.clone().unwrap_or_default();
                let labeler = match variant {
                    Provenance::FluxCn => Labeler::Transfer { pairs: &pairs },
                    _ => Labeler::OpenVocab {
                        backend: annotator.as_ref(),
                        query: &ctx.cfg.labeling,
                        retry: ctx.retry,
                    },
                };
                let out = label_batch(&art.batch, &labeler)?;
                run.write_json(labeled_path(ctx, variant, class), &out)?;
                labeled.push(out);
            }
            report.insert(variant.as_str(), rejection_report(&labeled));
        }
        run.write_json(ctx.path(format!("labeled/{}/rejections.json", ctx.regime)), report)
    })?;
    Ok(())
}

// ---- assemble ----

fn assemble_stage(ctx: &Ctx) -> Result<()> {
    let mut inputs = Vec::new();
    for v in VARIANTS {
        inputs.extend(per_class(ctx, move |c, cl| labeled_path(c, v, cl), "label"));
    }
    let name = regime_stage(ctx, Stage::Assemble);
    ctx.stage(&name, &inputs, &(), |run| {
        for variant in VARIANTS {
            let batches = ctx
                .taxonomy
                .classes()
                .iter()
                .map(|c| read_artifact::<LabeledBatch>(&labeled_path(ctx, variant, c), "label"))
                .collect::<Result<Vec<_>>>()?;
            let out = assemble(&batches, &ctx.taxonomy)?;
            eprintln!(
                "[{}] {}: {} records, {} rejected",
                run.name,
                variant.as_str(),
                out.dataset.len(),
                out.rejections.len()
            );
            run.write_dataset(dataset_path(ctx, variant), out.dataset)?;
            let rejected: Vec<RejectedImage> = out.rejections;
            run.write_json(ctx.path(format!("datasets/{}/{}.rejected.json", ctx.regime, variant.as_str())), rejected)?;
        }
        Ok(())
    })?;
    Ok(())
}

// ---- mix ----

fn source_manifest(ctx: &Ctx, source: &str) -> (PathBuf, &'static str) {
    match source {
        "real" => (subset_path(ctx), "caption"),
        "sim" => (sim_manifest(ctx), "prepare"),
        "flux" => (dataset_path(ctx, Provenance::Flux), "assemble"),
        _ => (dataset_path(ctx, Provenance::FluxCn), "assemble"),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MixSummary {
    name: String,
    sources: Vec<String>,
    sizes: Vec<usize>,
    factors: Vec<u64>,
    target_shares: Vec<f64>,
    effective_shares: Vec<f64>,
    warnings: Vec<String>,
    records: usize,
}

fn mix_stage(ctx: &Ctx) -> Result<()> {
    let mut needed: Vec<&str> = Vec::new();
    for m in &ctx.cfg.mixes {
        for s in &m.sources {
            if !needed.contains(&s.as_str()) {
                needed.push(s);
            }
        }
    }
    let inputs: Vec<(PathBuf, &str)> = needed.iter().map(|s| source_manifest(ctx, s)).collect();
    let part = (&ctx.cfg.mixes, ctx.cfg.data_seed);
    let name = regime_stage(ctx, Stage::Mix);
    ctx.stage(&name, &inputs, &part, |run| {
        let mut loaded: BTreeMap<&str, DetectionDataset> = BTreeMap::new();
        for s in &needed {
            let (path, producer) = source_manifest(ctx, s);
            loaded.insert(s, read_dataset(&path, producer)?);
        }
        let mut summaries = Vec::new();
        for m in &ctx.cfg.mixes {
            let sources = m.sources.iter().map(|s| (s.clone(), loaded[s.as_str()].clone())).collect::<Vec<_>>();
            let mut spec = MixSpec::balanced(sources, ctx.cfg.data_seed);
            if let Some(t) = &m.targets {
                for (src, &share) in spec.sources.iter_mut().zip(t) {
                    src.target_share = share;
                }
            }
            let mixed = mix(&spec)?;
            for w in &mixed.warnings {
                eprintln!("[{}] {}: {w}", run.name, m.name);
            }
            summaries.push(MixSummary {
                name: m.name.clone(),
                sources: m.sources.clone(),
                sizes: spec.sources.iter().map(|s: &MixSource| s.dataset.len()).collect(),
                factors: mixed.factors.clone(),
                target_shares: mixed.target_shares.clone(),
                effective_shares: mixed.effective_shares.clone(),
                warnings: mixed.warnings.clone(),
                records: mixed.records.len(),
            });
            let manifest = mixed.to_manifest().with_meta("regime", ctx.regime.as_str()).with_meta("mix.name", m.name.clone());
            run.write_dataset(mix_path(ctx, &m.name), manifest)?;
        }
        run.write_json(ctx.path(format!("mixes/{}/summary.json", ctx.regime)), summaries)
    })?;
    Ok(())
}

// ---- detector ----

fn run_id(ctx: &Ctx, mix: &str, seed: u64) -> String {
    format!("{}-{mix}-s{seed}", ctx.regime)
}

fn runs(ctx: &Ctx) -> Vec<(String, u64)> {
    ctx.cfg
        .mixes
        .iter()
        .flat_map(|m| ctx.cfg.seeds.iter().map(move |&s| (m.name.clone(), s)))
        .collect()
}

fn train_specs(ctx: &Ctx) -> Result<()> {
    let mut inputs: Vec<(PathBuf, &str)> = ctx.cfg.mixes.iter().map(|m| (mix_path(ctx, &m.name), "mix")).collect();
    inputs.push((val_manifest(ctx), "prepare"));
    inputs.push((test_manifest(ctx), "prepare"));
    let part = (&ctx.cfg.detector, &ctx.cfg.training, &ctx.cfg.seeds);
    let name = regime_stage(ctx, Stage::TrainSpecs);
    ctx.stage(&name, &inputs, &part, |run| {
        for (mix, seed) in runs(ctx) {
            let dir = run_dir(ctx, &mix, seed);
            let spec = build_detector_spec(
                DetectorInputs {
                    train: &mix_path(ctx, &mix),
                    val: &val_manifest(ctx),
                    test: &test_manifest(ctx),
                    output_dir: &dir.join("out"),
                },
                seed,
                &run_id(ctx, &mix, seed),
                &ctx.cfg.detector,
                ctx.cfg.training.checkpoint_metric,
                ctx.cfg.training.backend_defaults.clone(),
            )?;
            run.write_json(dir.join("spec.json"), spec)?;
        }
        Ok(())
    })?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainResult {
    pub run_id: String,
    pub history_uri: PathBuf,
    pub predictions_uri: PathBuf,
    pub selected: ValEntry,
}

fn train(ctx: &Ctx) -> Result<()> {
    let inputs: Vec<(PathBuf, &str)> = runs(ctx)
        .iter()
        .map(|(m, s)| (run_dir(ctx, m, *s).join("spec.json"), "train-specs"))
        .collect();
    let name = regime_stage(ctx, Stage::Train);
    ctx.stage(&name, &inputs, &ctx.cfg.backends.get("detector"), |run| {
        let backend = ctx.detector()?;
        let results: Vec<Result<TrainResult>> = runs(ctx)
            .par_iter()
            .map(|(m, s)| {
                let spec: DetectorJobSpec = read_artifact(&run_dir(ctx, m, *s).join("spec.json"), "train-specs")?;
                let out = backend
                    .train(&spec)
                    .map_err(|e| Failure::backend(format!("{}: {e}", spec.run_id)))?;
                let text = fs::read_to_string(&out.history_uri)
                    .map_err(|e| Failure::backend(format!("{}: {e}", out.history_uri.display())))?;
                let history = ValHistory::from_jsonl(&text)?;
                let selected = select_checkpoint(&history, spec.checkpoint_metric)?.clone();
                Ok(TrainResult {
                    run_id: spec.run_id,
                    history_uri: out.history_uri,
                    predictions_uri: out.predictions_uri,
                    selected,
                })
            })
            .collect();
        for ((m, s), r) in runs(ctx).into_iter().zip(results) {
            let r = r?;
            run.output(r.history_uri.clone());
            run.output(r.predictions_uri.clone());
            run.write_json(run_dir(ctx, &m, s).join("result.json"), r)?;
        }
        Ok(())
    })?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub run_id: String,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub predictions_uri: PathBuf,
    pub metrics: RunMetrics,
    pub report: MapReport,
}

fn evaluate_stage(ctx: &Ctx) -> Result<()> {
    let mut inputs: Vec<(PathBuf, &str)> = runs(ctx)
        .iter()
        .map(|(m, s)| (run_dir(ctx, m, *s).join("result.json"), "train"))
        .collect();
    inputs.push((test_manifest(ctx), "prepare"));
    let name = regime_stage(ctx, Stage::Evaluate);
    ctx.stage(&name, &inputs, &(), |run| {
        let test = read_dataset(&test_manifest(ctx), "prepare")?;
        let evals: Vec<Result<EvalArtifact>> = runs(ctx)
            .par_iter()
            .map(|(m, s)| {
                let result: TrainResult = read_artifact(&run_dir(ctx, m, *s).join("result.json"), "train")?;
                let text = fs::read_to_string(&result.predictions_uri)
                    .map_err(|e| Failure::dependency(format!("{}: {e}", result.predictions_uri.display())))?;
                let dets = read_detections_jsonl(&text)?;
                let report = evaluate(&test, &dets, &coco_thresholds())?;
                Ok(EvalArtifact {
                    run_id: result.run_id,
                    train_manifest: mix_path(ctx, m),
                    test_manifest: test_manifest(ctx),
                    predictions_uri: result.predictions_uri,
                    metrics: RunMetrics::from_report(m.clone(), Some(ctx.regime), *s, &report),
                    report,
                })
            })
            .collect();
        let mut lines = String::new();
        for ((m, s), e) in runs(ctx).into_iter().zip(evals) {
            let e = e?;
            lines.push_str(&serde_json::to_string(&e.metrics)?);
            lines.push('\n');
            run.write_json(eval_path(ctx, &m, s), e)?;
        }
        let path = runs_path(ctx);
        gensynth_core::artifact::write_atomic(&path, lines.as_bytes())?;
        run.output(path);
        Ok(())
    })?;
    Ok(())
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use gensynth_core::generation::{LoraHyperparams, Regime};
use gensynth_core::guidance::EdgeParams;
use gensynth_core::labeling::OpenVocabQuery;
use gensynth_core::prompting::TemplateRole;
use gensynth_core::trainer::{CheckpointMetric, DetectorHyperparams};
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

/// Names a mix may draw from.
pub const SOURCE_NAMES: [&str; 4] = ["real", "sim", "flux", "flux_cn"];

pub const ENDPOINT_ENV_PREFIX: &str = "GENSYNTH_";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Real-image manifest with train/val/test splits. Uris resolve against
    /// `real_root`, or the manifest's directory when unset.
    pub real_manifest: Option<PathBuf>,
    pub real_root: Option<PathBuf>,
    /// Rendered 3D-model images, one annotation each.
    pub sim_manifest: Option<PathBuf>,
    pub sim_root: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    /// `mock`, an `http(s)://` url, or `cmd:<program> [args]`.
    pub captioner: Option<String>,
    pub promptgen: Option<String>,
    pub synthesizer: Option<String>,
    pub annotator: Option<String>,
    pub detector: Option<String>,
    pub max_attempts: u32,
    pub timeout_secs: u64,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            captioner: None,
            promptgen: None,
            synthesizer: None,
            annotator: None,
            detector: None,
            max_attempts: 3,
            timeout_secs: 600,
        }
    }
}

pub const BACKEND_ROLES: [&str; 5] = ["captioner", "promptgen", "synthesizer", "annotator", "detector"];

impl BackendsConfig {
    fn slot(&mut self, role: &str) -> &mut Option<String> {
        match role {
            "captioner" => &mut self.captioner,
            "promptgen" => &mut self.promptgen,
            "synthesizer" => &mut self.synthesizer,
            "annotator" => &mut self.annotator,
            "detector" => &mut self.detector,
            _ => unreachable!("unknown backend role {role}"),
        }
    }

    pub fn get(&self, role: &str) -> Option<&str> {
        match role {
            "captioner" => self.captioner.as_deref(),
            "promptgen" => self.promptgen.as_deref(),
            "synthesizer" => self.synthesizer.as_deref(),
            "annotator" => self.annotator.as_deref(),
            "detector" => self.detector.as_deref(),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Prompts requested per class.
    pub batch: usize,
    /// Directory of `<role>.txt` files overriding the bundled templates.
    pub template_dir: Option<PathBuf>,
    /// Newline-delimited geometry phrases replacing the bundled lexicon.
    pub lexicon: Option<PathBuf>,
    /// Role reassignment, e.g. `caption_user = "promptgen_system"` makes
    /// captioning use the text stored under `promptgen_system`.
    pub roles: BTreeMap<TemplateRole, TemplateRole>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            batch: 150,
            template_dir: None,
            lexicon: None,
            roles: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub images_per_class: usize,
    pub lora: LoraHyperparams,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            images_per_class: 150,
            lora: LoraHyperparams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    pub name: String,
    pub sources: Vec<String>,
    /// Equal shares when absent.
    #[serde(default)]
    pub targets: Option<Vec<f64>>,
}

impl MixConfig {
    fn balanced(sources: &[&str]) -> Self {
        Self {
            name: sources.join("+"),
            sources: sources.iter().map(|s| s.to_string()).collect(),
            targets: None,
        }
    }
}

pub fn default_mixes() -> Vec<MixConfig> {
    [
        &["sim"][..],
        &["real"],
        &["flux"],
        &["flux_cn"],
        &["real", "sim"],
        &["real", "flux"],
        &["real", "flux_cn"],
        &["real", "flux", "sim"],
        &["real", "flux_cn", "sim"],
    ]
    .iter()
    .map(|s| MixConfig::balanced(s))
    .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub checkpoint_metric: CheckpointMetric,
    pub backend_defaults: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub regime: Regime,
    pub data: DataConfig,
    pub backends: BackendsConfig,
    pub prompts: PromptConfig,
    pub generation: GenerationConfig,
    pub labeling: OpenVocabQuery,
    pub edges: EdgeParams,
    pub mixes: Vec<MixConfig>,
    pub detector: DetectorHyperparams,
    pub training: TrainingConfig,
    pub seeds: Vec<u64>,
    /// Seed for picking the real-image subset and shuffling mixes.
    pub data_seed: u64,
    pub output_root: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            regime: Regime::R24,
            data: DataConfig::default(),
            backends: BackendsConfig::default(),
            prompts: PromptConfig::default(),
            generation: GenerationConfig::default(),
            labeling: OpenVocabQuery::default(),
            edges: EdgeParams::default(),
            mixes: default_mixes(),
            detector: DetectorHyperparams::default(),
            training: TrainingConfig::default(),
            seeds: vec![0, 1, 2],
            data_seed: 0,
            output_root: PathBuf::from("runs"),
        }
    }
}

/// Parses TOML, or JSON when the file ends in `.json`. Errors name the field
/// path.
pub fn parse_config(text: &str, json: bool) -> Result<PipelineConfig, Failure> {
    let tree: serde_json::Value = if json {
        serde_json::from_str(text).map_err(|e| Failure::config(format!("config: {e}")))?
    } else {
        toml::from_str(text).map_err(|e| Failure::config(format!("config: {e}")))?
    };
    serde_path_to_error::deserialize(tree).map_err(|e| {
        let path = e.path().to_string();
        Failure::config(format!("config field `{path}`: {}", e.into_inner()))
    })
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let json = path.extension().is_some_and(|e| e == "json");
    let mut cfg = parse_config(&text, json)?;
    // Relative data paths are relative to the config file.
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [
        &mut cfg.data.real_manifest,
        &mut cfg.data.real_root,
        &mut cfg.data.sim_manifest,
        &mut cfg.data.sim_root,
        &mut cfg.prompts.template_dir,
        &mut cfg.prompts.lexicon,
    ]
    .into_iter()
    .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

impl PipelineConfig {
    /// `GENSYNTH_<ROLE>_ENDPOINT` replaces the configured endpoint.
    pub fn apply_env(&mut self, vars: impl Fn(&str) -> Option<String>) {
        for role in BACKEND_ROLES {
            let key = format!("{ENDPOINT_ENV_PREFIX}{}_ENDPOINT", role.to_uppercase());
            if let Some(v) = vars(&key) {
                *self.backends.slot(role) = Some(v);
            }
        }
    }

    pub fn force_mock(&mut self) {
        for role in BACKEND_ROLES {
            *self.backends.slot(role) = Some("mock".into());
        }
    }

    pub fn is_mock(&self, role: &str) -> bool {
        self.backends.get(role) == Some("mock")
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let bad = |field: &str, msg: String| Err(Failure::config(format!("config field `{field}`: {msg}")));
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required".into());
        }
        for role in BACKEND_ROLES {
            if let Some(ep) = self.backends.get(role) {
                if let Err(msg) = crate::transport::Endpoint::parse(ep) {
                    return bad(&format!("backends.{role}"), msg);
                }
            }
        }
        if self.backends.max_attempts == 0 {
            return bad("backends.max_attempts", "must be at least 1".into());
        }
        if self.prompts.batch == 0 {
            return bad("prompts.batch", "must be at least 1".into());
        }
        if self.generation.images_per_class == 0 {
            return bad("generation.images_per_class", "must be at least 1".into());
        }
        if let Err(e) = self.edges.validate() {
            return bad("edges", e.to_string());
        }
        if let Err(e) = self.labeling.validate() {
            return bad("labeling", e.to_string());
        }
        if self.mixes.is_empty() {
            return bad("mixes", "at least one mix is required".into());
        }
        for (i, m) in self.mixes.iter().enumerate() {
            let field = format!("mixes[{i}]");
            if m.name.is_empty() || m.name.contains(['/', '\\']) {
                return bad(&format!("{field}.name"), format!("{:?} is not a usable name", m.name));
            }
            if self.mixes[..i].iter().any(|o| o.name == m.name) {
                return bad(&format!("{field}.name"), format!("duplicate mix {}", m.name));
            }
            if m.sources.is_empty() {
                return bad(&format!("{field}.sources"), "empty".into());
            }
            for s in &m.sources {
                if !SOURCE_NAMES.contains(&s.as_str()) {
                    return bad(&format!("{field}.sources"), format!("unknown source {s:?}, expected one of {SOURCE_NAMES:?}"));
                }
            }
            if let Some(t) = &m.targets {
                if t.len() != m.sources.len() {
                    return bad(&format!("{field}.targets"), format!("{} targets for {} sources", t.len(), m.sources.len()));
                }
                let sum: f64 = t.iter().sum();
                if t.iter().any(|v| !(*v > 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return bad(&format!("{field}.targets"), format!("must be positive and sum to 1, got {t:?}"));
                }
            }
        }
        let d = &self.detector;
        if d.input_resolution == 0 || d.epochs == 0 || d.batch_size == 0 || !(d.head_lr > 0.0 && d.backbone_lr > 0.0) {
            return bad("detector", "sizes and learning rates must be positive".into());
        }
        Ok(())
    }
}

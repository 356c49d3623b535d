//! Run-directory layout, artifact envelopes and content-hash stage caching.

mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use gensynth_core::artifact::{file_hash, json_hash, write_json_atomic};
use gensynth_core::backend::mock::{MockCaptioner, MockDetector, MockOpenVocab, MockPromptGenerator, MockSynthesizer};
use gensynth_core::backend::{DetectorBackend, ImageSynthesizer, OpenVocabDetector, RetryPolicy, TextBackend};
use gensynth_core::data::{load_dataset, save_dataset};
use gensynth_core::generation::Regime;
use gensynth_core::{DetectionDataset, Taxonomy};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use stages::{register_adapter, run_stage, Stage};

use crate::config::PipelineConfig;
use crate::failure::Failure;
use crate::transport::{Endpoint, JsonClient};

/// A JSON artifact with the stage that produced it and the config it was
/// produced under.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub stage: String,
    pub config_hash: String,
    /// Input files (relative to the run directory) and their hashes.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    pub body: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Stamp {
    stage: String,
    input_hash: String,
    config_hash: String,
    outputs: BTreeMap<String, String>,
}

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub config_hash: String,
    pub run_dir: PathBuf,
    pub regime: Regime,
    pub taxonomy: Taxonomy,
    pub retry: RetryPolicy,
    /// Ignore stage stamps and recompute.
    pub force: bool,
}

/// Inputs of one stage execution, collected while it runs.
pub struct StageRun<'a> {
    ctx: &'a Ctx,
    name: String,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig, run_dir: PathBuf, force: bool) -> Result<Self> {
        fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
        let run_dir = run_dir.canonicalize()?;
        Ok(Self {
            config_hash: json_hash(&cfg),
            regime: cfg.regime,
            retry: RetryPolicy {
                max_attempts: cfg.backends.max_attempts,
            },
            cfg,
            run_dir,
            taxonomy: Taxonomy::military_vehicles(),
            force,
        })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.run_dir.join(rel)
    }

    pub fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.run_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn stamp_path(&self, name: &str) -> PathBuf {
        self.path(".stages").join(format!("{name}.json"))
    }

    /// Runs `body` unless a stamp shows the same inputs already produced
    /// outputs that are still intact. `config_part` is the slice of the
    /// config the stage depends on. Returns whether the body ran.
    pub fn stage<C: Serialize>(
        &self,
        name: &str,
        inputs: &[(PathBuf, &str)],
        config_part: &C,
        body: impl FnOnce(&mut StageRun<'_>) -> Result<()>,
    ) -> Result<bool> {
        let mut hashes = BTreeMap::new();
        for (path, producer) in inputs {
            if !path.exists() {
                return Err(Failure::missing(path, producer).into());
            }
            hashes.insert(self.rel(path), file_hash(path)?);
        }
        let input_hash = json_hash(&(name, serde_json::to_value(config_part)?, &hashes));
        let stamp_path = self.stamp_path(name);
        if !self.force {
            if let Ok(text) = fs::read_to_string(&stamp_path) {
                if let Ok(stamp) = serde_json::from_str::<Stamp>(&text) {
                    if stamp.input_hash == input_hash && outputs_intact(self, &stamp.outputs) {
                        eprintln!("[{name}] inputs unchanged, skipped");
                        return Ok(false);
                    }
                }
            }
        }
        let mut run = StageRun {
            ctx: self,
            name: name.to_string(),
            inputs: hashes,
            outputs: Vec::new(),
        };
        body(&mut run)?;
        let mut outputs = BTreeMap::new();
        for p in &run.outputs {
            outputs.insert(self.rel(p), file_hash(p).with_context(|| format!("hashing {}", p.display()))?);
        }
        eprintln!("[{name}] wrote {} artifact(s)", outputs.len());
        write_json_atomic(
            &stamp_path,
            &Stamp {
                stage: name.to_string(),
                input_hash,
                config_hash: self.config_hash.clone(),
                outputs,
            },
        )?;
        Ok(true)
    }

    pub fn text_backend(&self, role: &str) -> Result<Box<dyn TextBackend>> {
        Ok(match self.endpoint(role)? {
            Endpoint::Mock if role == "promptgen" => Box::new(MockPromptGenerator::default()),
            Endpoint::Mock => Box::new(MockCaptioner),
            ep => Box::new(self.client(ep)),
        })
    }

    pub fn synthesizer(&self) -> Result<Box<dyn ImageSynthesizer>> {
        Ok(match self.endpoint("synthesizer")? {
            Endpoint::Mock => Box::new(MockSynthesizer::default()),
            ep => Box::new(self.client(ep)),
        })
    }

    pub fn annotator(&self) -> Result<Box<dyn OpenVocabDetector>> {
        Ok(match self.endpoint("annotator")? {
            Endpoint::Mock => Box::new(MockOpenVocab),
            ep => Box::new(self.client(ep)),
        })
    }

    pub fn detector(&self) -> Result<Box<dyn DetectorBackend>> {
        Ok(match self.endpoint("detector")? {
            Endpoint::Mock => Box::new(MockDetector),
            ep => Box::new(self.client(ep)),
        })
    }

    fn endpoint(&self, role: &str) -> Result<Endpoint, Failure> {
        let raw = self.cfg.backends.get(role).ok_or_else(|| {
            Failure::config(format!("config field `backends.{role}`: no endpoint configured (set it or pass --mock)"))
        })?;
        Endpoint::parse(raw).map_err(|m| Failure::config(format!("config field `backends.{role}`: {m}")))
    }

    fn client(&self, ep: Endpoint) -> JsonClient {
        JsonClient::new(ep, Duration::from_secs(self.cfg.backends.timeout_secs))
    }
}

fn outputs_intact(ctx: &Ctx, outputs: &BTreeMap<String, String>) -> bool {
    outputs
        .iter()
        .all(|(rel, hash)| file_hash(&ctx.path(rel)).is_ok_and(|h| &h == hash))
}

impl StageRun<'_> {
    /// Records a file written by other means (images, backend outputs).
    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    pub fn write_json<T: Serialize>(&mut self, path: PathBuf, body: T) -> Result<()> {
        let art = Artifact {
            stage: self.name.clone(),
            config_hash: self.ctx.config_hash.clone(),
            inputs: self.inputs.clone(),
            body,
        };
        write_json_atomic(&path, &art).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(path);
        Ok(())
    }

    /// Saves a validated manifest with stage and config hash in its meta.
    pub fn write_dataset(&mut self, path: PathBuf, dataset: DetectionDataset) -> Result<()> {
        let dataset = dataset
            .with_meta("stage", self.name.clone())
            .with_meta("config_hash", self.ctx.config_hash.clone());
        save_dataset(&dataset, &path).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(path);
        Ok(())
    }
}

pub fn read_artifact<T: DeserializeOwned>(path: &Path, producer: &str) -> Result<T> {
    if !path.exists() {
        return Err(Failure::missing(path, producer).into());
    }
    let text = fs::read_to_string(path)?;
    let art: Artifact<T> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(art.body)
}

pub fn read_dataset(path: &Path, producer: &str) -> Result<DetectionDataset> {
    if !path.exists() {
        return Err(Failure::missing(path, producer).into());
    }
    load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

/// The most recent run directory under `root`, by name.
pub fn latest_run(root: &Path) -> Option<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .ok()?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(".stages").is_dir())
        .map(|e| e.path())
        .collect();
    dirs.sort();
    dirs.pop()
}

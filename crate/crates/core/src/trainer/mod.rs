//! Detector fine-tuning job specs and checkpoint selection.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::json_hash;
use crate::data::{load_dataset, DataError};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("manifest {path}: {source}")]
    Manifest { path: PathBuf, source: DataError },
    #[error("invalid detector spec: {0}")]
    Invalid(String),
    #[error("validation history is empty")]
    EmptyHistory,
    #[error("history line {line}: {message}")]
    History { line: usize, message: String },
    #[error("epoch {epoch} has no {metric} value")]
    MissingMetric { epoch: u32, metric: &'static str },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorHyperparams {
    pub input_resolution: u32,
    pub epochs: u32,
    pub batch_size: u32,
    pub head_lr: f64,
    pub backbone_lr: f64,
}

impl Default for DetectorHyperparams {
    fn default() -> Self {
        Self {
            input_resolution: 960,
            epochs: 80,
            batch_size: 12,
            head_lr: 1.0e-5,
            backbone_lr: 3.0e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMetric {
    #[default]
    ValMap50,
    ValMap5095,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorJobSpec {
    pub run_id: String,
    pub seed: u64,
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    /// Split the backend writes predictions for.
    pub test_manifest: PathBuf,
    pub output_dir: PathBuf,
    #[serde(flatten)]
    pub hyper: DetectorHyperparams,
    pub checkpoint_metric: CheckpointMetric,
    /// Passed through untouched; everything the detector would otherwise
    /// take from its own defaults.
    #[serde(default)]
    pub backend_defaults: BTreeMap<String, serde_json::Value>,
}

impl DetectorJobSpec {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let h = &self.hyper;
        if h.input_resolution == 0 || h.epochs == 0 || h.batch_size == 0 {
            return Err(TrainerError::Invalid(
                "input_resolution, epochs and batch_size must be positive".into(),
            ));
        }
        if !(h.head_lr > 0.0 && h.backbone_lr > 0.0) {
            return Err(TrainerError::Invalid("learning rates must be positive".into()));
        }
        if self.run_id.is_empty() {
            return Err(TrainerError::Invalid("run_id is empty".into()));
        }
        Ok(())
    }

    pub fn spec_hash(&self) -> String {
        json_hash(self)
    }
}

pub struct DetectorInputs<'a> {
    pub train: &'a Path,
    pub val: &'a Path,
    pub test: &'a Path,
    pub output_dir: &'a Path,
}

/// Loads and validates the three manifests before emitting the spec.
pub fn build_detector_spec(
    inputs: DetectorInputs<'_>,
    seed: u64,
    run_id: &str,
    hyper: &DetectorHyperparams,
    checkpoint_metric: CheckpointMetric,
    backend_defaults: BTreeMap<String, serde_json::Value>,
) -> Result<DetectorJobSpec, TrainerError> {
    for path in [inputs.train, inputs.val, inputs.test] {
        load_dataset(path).map_err(|source| TrainerError::Manifest {
            path: path.to_path_buf(),
            source,
        })?;
    }
    let spec = DetectorJobSpec {
        run_id: run_id.to_string(),
        seed,
        train_manifest: inputs.train.to_path_buf(),
        val_manifest: inputs.val.to_path_buf(),
        test_manifest: inputs.test.to_path_buf(),
        output_dir: inputs.output_dir.to_path_buf(),
        hyper: hyper.clone(),
        checkpoint_metric,
        backend_defaults,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValEntry {
    pub epoch: u32,
    pub val_map50: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_map5095: Option<f64>,
    pub checkpoint_uri: String,
}

impl ValEntry {
    fn metric(&self, metric: CheckpointMetric) -> Result<f64, TrainerError> {
        match metric {
            CheckpointMetric::ValMap50 => Ok(self.val_map50),
            CheckpointMetric::ValMap5095 => self.val_map5095.ok_or(TrainerError::MissingMetric {
                epoch: self.epoch,
                metric: "val_map5095",
            }),
        }
    }
}

/// Per-epoch validation scores, epochs strictly increasing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValHistory {
    entries: Vec<ValEntry>,
}

impl ValHistory {
    pub fn new(entries: Vec<ValEntry>) -> Result<Self, TrainerError> {
        for (i, e) in entries.iter().enumerate() {
            let line = i + 1;
            if i > 0 && e.epoch <= entries[i - 1].epoch {
                return Err(TrainerError::History {
                    line,
                    message: format!("epoch {} does not follow {}", e.epoch, entries[i - 1].epoch),
                });
            }
            let in_unit = |v: f64| (0.0..=1.0).contains(&v);
            if !in_unit(e.val_map50) || !e.val_map5095.is_none_or(in_unit) {
                return Err(TrainerError::History {
                    line,
                    message: format!("epoch {}: metric outside [0, 1]", e.epoch),
                });
            }
        }
        Ok(Self { entries })
    }

    /// One JSON object per line; blank lines are skipped.
    pub fn from_jsonl(text: &str) -> Result<Self, TrainerError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line).map_err(|e| TrainerError::History {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[ValEntry] {
        &self.entries
    }

    pub fn push(&mut self, entry: ValEntry) -> Result<(), TrainerError> {
        let mut entries = std::mem::take(&mut self.entries);
        entries.push(entry);
        *self = Self::new(entries)?;
        Ok(())
    }
}

/// Entry with the highest `metric`; the earliest epoch wins ties.
pub fn select_checkpoint(history: &ValHistory, metric: CheckpointMetric) -> Result<&ValEntry, TrainerError> {
    let mut best: Option<(&ValEntry, f64)> = None;
    for e in history.entries() {
        let v = e.metric(metric)?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((e, v));
        }
    }
    best.map(|(e, _)| e).ok_or(TrainerError::EmptyHistory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn history(points: &[(u32, f64)]) -> ValHistory {
        ValHistory::new(
            points
                .iter()
                .map(|&(epoch, v)| ValEntry {
                    epoch,
                    val_map50: v,
                    val_map5095: Some(v / 2.0),
                    checkpoint_uri: format!("ckpt/{epoch}"),
                })
                .collect(),
        )
        .unwrap()
    }

    fn pick(points: &[(u32, f64)]) -> u32 {
        select_checkpoint(&history(points), CheckpointMetric::ValMap50).unwrap().epoch
    }

    #[test]
    fn argmax_and_ties() {
        assert_eq!(pick(&[(1, 0.3), (2, 0.5), (3, 0.4)]), 2);
        assert_eq!(pick(&[(1, 0.5), (2, 0.5)]), 1);
        assert_eq!(pick(&[(4, 0.1)]), 4);
        assert!(matches!(
            select_checkpoint(&ValHistory::default(), CheckpointMetric::ValMap50),
            Err(TrainerError::EmptyHistory)
        ));
    }

    #[test]
    fn alternate_metric() {
        let mut h = history(&[(1, 0.6), (2, 0.5)]);
        h.push(ValEntry { epoch: 3, val_map50: 0.4, val_map5095: Some(0.35), checkpoint_uri: "c".into() }).unwrap();
        assert_eq!(select_checkpoint(&h, CheckpointMetric::ValMap5095).unwrap().epoch, 3);
    }

    #[test]
    fn history_invariants() {
        assert!(ValHistory::from_jsonl("{\"epoch\":2,\"val_map50\":0.1,\"checkpoint_uri\":\"a\"}\n{\"epoch\":2,\"val_map50\":0.2,\"checkpoint_uri\":\"b\"}").is_err());
        assert!(ValHistory::from_jsonl("{\"epoch\":1,\"val_map50\":1.2,\"checkpoint_uri\":\"a\"}").is_err());
        let h = ValHistory::from_jsonl("{\"epoch\":1,\"val_map50\":0.2,\"checkpoint_uri\":\"a\"}\n\n").unwrap();
        assert_eq!(h.entries().len(), 1);
        assert!(matches!(ValHistory::from_jsonl("not json"), Err(TrainerError::History { line: 1, .. })));
    }

    fn spec() -> DetectorJobSpec {
        DetectorJobSpec {
            run_id: "real_r8_s0".into(),
            seed: 0,
            train_manifest: "train.json".into(),
            val_manifest: "val.json".into(),
            test_manifest: "test.json".into(),
            output_dir: "out".into(),
            hyper: DetectorHyperparams::default(),
            checkpoint_metric: CheckpointMetric::default(),
            backend_defaults: BTreeMap::new(),
        }
    }

    #[test]
    fn defaults_and_overrides() {
        let s = spec();
        assert_eq!(s.hyper.head_lr, 1.0e-5);
        assert_eq!(s.hyper.backbone_lr, 3.0e-5);
        let h: DetectorHyperparams = serde_json::from_str(r#"{"epochs": 1}"#).unwrap();
        assert_eq!(h, DetectorHyperparams { epochs: 1, ..DetectorHyperparams::default() });
        let bad = DetectorJobSpec { hyper: DetectorHyperparams { epochs: 0, ..h }, ..s };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn spec_round_trip_and_hash() {
        let mut s = spec();
        s.backend_defaults.insert("amp".into(), serde_json::json!(true));
        let text = serde_json::to_string(&s).unwrap();
        let back: DetectorJobSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.spec_hash(), s.spec_hash());
        assert_ne!(spec().spec_hash(), s.spec_hash());
    }

    #[test]
    fn invalid_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{}").unwrap();
        let err = build_detector_spec(
            DetectorInputs { train: &bad, val: &bad, test: &bad, output_dir: dir.path() },
            0,
            "r",
            &DetectorHyperparams::default(),
            CheckpointMetric::ValMap50,
            BTreeMap::new(),
        )
        .unwrap_err();
        assert!(matches!(err, TrainerError::Manifest { .. }));
    }

    proptest! {
        #[test]
        fn selection_ignores_lower_appends(
            vals in prop::collection::vec(0.0f64..=1.0, 1..30),
            lower in prop::collection::vec(0.0f64..=1.0, 0..10),
        ) {
            let points: Vec<(u32, f64)> = vals.iter().enumerate().map(|(i, &v)| (i as u32 + 1, v)).collect();
            let h = history(&points);
            let best = select_checkpoint(&h, CheckpointMetric::ValMap50).unwrap().clone();
            let mut extended = h.clone();
            for (j, l) in lower.iter().enumerate() {
                let v = l * best.val_map50 * 0.999;
                if v < best.val_map50 {
                    extended.push(ValEntry {
                        epoch: points.len() as u32 + 1 + j as u32,
                        val_map50: v,
                        val_map5095: None,
                        checkpoint_uri: String::new(),
                    }).unwrap();
                }
            }
            prop_assert_eq!(select_checkpoint(&extended, CheckpointMetric::ValMap50).unwrap(), &best);
        }
    }
}

//! Deterministic in-process backends for tests and GPU-free pipeline runs.
//!
//! The image synthesizer draws a filled rectangle on a flat background and
//! the open-vocabulary detector finds that rectangle again, so boxes further
//! down the pipeline are known analytically.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    BackendError, DetectorBackend, DetectorRunOutput, ImageSynthesizer, OpenVocabDetector, OpenVocabRequest,
    OpenVocabResponse, RawDetection, SynthesisRequest, SynthesisResponse, TextBackend, TextRequest, TextResponse,
};
use crate::artifact::stable_u64;
use crate::data::{load_dataset, DetectionDataset, Provenance};
use crate::metrics::{write_detections_jsonl, Detection};
use crate::trainer::DetectorJobSpec;
use crate::BoundingBox;

const SCENES: [&str; 6] = [
    "on a muddy forest track",
    "in a snowy field",
    "on a dusty desert road",
    "beside a ruined building",
    "in tall summer grass",
    "on a paved convoy route",
];
const LIGHTING: [&str; 4] = ["under an overcast sky", "at dusk", "in harsh midday sun", "in light rain"];
const GEOMETRY: [&str; 6] = [
    "seen in a front three-quarter view",
    "shown in rear profile",
    "from an elevated view",
    "captured at medium tactical distance",
    "in a side profile",
    "as an extreme close-up",
];

fn pick<'a>(items: &[&'a str], key: u64, salt: u64) -> &'a str {
    items[((key ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)) % items.len() as u64) as usize]
}

/// Two-sentence captions keyed by the image uri.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockCaptioner;

impl TextBackend for MockCaptioner {
    fn complete(&self, request: &TextRequest) -> Result<TextResponse, BackendError> {
        let uri = request
            .image_uri
            .as_deref()
            .ok_or_else(|| BackendError::Malformed("caption request without image_uri".into()))?;
        let vehicle = request.vehicle_name.as_deref().unwrap_or("military vehicle");
        let key = stable_u64(uri);
        Ok(TextResponse::single(
            format!(
                "A {vehicle} stands {} {}. The vehicle is {}.",
                pick(&SCENES, key, 1),
                pick(&LIGHTING, key, 2),
                pick(&GEOMETRY, key, 3)
            ),
            "mock-captioner",
        ))
    }
}

/// Returns `count - shortfall` prompts, each with a viewpoint clause so that
/// geometry stripping has something to remove.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockPromptGenerator {
    pub shortfall: usize,
}

impl TextBackend for MockPromptGenerator {
    fn complete(&self, request: &TextRequest) -> Result<TextResponse, BackendError> {
        let count = request
            .count
            .ok_or_else(|| BackendError::Malformed("prompt request without count".into()))?;
        let vehicle = request.vehicle_name.as_deref().unwrap_or("military vehicle");
        let prompts = (0..count.saturating_sub(self.shortfall))
            .map(|i| {
                let i = i as u64;
                format!(
                    "A {vehicle} {}, {}, {}.",
                    pick(&SCENES, i, 11),
                    pick(&GEOMETRY, i, 12),
                    pick(&LIGHTING, i, 13)
                )
            })
            .collect();
        Ok(TextResponse::list(prompts, "mock-promptgen"))
    }
}

/// Renders a flat background with one filled rectangle.
///
/// With an edge map the rectangle covers the edge pixels' bounding box and
/// the canvas takes the edge map's size; without one, a centered rectangle
/// on a `canvas`×`canvas` image.
#[derive(Clone, Copy, Debug)]
pub struct MockSynthesizer {
    pub canvas: u32,
}

impl Default for MockSynthesizer {
    fn default() -> Self {
        Self { canvas: 96 }
    }
}

fn nonzero_extent(width: u32, height: u32, set: impl Fn(u32, u32) -> bool) -> Option<[u32; 4]> {
    let mut ext: Option<[u32; 4]> = None;
    for y in 0..height {
        for x in 0..width {
            if set(x, y) {
                ext = Some(match ext {
                    None => [x, y, x + 1, y + 1],
                    Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)],
                });
            }
        }
    }
    ext
}

impl ImageSynthesizer for MockSynthesizer {
    fn synthesize(&self, request: &SynthesisRequest) -> Result<SynthesisResponse, BackendError> {
        let out = request
            .output_uri
            .as_deref()
            .ok_or_else(|| BackendError::Malformed("mock synthesizer needs output_uri".into()))?;
        let (width, height, rect) = match &request.edge_map_uri {
            Some(edge_uri) => {
                let edges = image::open(edge_uri)
                    .map_err(|e| BackendError::Failed(format!("{edge_uri}: {e}")))?
                    .to_luma8();
                let (w, h) = edges.dimensions();
                let rect = nonzero_extent(w, h, |x, y| edges.get_pixel(x, y).0[0] > 0)
                    .unwrap_or([w / 4, h / 4, w - w / 4, h - h / 4]);
                (w, h, rect)
            }
            None => {
                let c = self.canvas;
                (c, c, [c / 4, c / 4, c - c / 4, c - c / 4])
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
        let bg = Rgb([rng.random_range(0..100u8), rng.random_range(0..100u8), rng.random_range(0..100u8)]);
        let fg = Rgb([rng.random_range(150..=255u8), rng.random_range(150..=255u8), rng.random_range(150..=255u8)]);
        let [x0, y0, x1, y1] = rect;
        let img: RgbImage = ImageBuffer::from_fn(width, height, |x, y| {
            if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
                fg
            } else {
                bg
            }
        });
        if let Some(dir) = Path::new(out).parent() {
            fs::create_dir_all(dir).map_err(|e| BackendError::Failed(e.to_string()))?;
        }
        img.save(out).map_err(|e| BackendError::Failed(format!("{out}: {e}")))?;
        Ok(SynthesisResponse {
            image_uri: out.to_string(),
            width: Some(width),
            height: Some(height),
        })
    }
}

/// Boxes the region whose pixels differ from the top-left pixel, at
/// confidence 0.9, followed by a whole-image box at 0.3.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockOpenVocab;

impl OpenVocabDetector for MockOpenVocab {
    fn detect(&self, request: &OpenVocabRequest) -> Result<OpenVocabResponse, BackendError> {
        let img = image::open(&request.image_uri)
            .map_err(|e| BackendError::Failed(format!("{}: {e}", request.image_uri)))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        if w == 0 || h == 0 {
            return Ok(OpenVocabResponse::default());
        }
        let bg = *img.get_pixel(0, 0);
        let Some([x0, y0, x1, y1]) = nonzero_extent(w, h, |x, y| *img.get_pixel(x, y) != bg) else {
            return Ok(OpenVocabResponse::default());
        };
        let label = Some("vehicle".to_string());
        Ok(OpenVocabResponse {
            detections: vec![
                RawDetection {
                    bbox: [x0 as f64, y0 as f64, x1 as f64, y1 as f64],
                    confidence: 0.9,
                    label: label.clone(),
                },
                RawDetection {
                    bbox: [0.0, 0.0, w as f64, h as f64],
                    confidence: 0.3,
                    label,
                },
            ],
        })
    }
}

/// Fakes a detector run. Test-split quality grows with the number of distinct
/// real training images per class and with each synthetic source present;
/// seeds add run-to-run noise.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockDetector;

fn training_quality(train: &DetectionDataset) -> f64 {
    let mut real = BTreeSet::new();
    let mut sources = BTreeSet::new();
    for r in &train.records {
        sources.insert(r.source);
        if r.source == Provenance::Real {
            real.insert(r.uri.as_str());
        }
    }
    let classes = train.taxonomy.len().max(1) as f64;
    let real_per_class = real.len() as f64 / classes;
    let mut q = 0.15 + 0.6 * (1.0 - (-real_per_class / 9.0).exp());
    if sources.contains(&Provenance::Flux) {
        q += 0.12;
    }
    if sources.contains(&Provenance::FluxCn) {
        q += 0.15;
    }
    if sources.contains(&Provenance::Sim3d) {
        q += 0.1;
    }
    q.clamp(0.05, 0.95)
}

fn jitter(b: &BoundingBox, spread: f64, rng: &mut ChaCha8Rng) -> [f64; 4] {
    let (w, h) = (b.width(), b.height());
    let mut d = || rng.random_range(-spread..=spread);
    let x0 = b.x_min + d() * w;
    let y0 = b.y_min + d() * h;
    let x1 = (b.x_max + d() * w).max(x0 + 1.0);
    let y1 = (b.y_max + d() * h).max(y0 + 1.0);
    [x0, y0, x1, y1]
}

impl DetectorBackend for MockDetector {
    fn train(&self, spec: &DetectorJobSpec) -> Result<DetectorRunOutput, BackendError> {
        let load = |p: &Path| load_dataset(p).map_err(|e| BackendError::Failed(e.to_string()));
        let train = load(&spec.train_manifest)?;
        let test = load(&spec.test_manifest)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stable_u64(&format!("{}:{}", spec.run_id, spec.seed)));
        let q = (training_quality(&train) + rng.random_range(-0.03..0.03)).clamp(0.02, 0.98);

        fs::create_dir_all(&spec.output_dir).map_err(|e| BackendError::Failed(e.to_string()))?;
        let history_uri = spec.output_dir.join("history.jsonl");
        let mut history = Vec::new();
        for epoch in 1..=spec.hyper.epochs {
            let progress = 1.0 - (-(epoch as f64) / 8.0).exp();
            let v = (q * progress + rng.random_range(-0.01..0.01)).clamp(0.0, 1.0);
            let line = serde_json::json!({
                "epoch": epoch,
                "val_map50": v,
                "val_map5095": v * 0.9,
                "checkpoint_uri": format!("checkpoints/epoch_{epoch:03}.pth"),
            });
            writeln!(history, "{line}").expect("writing to a Vec cannot fail");
        }
        crate::artifact::write_atomic(&history_uri, &history).map_err(|e| BackendError::Failed(e.to_string()))?;

        let classes: Vec<u32> = test.taxonomy.ids().collect();
        let spread = 0.25 * (1.0 - q) + 0.01;
        let mut detections = Vec::new();
        for record in &test.records {
            for ann in &record.annotations {
                if rng.random_bool(q) {
                    let class_id = if rng.random_bool((q + 0.1).min(1.0)) {
                        ann.class_id
                    } else {
                        classes[rng.random_range(0..classes.len())]
                    };
                    let [x0, y0, x1, y1] = jitter(&ann.bbox, spread, &mut rng);
                    detections.push(Detection {
                        image_id: record.image_id,
                        bbox: BoundingBox::new(x0, y0, x1, y1),
                        class_id,
                        confidence: rng.random_range(0.4..1.0) * (0.5 + q / 2.0),
                    });
                }
            }
            if rng.random_bool(1.0 - q) {
                let (w, h) = (record.width as f64, record.height as f64);
                let x0 = rng.random_range(0.0..w * 0.5);
                let y0 = rng.random_range(0.0..h * 0.5);
                detections.push(Detection {
                    image_id: record.image_id,
                    bbox: BoundingBox::new(x0, y0, x0 + w * 0.3, y0 + h * 0.3),
                    class_id: classes[rng.random_range(0..classes.len())],
                    confidence: rng.random_range(0.0..0.5),
                });
            }
        }
        let predictions_uri = spec.output_dir.join("predictions.jsonl");
        write_detections_jsonl(&predictions_uri, &detections).map_err(|e| BackendError::Failed(e.to_string()))?;
        Ok(DetectorRunOutput {
            history_uri,
            predictions_uri,
        })
    }
}

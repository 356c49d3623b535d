//! Foreground edge maps from rendered 3D-model images, packaged with the
//! render's box and pose metadata as conditioning inputs.

mod canny;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Annotation, ClassId, DetectionDataset, ImageId, ImageRecord};

/// Record attributes copied into a pair's pose metadata.
pub const POSE_KEYS: [&str; 5] = ["viewpoint", "distance", "yaw", "pitch", "roll"];

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("edge parameters: {0}")]
    Config(String),
    #[error("degenerate image {width}x{height}")]
    Dimension { width: u32, height: u32 },
    #[error("record {image_id}: {detail}")]
    Validation { image_id: ImageId, detail: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    AlphaChannel,
    ChromaKey,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeParams {
    pub gaussian_sigma: f64,
    /// Sobel magnitude on the 0-255 intensity scale.
    pub low_threshold: f64,
    pub high_threshold: f64,
    pub foreground_mask_source: MaskSource,
    /// Background colour for [`MaskSource::ChromaKey`].
    pub chroma_key: [u8; 3],
    /// Largest per-channel difference still counted as background.
    pub chroma_tolerance: u8,
}

impl Default for EdgeParams {
    fn default() -> Self {
        Self {
            gaussian_sigma: 1.4,
            low_threshold: 50.0,
            high_threshold: 150.0,
            foreground_mask_source: MaskSource::AlphaChannel,
            chroma_key: [0, 255, 0],
            chroma_tolerance: 32,
        }
    }
}

impl EdgeParams {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        if !(self.gaussian_sigma > 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(GuidanceError::Config(format!(
                "gaussian_sigma must be positive, got {}",
                self.gaussian_sigma
            )));
        }
        if !(0.0 < self.low_threshold && self.low_threshold < self.high_threshold) {
            return Err(GuidanceError::Config(format!(
                "need 0 < low_threshold < high_threshold, got {} and {}",
                self.low_threshold, self.high_threshold
            )));
        }
        Ok(())
    }
}

/// Binary edge image; every pixel is 0 or 255.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMap {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
    pub source_image_id: ImageId,
}

impl EdgeMap {
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn edge_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    /// Thresholds at `level`: values at or above become 255, the rest 0.
    pub fn binarized(&self, level: u8) -> EdgeMap {
        EdgeMap {
            pixels: self.pixels.iter().map(|&p| if p >= level { 255 } else { 0 }).collect(),
            ..self.clone()
        }
    }

    pub fn file_name(source_image_id: ImageId) -> String {
        format!("{source_image_id}_edges.png")
    }

    pub fn save(&self, path: &Path) -> Result<(), GuidanceError> {
        let img = GrayImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("pixel buffer matches dimensions");
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .and_then(|_| crate::artifact::write_atomic(path, &bytes).map_err(image::ImageError::IoError))
            .map_err(|e| GuidanceError::Io {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    pub fn load(path: &Path, source_image_id: ImageId) -> Result<EdgeMap, GuidanceError> {
        let img = image::open(path)
            .map_err(|e| GuidanceError::Io {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_luma8();
        Ok(EdgeMap {
            width: img.width(),
            height: img.height(),
            pixels: img.into_raw(),
            source_image_id,
        })
    }
}

fn foreground_mask(render: &DynamicImage, params: &EdgeParams) -> Result<Option<Vec<bool>>, GuidanceError> {
    match params.foreground_mask_source {
        MaskSource::None => Ok(None),
        MaskSource::AlphaChannel => {
            if !render.color().has_alpha() {
                return Err(GuidanceError::Config(
                    "foreground_mask_source is alpha_channel but the render has no alpha plane".into(),
                ));
            }
            Ok(Some(render.to_rgba8().pixels().map(|p| p.0[3] > 0).collect()))
        }
        MaskSource::ChromaKey => {
            let key = params.chroma_key;
            let tol = params.chroma_tolerance;
            Ok(Some(
                render
                    .to_rgb8()
                    .pixels()
                    .map(|p| (0..3).any(|c| p.0[c].abs_diff(key[c]) > tol))
                    .collect(),
            ))
        }
    }
}

fn dilate(mask: &[bool], width: usize, height: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            if !mask[y * width + x] {
                continue;
            }
            for ny in y.saturating_sub(1)..=(y + 1).min(height - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(width - 1) {
                    out[ny * width + nx] = true;
                }
            }
        }
    }
    out
}

/// Canny edges of `render`, with everything outside the 1-px dilated
/// foreground mask zeroed when a mask source is configured.
pub fn extract_edges(
    render: &DynamicImage,
    params: &EdgeParams,
    source_image_id: ImageId,
) -> Result<EdgeMap, GuidanceError> {
    params.validate()?;
    let (width, height) = (render.width(), render.height());
    if width == 0 || height == 0 {
        return Err(GuidanceError::Dimension { width, height });
    }
    let mask = foreground_mask(render, params)?;
    let gray = canny::Plane {
        width: width as usize,
        height: height as usize,
        data: render
            .to_rgb8()
            .pixels()
            .map(|p| 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64)
            .collect(),
    };
    let mut edges = canny::canny(&gray, params.gaussian_sigma, params.low_threshold, params.high_threshold);
    if let Some(mask) = mask {
        let keep = dilate(&mask, width as usize, height as usize);
        edges.iter_mut().zip(keep).for_each(|(e, k)| *e &= k);
    }
    Ok(EdgeMap {
        width,
        height,
        pixels: edges.into_iter().map(|e| if e { 255 } else { 0 }).collect(),
        source_image_id,
    })
}

/// Edge map on disk plus the render's annotation and pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidancePair {
    pub source_image_id: ImageId,
    pub edge_map_uri: String,
    pub width: u32,
    pub height: u32,
    pub source_annotation: Annotation,
    pub class_id: ClassId,
    #[serde(default)]
    pub pose_meta: BTreeMap<String, String>,
}

impl GuidancePair {
    pub fn load_edge_map(&self) -> Result<EdgeMap, GuidanceError> {
        EdgeMap::load(Path::new(&self.edge_map_uri), self.source_image_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRecordError {
    pub image_id: ImageId,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSet {
    pub pairs: Vec<GuidancePair>,
    #[serde(default)]
    pub errors: Vec<GuidanceRecordError>,
}

impl GuidanceSet {
    pub fn of_class(&self, class_id: ClassId) -> Vec<GuidancePair> {
        self.pairs.iter().filter(|p| p.class_id == class_id).cloned().collect()
    }
}

fn single_annotation(record: &ImageRecord) -> Result<&Annotation, GuidanceError> {
    match record.annotations.as_slice() {
        [a] => Ok(a),
        anns => Err(GuidanceError::Validation {
            image_id: record.image_id,
            detail: format!("expected exactly one annotation, found {}", anns.len()),
        }),
    }
}

fn pair_for(
    record: &ImageRecord,
    annotation: &Annotation,
    params: &EdgeParams,
    render_root: &Path,
    out_dir: &Path,
) -> Result<GuidancePair, String> {
    let render_path = render_root.join(&record.uri);
    let render = image::open(&render_path).map_err(|e| format!("{}: {e}", render_path.display()))?;
    if (render.width(), render.height()) != (record.width, record.height) {
        return Err(format!(
            "render is {}x{}, record says {}x{}",
            render.width(),
            render.height(),
            record.width,
            record.height
        ));
    }
    let edges = extract_edges(&render, params, record.image_id).map_err(|e| e.to_string())?;
    let path = out_dir.join(EdgeMap::file_name(record.image_id));
    edges.save(&path).map_err(|e| e.to_string())?;
    let pose_meta = POSE_KEYS
        .iter()
        .filter_map(|k| record.attributes.get(*k).map(|v| (k.to_string(), v.clone())))
        .collect();
    Ok(GuidancePair {
        source_image_id: record.image_id,
        edge_map_uri: path.to_string_lossy().into_owned(),
        width: edges.width,
        height: edges.height,
        source_annotation: annotation.clone(),
        class_id: annotation.class_id,
        pose_meta,
    })
}

/// One pair per simulation record, ordered by image id. Edge maps are written
/// to `out_dir` as `<image_id>_edges.png`; render uris resolve against
/// `render_root`.
///
/// A record without exactly one annotation fails the whole call; an
/// unreadable render only produces an entry in [`GuidanceSet::errors`].
pub fn build_guidance_pairs(
    sim: &DetectionDataset,
    params: &EdgeParams,
    render_root: &Path,
    out_dir: &Path,
) -> Result<GuidanceSet, GuidanceError> {
    params.validate()?;
    let mut records: Vec<(&ImageRecord, &Annotation)> = sim
        .records
        .iter()
        .map(|r| single_annotation(r).map(|a| (r, a)))
        .collect::<Result<_, _>>()?;
    records.sort_by_key(|(r, _)| r.image_id);

    let results: Vec<Result<GuidancePair, GuidanceRecordError>> = records
        .par_iter()
        .map(|(record, ann)| {
            pair_for(record, ann, params, render_root, out_dir).map_err(|message| GuidanceRecordError {
                image_id: record.image_id,
                message,
            })
        })
        .collect();
    let mut set = GuidanceSet::default();
    for r in results {
        match r {
            Ok(p) => set.pairs.push(p),
            Err(e) => set.errors.push(e),
        }
    }
    Ok(set)
}

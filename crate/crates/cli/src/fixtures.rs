//! Stand-in datasets for GPU-free runs: a real-image set with the reference
//! split sizes and a set of transparent-background renders.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gensynth_core::data::{save_dataset, Split};
use gensynth_core::{Annotation, BoundingBox, DetectionDataset, ImageRecord, Provenance, Taxonomy};
use image::{ImageBuffer, Rgb, Rgba, RgbImage, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Real images per class in the training split.
pub const REAL_TRAIN_PER_CLASS: usize = 24;
pub const REAL_VAL_PER_CLASS: usize = 10;
/// Test images per class; 449 in total.
pub const REAL_TEST_COUNTS: [usize; 15] = [50, 21, 35, 28, 30, 25, 40, 22, 33, 27, 26, 31, 24, 29, 28];
pub const RENDERS_PER_CLASS: usize = 150;

const REAL_SIZE: (u32, u32) = (128, 96);
pub const RENDER_SIZE: u32 = 96;
const RENDER_MARGIN: u32 = 8;
const VIEWPOINTS: [&str; 5] = ["front", "rear", "left side", "right side", "front three-quarter"];

struct Planned {
    record: ImageRecord,
    color: [u8; 3],
}

fn write_all(root: &Path, planned: &[Planned], rgba: bool) -> Result<()> {
    planned.par_iter().try_for_each(|p| -> Result<()> {
        let r = &p.record;
        let b = r.annotations[0].bbox;
        let inside = |x: u32, y: u32| {
            let (x, y) = (x as f64, y as f64);
            x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max
        };
        let path = root.join(&r.uri);
        std::fs::create_dir_all(path.parent().expect("uri has a directory"))?;
        let [cr, cg, cb] = p.color;
        if rgba {
            let img: RgbaImage = ImageBuffer::from_fn(r.width, r.height, |x, y| {
                if inside(x, y) {
                    Rgba([cr, cg, cb, 255])
                } else {
                    Rgba([0, 0, 0, 0])
                }
            });
            img.save(&path)
        } else {
            let img: RgbImage = ImageBuffer::from_fn(r.width, r.height, |x, y| {
                if inside(x, y) {
                    Rgb([cr, cg, cb])
                } else {
                    Rgb([60, 70, 50])
                }
            });
            img.save(&path)
        }
        .with_context(|| format!("writing {}", path.display()))
    })
}

fn random_box(rng: &mut ChaCha8Rng, width: u32, height: u32, margin: u32) -> BoundingBox {
    let w = rng.random_range(width / 4..=width / 2 + width / 8);
    let h = rng.random_range(height / 4..=height / 2 + height / 8);
    let x0 = rng.random_range(margin..=width - margin - w);
    let y0 = rng.random_range(margin..=height - margin - h);
    BoundingBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64)
}

fn color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    [rng.random_range(120..=250), rng.random_range(120..=250), rng.random_range(120..=250)]
}

/// 959 records: 24 train, 10 val and 21-50 test images per class.
/// Returns the manifest path.
pub fn write_real(root: &Path, seed: u64) -> Result<PathBuf> {
    let taxonomy = Taxonomy::military_vehicles();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planned = Vec::new();
    for class in taxonomy.classes() {
        let test = REAL_TEST_COUNTS[class.id as usize % REAL_TEST_COUNTS.len()];
        let splits = [(Split::Train, REAL_TRAIN_PER_CLASS), (Split::Val, REAL_VAL_PER_CLASS), (Split::Test, test)];
        for (split, n) in splits {
            for _ in 0..n {
                let id = planned.len() as u64;
                let (w, h) = REAL_SIZE;
                let bbox = random_box(&mut rng, w, h, 2);
                let record = ImageRecord::new(id, format!("images/{}/{id:04}.png", class.slug()), w, h, split, Provenance::Real)
                    .with_annotation(Annotation::ground_truth(bbox, class.id, Provenance::Real));
                planned.push(Planned { record, color: color(&mut rng) });
            }
        }
    }
    write_all(root, &planned, false)?;
    let dataset = DetectionDataset::new(planned.into_iter().map(|p| p.record).collect())
        .with_meta("source", "real")
        .with_meta("fixture", "mock")
        .with_split_counts();
    let path = root.join("manifest.json");
    save_dataset(&dataset, &path)?;
    Ok(path)
}

/// 150 transparent-background renders per class, one opaque box each, with
/// pose attributes.
pub fn write_sim(root: &Path, seed: u64) -> Result<PathBuf> {
    let taxonomy = Taxonomy::military_vehicles();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157);
    let mut planned = Vec::new();
    for class in taxonomy.classes() {
        for _ in 0..RENDERS_PER_CLASS {
            let id = planned.len() as u64;
            let bbox = random_box(&mut rng, RENDER_SIZE, RENDER_SIZE, RENDER_MARGIN);
            let mut record = ImageRecord::new(
                id,
                format!("renders/{}/{id:04}.png", class.slug()),
                RENDER_SIZE,
                RENDER_SIZE,
                Split::Train,
                Provenance::Sim3d,
            )
            .with_annotation(Annotation::ground_truth(bbox, class.id, Provenance::Sim3d));
            let attrs = &mut record.attributes;
            attrs.insert("viewpoint".into(), VIEWPOINTS[rng.random_range(0..VIEWPOINTS.len())].into());
            attrs.insert("yaw".into(), rng.random_range(0..360).to_string());
            attrs.insert("pitch".into(), rng.random_range(0..30).to_string());
            attrs.insert("distance".into(), format!("{}", rng.random_range(20..200)));
            planned.push(Planned { record, color: color(&mut rng) });
        }
    }
    write_all(root, &planned, true)?;
    let dataset = DetectionDataset::new(planned.into_iter().map(|p| p.record).collect())
        .with_meta("source", "sim_3d")
        .with_meta("fixture", "mock")
        .with_split_counts();
    let path = root.join("manifest.json");
    save_dataset(&dataset, &path)?;
    Ok(path)
}

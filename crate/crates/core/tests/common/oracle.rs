//! Brute-force mAP reference and random evaluation instances.
//!
//! Written against plain tuples so that it shares no code with the library's
//! evaluator. Conventions it fixes independently: detections are visited by
//! descending confidence with ties in input order, a detection takes the
//! unmatched ground truth with the highest IoU (earliest on ties), precision
//! at recall r is the maximum precision over all PR points with recall >= r.

#![allow(dead_code)]

use gensynth_core::metrics::Detection;
use gensynth_core::{Annotation, BoundingBox, DetectionDataset, ImageRecord, Provenance, Split};
use rand::{Rng, RngCore};

/// `(image, class, [x0, y0, x1, y1])`.
pub type Gt = (u64, u32, [f64; 4]);
/// `(image, class, [x0, y0, x1, y1], confidence)`.
pub type Det = (u64, u32, [f64; 4], f64);

#[derive(Clone, Debug)]
pub struct Instance {
    pub images: u64,
    pub gts: Vec<Gt>,
    pub dets: Vec<Det>,
}

pub fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if inter <= 0.0 || union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// AP of one class at one IoU threshold. `None` when the class has neither
/// ground truth nor detections.
pub fn class_ap(inst: &Instance, class: u32, thr: f64) -> Option<f64> {
    let gts: Vec<&Gt> = inst.gts.iter().filter(|g| g.1 == class).collect();
    let mut dets: Vec<&Det> = inst.dets.iter().filter(|d| d.1 == class).collect();
    if gts.is_empty() {
        return if dets.is_empty() { None } else { Some(0.0) };
    }
    // Stable: equal confidences stay in input order.
    dets.sort_by(|a, b| b.3.partial_cmp(&a.3).unwrap());

    let mut used = vec![false; gts.len()];
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (rank, d) in dets.iter().enumerate() {
        let mut best: Option<usize> = None;
        let mut best_iou = -1.0;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.0 != d.0 {
                continue;
            }
            let v = box_iou(d.2, g.2);
            if v > best_iou {
                best_iou = v;
                best = Some(j);
            }
        }
        if let Some(j) = best {
            if best_iou >= thr {
                used[j] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
    }

    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        total += p;
    }
    Some(total / 101.0)
}

/// `(map50, map5095)` over the classes present in ground truth or
/// detections; `thresholds[0]` must be 0.5.
pub fn oracle_map(inst: &Instance, classes: u32, thresholds: &[f64]) -> (f64, f64) {
    let mut ap50 = Vec::new();
    let mut ap_all = Vec::new();
    for c in 0..classes {
        let aps: Vec<Option<f64>> = thresholds.iter().map(|&t| class_ap(inst, c, t)).collect();
        if let Some(a) = aps[0] {
            ap50.push(a);
            let defined: Vec<f64> = aps.iter().map(|a| a.unwrap()).collect();
            ap_all.push(defined.iter().sum::<f64>() / defined.len() as f64);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    (mean(&ap50), mean(&ap_all))
}

fn random_box(rng: &mut impl RngCore) -> [f64; 4] {
    let x = rng.random_range(0..180) as f64;
    let y = rng.random_range(0..180) as f64;
    let w = rng.random_range(4..60) as f64;
    let h = rng.random_range(4..60) as f64;
    [x, y, (x + w).min(200.0), (y + h).min(200.0)]
}

/// Up to `max_classes` classes, 50 images and 10 ground-truth boxes per
/// image. Integer coordinates and confidences on a 0.05 grid give exact IoU
/// ties, threshold hits and confidence ties.
pub fn random_instance(rng: &mut impl RngCore, max_classes: u32) -> Instance {
    let classes = rng.random_range(1..=max_classes);
    let images = rng.random_range(1..=50u64);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    let conf = |rng: &mut dyn RngCore| rng.random_range(0..=20) as f64 / 20.0;
    for img in 0..images {
        for _ in 0..rng.random_range(0..=10) {
            let b = random_box(rng);
            let c = rng.random_range(0..classes);
            gts.push((img, c, b));
            // Most ground truths get a jittered detection, some a second one.
            for _ in 0..rng.random_range(0..=2) {
                let spread = ((b[2] - b[0]).min(b[3] - b[1]) / 5.0).max(1.0) as i32;
                let j = |rng: &mut dyn RngCore| rng.random_range(-spread..=spread) as f64;
                let mut d = [b[0] + j(rng), b[1] + j(rng), b[2] + j(rng), b[3] + j(rng)];
                if d[2] <= d[0] {
                    d[2] = d[0] + 1.0;
                }
                if d[3] <= d[1] {
                    d[3] = d[1] + 1.0;
                }
                let dc = if rng.random_bool(0.1) { rng.random_range(0..classes) } else { c };
                dets.push((img, dc, d, conf(rng)));
            }
        }
        for _ in 0..rng.random_range(0..=3) {
            let b = random_box(rng);
            dets.push((img, rng.random_range(0..classes), b, conf(rng)));
        }
    }
    Instance { images, gts, dets }
}

/// The same instance as library inputs.
pub fn to_library(inst: &Instance) -> (DetectionDataset, Vec<Detection>) {
    let mut records: Vec<ImageRecord> = (0..inst.images)
        .map(|id| ImageRecord::new(id, format!("img/{id}.png"), 200, 200, Split::Test, Provenance::Real))
        .collect();
    for &(img, c, b) in &inst.gts {
        records[img as usize]
            .annotations
            .push(Annotation::ground_truth(BoundingBox::new(b[0], b[1], b[2], b[3]), c, Provenance::Real));
    }
    let dets = inst
        .dets
        .iter()
        .map(|&(img, c, b, conf)| Detection {
            image_id: img,
            bbox: BoundingBox::new(b[0], b[1], b[2], b[3]),
            class_id: c,
            confidence: conf,
        })
        .collect();
    (DetectionDataset::new(records), dets)
}

/// Two ground truths, three detections ranked TP, FP, TP at IoU 0.5.
pub fn hand_case() -> Instance {
    Instance {
        images: 1,
        gts: vec![(0, 0, [0.0, 0.0, 10.0, 10.0]), (0, 0, [50.0, 50.0, 60.0, 60.0])],
        dets: vec![
            (0, 0, [0.0, 0.0, 10.0, 10.0], 0.9),
            (0, 0, [100.0, 100.0, 110.0, 110.0], 0.8),
            (0, 0, [50.0, 50.0, 60.0, 59.0], 0.7),
        ],
    }
}

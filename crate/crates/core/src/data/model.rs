use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::taxonomy::{ClassId, Taxonomy};

pub type ImageId = u64;

/// Axis-aligned box in corner form, pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_xywh([x, y, w, h]: [f64; 4]) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    /// `[x_min, y_min, width, height]`, with extents chosen so that
    /// [`BoundingBox::from_xywh`] restores the corners bit-for-bit.
    pub fn to_xywh(&self) -> [f64; 4] {
        [
            self.x_min,
            self.y_min,
            exact_extent(self.x_min, self.x_max),
            exact_extent(self.y_min, self.y_max),
        ]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Finite, non-negative, strictly ordered corners.
    pub fn is_well_formed(&self) -> bool {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        coords.iter().all(|c| c.is_finite() && *c >= 0.0)
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x_max <= f64::from(width) && self.y_max <= f64::from(height)
    }

    /// Clamps the box to `[0, width] x [0, height]`. Returns `None` when
    /// nothing of positive area is left.
    pub fn clipped(&self, width: u32, height: u32) -> Option<Self> {
        let (w, h) = (f64::from(width), f64::from(height));
        let b = Self::new(
            self.x_min.clamp(0.0, w),
            self.y_min.clamp(0.0, h),
            self.x_max.clamp(0.0, w),
            self.y_max.clamp(0.0, h),
        );
        b.is_well_formed().then_some(b)
    }
}

// Smallest adjustment of `hi - lo` such that `lo + extent == hi` in f64.
fn exact_extent(lo: f64, hi: f64) -> f64 {
    let mut extent = hi - lo;
    if !extent.is_finite() {
        return extent;
    }
    for _ in 0..16 {
        let sum = lo + extent;
        if sum == hi {
            return extent;
        }
        extent = if sum < hi {
            extent.next_up()
        } else {
            extent.next_down()
        };
    }
    hi - lo
}

/// Which pipeline produced an image or annotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "real")]
    Real,
    #[serde(rename = "flux")]
    Flux,
    #[serde(rename = "flux_cn")]
    FluxCn,
    #[serde(rename = "sim_3d")]
    Sim3d,
}

impl Provenance {
    pub const ALL: [Provenance; 4] = [
        Provenance::Real,
        Provenance::Flux,
        Provenance::FluxCn,
        Provenance::Sim3d,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Real => "real",
            Provenance::Flux => "flux",
            Provenance::FluxCn => "flux_cn",
            Provenance::Sim3d => "sim_3d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }

    pub fn is_synthetic(self) -> bool {
        self != Provenance::Real
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BoundingBox,
    pub class_id: ClassId,
    /// Absent for ground truth.
    pub confidence: Option<f64>,
    pub provenance: Provenance,
}

impl Annotation {
    pub fn ground_truth(bbox: BoundingBox, class_id: ClassId, provenance: Provenance) -> Self {
        Self {
            bbox,
            class_id,
            confidence: None,
            provenance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: ImageId,
    /// Path relative to the dataset root.
    pub uri: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation>,
    pub split: Split,
    pub source: Provenance,
    /// Free-form per-image metadata (pose, prompt, seed, lineage).
    pub attributes: BTreeMap<String, String>,
    /// Set on repeated entries in mixed manifests: id of the original record.
    pub repetition_of: Option<ImageId>,
}

impl ImageRecord {
    pub fn new(
        image_id: ImageId,
        uri: impl Into<String>,
        width: u32,
        height: u32,
        split: Split,
        source: Provenance,
    ) -> Self {
        Self {
            image_id,
            uri: uri.into(),
            width,
            height,
            annotations: Vec::new(),
            split,
            source,
            attributes: BTreeMap::new(),
            repetition_of: None,
        }
    }

    pub fn with_annotation(mut self, annotation: Annotation) -> Self {
        self.annotations.push(annotation);
        self
    }

    /// Class of the first annotation; the class a record is filed under for
    /// per-class bookkeeping.
    pub fn primary_class(&self) -> Option<ClassId> {
        self.annotations.first().map(|a| a.class_id)
    }
}

/// Images plus annotations, the taxonomy they reference, and free-form
/// string metadata. Treated as an immutable value: transformations return
/// new datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionDataset {
    pub taxonomy: Taxonomy,
    pub records: Vec<ImageRecord>,
    pub meta: BTreeMap<String, String>,
}

impl Default for DetectionDataset {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

/// Meta key holding the expected record count for a split, e.g. `count.train`.
pub fn split_count_key(split: Split) -> String {
    format!("count.{split}")
}

impl DetectionDataset {
    pub fn new(records: Vec<ImageRecord>) -> Self {
        Self {
            taxonomy: Taxonomy::military_vehicles(),
            records,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    /// Records the current per-split counts in `meta`, so later validation
    /// can detect truncated or padded manifests.
    pub fn with_split_counts(mut self) -> Self {
        let counts = self.count_by_split();
        for split in Split::ALL {
            let n = counts.get(&split).copied().unwrap_or(0);
            self.meta.insert(split_count_key(split), n.to_string());
        }
        self
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count_by_split(&self) -> BTreeMap<Split, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.split).or_insert(0) += 1;
        }
        out
    }

    /// Records per primary class. Records without annotations are not counted.
    pub fn count_by_class(&self) -> BTreeMap<ClassId, usize> {
        let mut out = BTreeMap::new();
        for class in self.taxonomy.ids() {
            out.insert(class, 0);
        }
        for r in &self.records {
            if let Some(c) = r.primary_class() {
                *out.entry(c).or_insert(0) += 1;
            }
        }
        out
    }

    pub fn split(&self, split: Split) -> DetectionDataset {
        DetectionDataset {
            taxonomy: self.taxonomy.clone(),
            records: self
                .records
                .iter()
                .filter(|r| r.split == split)
                .cloned()
                .collect(),
            meta: self
                .meta
                .iter()
                .filter(|(k, _)| !k.starts_with("count."))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
        .with_meta("split", split.as_str())
    }

    pub fn records_of_class(&self, class: ClassId) -> impl Iterator<Item = &ImageRecord> {
        self.records
            .iter()
            .filter(move |r| r.primary_class() == Some(class))
    }

    pub fn record(&self, image_id: ImageId) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn box_geometry() {
        let b = BoundingBox::new(2.0, 3.0, 12.0, 8.0);
        assert_eq!(b.width(), 10.0);
        assert_eq!(b.height(), 5.0);
        assert_eq!(b.area(), 50.0);
        assert!(b.is_well_formed());
        assert!(b.fits_within(12, 8));
        assert!(!b.fits_within(11, 8));
        assert!(!BoundingBox::new(5.0, 0.0, 5.0, 1.0).is_well_formed());
        assert!(!BoundingBox::new(-1.0, 0.0, 5.0, 1.0).is_well_formed());
        assert!(!BoundingBox::new(0.0, 0.0, f64::NAN, 1.0).is_well_formed());
    }

    #[test]
    fn clipping() {
        let b = BoundingBox::new(-3.0, 2.0, 50.0, 20.0);
        assert_eq!(b.clipped(40, 30), Some(BoundingBox::new(0.0, 2.0, 40.0, 20.0)));
        assert_eq!(BoundingBox::new(45.0, 2.0, 50.0, 20.0).clipped(40, 30), None);
    }

    #[test]
    fn provenance_names() {
        for p in Provenance::ALL {
            assert_eq!(Provenance::parse(p.as_str()), Some(p));
            let json = serde_json::to_string(&p).unwrap();
            assert_eq!(json, format!("\"{}\"", p.as_str()));
        }
    }

    proptest! {
        #[test]
        fn xywh_restores_corners_exactly(
            x in 0.0f64..5000.0, y in 0.0f64..5000.0,
            w in 1e-6f64..5000.0, h in 1e-6f64..5000.0,
        ) {
            let b = BoundingBox::new(x, y, x + w, y + h);
            prop_assume!(b.is_well_formed());
            let back = BoundingBox::from_xywh(b.to_xywh());
            prop_assert_eq!(back.x_max.to_bits(), b.x_max.to_bits());
            prop_assert_eq!(back.y_max.to_bits(), b.y_max.to_bits());
            prop_assert_eq!(back, b);
        }
    }
}

//! Rasters, class bookkeeping and datasets shared by every stage.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class index: 0 is background, `1..=C` are organs.
pub type ClassIndex = u8;

/// Dense multi-channel image, channel-major planes of row-major pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct GridImage {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl GridImage {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "image expects {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite image value at index {i}")));
        }
        Ok(GridImage {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        GridImage {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// Mirror every plane left-to-right.
    pub fn flip_horizontal(&self) -> Self {
        let mut values = self.values.clone();
        for row in values.chunks_mut(self.width) {
            row.reverse();
        }
        GridImage { values, ..*self }
    }
}

/// Per-pixel integer class labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<ClassIndex>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<ClassIndex>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("label map dimensions must be positive".into()));
        }
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label map expects {} values, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, value: ClassIndex) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[ClassIndex] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [ClassIndex] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> ClassIndex {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, k: ClassIndex) {
        self.labels[y * self.width + x] = k;
    }

    pub fn max_label(&self) -> ClassIndex {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn same_shape(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }

    /// Binary indicator of `label == k`.
    pub fn mask_of(&self, k: ClassIndex) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.labels.iter().map(|&l| l == k).collect(),
        }
    }

    /// Zero every label outside `keep`.
    pub fn restrict(&self, keep: &ClassSet) -> LabelMap {
        LabelMap {
            labels: self
                .labels
                .iter()
                .map(|&l| if l != 0 && keep.contains(l) { l } else { 0 })
                .collect(),
            ..*self
        }
    }

    /// Distinct nonzero labels present.
    pub fn present_classes(&self) -> ClassSet {
        ClassSet::from_iter(self.labels.iter().copied().filter(|&l| l != 0))
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut labels = self.labels.clone();
        for row in labels.chunks_mut(self.width) {
            row.reverse();
        }
        LabelMap { labels, ..*self }
    }
}

/// Binary raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask expects {} values, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn to_plane(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Union of all labeled organs (`label != 0`).
pub fn union_mask(label: &LabelMap) -> BinaryMask {
    BinaryMask {
        height: label.height,
        width: label.width,
        bits: label.labels.iter().map(|&l| l != 0).collect(),
    }
}

pub fn class_pixel_count(label: &LabelMap, k: ClassIndex) -> usize {
    label.labels.iter().filter(|&&l| l == k).count()
}

/// Sorted, duplicate-free set of organ class indices (never contains 0).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(into = "Vec<ClassIndex>", try_from = "Vec<ClassIndex>")]
pub struct ClassSet(Vec<ClassIndex>);

impl ClassSet {
    pub fn contains(&self, k: ClassIndex) -> bool {
        self.0.binary_search(&k).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ClassIndex> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[ClassIndex] {
        &self.0
    }

    /// Zero-based rank of `k` within the set.
    pub fn position(&self, k: ClassIndex) -> Option<usize> {
        self.0.binary_search(&k).ok()
    }

    /// Classes `1..=total` not in this set.
    pub fn complement(&self, total: usize) -> ClassSet {
        ClassSet(
            (1..=total as ClassIndex)
                .filter(|&k| !self.contains(k))
                .collect(),
        )
    }

    pub fn all(total: usize) -> ClassSet {
        ClassSet((1..=total as ClassIndex).collect())
    }

    pub fn union(&self, other: &ClassSet) -> ClassSet {
        ClassSet::from_iter(self.iter().chain(other.iter()))
    }

    pub fn intersection(&self, other: &ClassSet) -> ClassSet {
        ClassSet(self.iter().filter(|&k| other.contains(k)).collect())
    }

    pub fn is_subset(&self, other: &ClassSet) -> bool {
        self.iter().all(|k| other.contains(k))
    }
}

impl FromIterator<ClassIndex> for ClassSet {
    fn from_iter<I: IntoIterator<Item = ClassIndex>>(iter: I) -> Self {
        let mut v: Vec<ClassIndex> = iter.into_iter().filter(|&k| k != 0).collect();
        v.sort_unstable();
        v.dedup();
        ClassSet(v)
    }
}

impl From<ClassSet> for Vec<ClassIndex> {
    fn from(s: ClassSet) -> Self {
        s.0
    }
}

impl TryFrom<Vec<ClassIndex>> for ClassSet {
    type Error = String;

    fn try_from(v: Vec<ClassIndex>) -> std::result::Result<Self, String> {
        if v.contains(&0) {
            return Err("class 0 is background and cannot be annotated".into());
        }
        Ok(ClassSet::from_iter(v))
    }
}

impl fmt::Display for ClassSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|k| k.to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// Organ names for class indices `1..=C`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassCatalog {
    names: Vec<String>,
}

impl ClassCatalog {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Invalid("class catalog needs at least one class".into()));
        }
        if names.len() > ClassIndex::MAX as usize {
            return Err(Error::Invalid(format!("too many classes: {}", names.len())));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Invalid(format!("class {} has an empty name", i + 1)));
            }
            if names[..i].contains(n) {
                return Err(Error::Invalid(format!("duplicate class name {n:?}")));
            }
        }
        Ok(ClassCatalog { names })
    }

    /// C, the number of organ classes (background excluded).
    pub fn total_classes(&self) -> usize {
        self.names.len()
    }

    /// Output channels of a model over this catalog: background + organs.
    pub fn channels(&self) -> usize {
        self.names.len() + 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, k: ClassIndex) -> Option<&str> {
        if k == 0 {
            Some("background")
        } else {
            self.names.get(k as usize - 1).map(String::as_str)
        }
    }

    pub fn all_classes(&self) -> ClassSet {
        ClassSet::all(self.names.len())
    }
}

impl TryFrom<Vec<String>> for ClassCatalog {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        ClassCatalog::new(v)
    }
}

impl From<ClassCatalog> for Vec<String> {
    fn from(c: ClassCatalog) -> Self {
        c.names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// One image with its (possibly partial) annotation.
///
/// `oracle` carries the full annotation when it is known (synthetic corpora);
/// training never reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GridImage,
    pub label: LabelMap,
    pub oracle: Option<LabelMap>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: GridImage, label: LabelMap) -> Result<Self> {
        let id = id.into();
        if !label.same_shape(image.height(), image.width()) {
            return Err(Error::Shape(format!(
                "sample {id}: label {}x{} does not match image {}x{}",
                label.height(),
                label.width(),
                image.height(),
                image.width()
            )));
        }
        Ok(Sample {
            id,
            image,
            label,
            oracle: None,
        })
    }

    pub fn with_oracle(mut self, oracle: LabelMap) -> Result<Self> {
        if !oracle.same_shape(self.image.height(), self.image.width()) {
            return Err(Error::Shape(format!("sample {}: oracle shape mismatch", self.id)));
        }
        self.oracle = Some(oracle);
        Ok(self)
    }
}

/// A dataset split annotated with a subset of the catalog's classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialDataset {
    pub name: String,
    pub annotated: ClassSet,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl PartialDataset {
    pub fn new(
        name: impl Into<String>,
        annotated: ClassSet,
        split: Split,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        let name = name.into();
        if annotated.is_empty() {
            return Err(Error::Invalid(format!("dataset {name}: annotated set is empty")));
        }
        for s in &samples {
            if let Some(bad) = s.label.labels().iter().find(|&&l| l != 0 && !annotated.contains(l)) {
                return Err(Error::Invalid(format!(
                    "dataset {name}: sample {} carries label {bad} outside annotated set {annotated}",
                    s.id
                )));
            }
        }
        Ok(PartialDataset {
            name,
            annotated,
            split,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks every label against a catalog of `total` organ classes.
    pub fn check_catalog(&self, catalog: &ClassCatalog) -> Result<()> {
        let all = catalog.all_classes();
        if !self.annotated.is_subset(&all) {
            return Err(Error::Invalid(format!(
                "dataset {}: annotated {} not within catalog of {} classes",
                self.name,
                self.annotated,
                catalog.total_classes()
            )));
        }
        Ok(())
    }
}

/// Per-pixel class probabilities, one row-major plane per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    classes: usize,
    height: usize,
    width: usize,
    probs: Vec<f64>,
}

impl ProbMap {
    pub const SIMPLEX_TOL: f64 = 1e-6;

    /// Validates shape, range and the per-pixel simplex constraint.
    pub fn new(classes: usize, height: usize, width: usize, probs: Vec<f64>) -> Result<Self> {
        let map = Self::from_raw(classes, height, width, probs)?;
        let n = height * width;
        for i in 0..n {
            let mut s = 0.0;
            for c in 0..classes {
                let p = map.probs[c * n + i];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Invalid(format!("probability {p} out of range")));
                }
                s += p;
            }
            if (s - 1.0).abs() > Self::SIMPLEX_TOL {
                return Err(Error::Invalid(format!("pixel {i} sums to {s}")));
            }
        }
        Ok(map)
    }

    /// Shape-checked construction without the simplex check.
    pub(crate) fn from_raw(classes: usize, height: usize, width: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != classes * height * width {
            return Err(Error::Shape(format!(
                "prob map expects {} values, got {}",
                classes * height * width,
                probs.len()
            )));
        }
        Ok(ProbMap {
            classes,
            height,
            width,
            probs,
        })
    }

    pub fn uniform(classes: usize, height: usize, width: usize) -> Self {
        ProbMap {
            classes,
            height,
            width,
            probs: vec![1.0 / classes as f64; classes * height * width],
        }
    }

    /// Probability 1 on the labeled class of every pixel.
    pub fn one_hot(label: &LabelMap, classes: usize) -> Self {
        let n = label.pixels();
        let mut probs = vec![0.0; classes * n];
        for (i, &l) in label.labels().iter().enumerate() {
            probs[l as usize * n + i] = 1.0;
        }
        ProbMap {
            classes,
            height: label.height(),
            width: label.width(),
            probs,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.probs[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, i: usize) -> f64 {
        self.probs[c * self.pixels() + i]
    }

    /// Largest deviation of a per-pixel sum from 1.
    pub fn max_simplex_error(&self) -> f64 {
        let n = self.pixels();
        (0..n)
            .map(|i| {
                let s: f64 = (0..self.classes).map(|c| self.probs[c * n + i]).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

//! Synthetic partially labeled corpora.
//!
//! Each image holds one non-overlapping geometric "organ" per class on a
//! noisy background. The full label is kept as the hidden oracle; each
//! dataset exposes only its annotated classes. Corruptions damage a single
//! class of a label map to exercise the quality filter.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::grid::{ClassCatalog, ClassIndex, ClassSet, GridImage, LabelMap, PartialDataset, Sample, Split};
use crate::metrics::dice_binary;
use crate::pseudo::PseudoSample;
use crate::seed;

/// Rejection-sampling attempts per scene before shrinking.
pub const PLACEMENT_ATTEMPTS: usize = 10_000;
const SHRINK_FACTOR: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Disk,
    Ellipse,
    RoundedBar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub class_k: ClassIndex,
    pub name: String,
    pub shape: ShapeFamily,
    /// Inclusive radius range in pixels.
    pub size: [f64; 2],
    /// Region for the organ centre as fractions of the grid: `[top, left, bottom, right]`.
    pub anchor: [f64; 4],
    pub texture: Texture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background: Texture,
    pub organs: Vec<OrganSpec>,
    /// Minimum background gap between organs, in pixels.
    #[serde(default = "default_gap")]
    pub gap: usize,
    /// Spatial correlation length of the texture noise, in pixels.
    #[serde(default)]
    pub noise_correlation: f64,
}

fn default_gap() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionEntry {
    pub name: String,
    pub annotated: ClassSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Shift the class mask by `magnitude` × grid width.
    TranslateFraction,
    /// Erase `magnitude` of the class pixels, keeping a contiguous sliver.
    EraseFraction,
    /// Relabel the class as a different class.
    SwapClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub magnitude: f64,
    /// Fraction of samples to corrupt.
    pub fraction: f64,
    pub seed: u64,
}

/// Generator input: scene, partition and split sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub name: String,
    pub seed: u64,
    pub scene: SceneSpec,
    pub partition: Vec<PartitionEntry>,
    pub samples: SplitSizes,
    /// Corruptions measured against the generated oracle labels for the card.
    #[serde(default)]
    pub corruptions: Vec<CorruptionSpec>,
}

impl CorpusSpec {
    /// The reference corpus: 64×64 grids, four organs, datasets annotated
    /// {1,2} and {3,4}, 60/20/20 samples per dataset.
    pub fn reference() -> CorpusSpec {
        let organ = |k, name: &str, shape, size, anchor, mean| OrganSpec {
            class_k: k,
            name: name.into(),
            shape,
            size,
            anchor,
            texture: Texture { mean, std: 0.4 },
        };
        CorpusSpec {
            name: "mini-bowel".into(),
            seed: 20240917,
            scene: SceneSpec {
                height: 64,
                width: 64,
                background: Texture { mean: 0.0, std: 0.4 },
                organs: vec![
                    organ(1, "colon", ShapeFamily::RoundedBar, [6.0, 9.0], [0.15, 0.15, 0.55, 0.85], 1.0),
                    organ(2, "small_bowel", ShapeFamily::Disk, [5.0, 8.0], [0.4, 0.2, 0.85, 0.8], 2.0),
                    organ(3, "duodenum", ShapeFamily::Ellipse, [5.0, 8.0], [0.15, 0.15, 0.85, 0.5], 3.0),
                    organ(4, "stomach", ShapeFamily::Ellipse, [6.0, 9.0], [0.15, 0.5, 0.85, 0.85], -1.0),
                ],
                gap: 1,
                noise_correlation: 1.5,
            },
            partition: vec![
                PartitionEntry {
                    name: "bowel_a".into(),
                    annotated: ClassSet::from_iter([1, 2]),
                },
                PartitionEntry {
                    name: "bowel_b".into(),
                    annotated: ClassSet::from_iter([3, 4]),
                },
            ],
            samples: SplitSizes {
                train: 60,
                valid: 20,
                test: 20,
            },
            corruptions: vec![
                CorruptionSpec {
                    kind: CorruptionKind::TranslateFraction,
                    magnitude: 0.25,
                    fraction: 1.0,
                    seed: 1,
                },
                CorruptionSpec {
                    kind: CorruptionKind::EraseFraction,
                    magnitude: 0.85,
                    fraction: 1.0,
                    seed: 2,
                },
                CorruptionSpec {
                    kind: CorruptionKind::SwapClass,
                    magnitude: 1.0,
                    fraction: 1.0,
                    seed: 3,
                },
            ],
        }
    }

    pub fn from_toml(text: &str) -> Result<CorpusSpec> {
        let spec: CorpusSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("corpus spec serializes")
    }

    pub fn catalog(&self) -> Result<ClassCatalog> {
        let mut organs = self.scene.organs.clone();
        organs.sort_by_key(|o| o.class_k);
        ClassCatalog::new(organs.into_iter().map(|o| o.name).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scene;
        if s.height < 8 || s.width < 8 {
            return Err(Error::Invalid("scene grid must be at least 8x8".into()));
        }
        let total = s.organs.len();
        if total == 0 || total > ClassIndex::MAX as usize {
            return Err(Error::Invalid("scene needs between 1 and 255 organs".into()));
        }
        let mut ks: Vec<ClassIndex> = s.organs.iter().map(|o| o.class_k).collect();
        ks.sort_unstable();
        if ks != (1..=total as ClassIndex).collect::<Vec<_>>() {
            return Err(Error::Invalid("organ classes must be exactly 1..=C".into()));
        }
        for o in &s.organs {
            let [lo, hi] = o.size;
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Invalid(format!("organ {}: bad size range", o.name)));
            }
            let [t, l, b, r] = o.anchor;
            if !(0.0 <= t && t <= b && b <= 1.0 && 0.0 <= l && l <= r && r <= 1.0) {
                return Err(Error::Invalid(format!("organ {}: bad anchor region", o.name)));
            }
            if !(o.texture.std >= 0.0 && o.texture.mean.is_finite()) {
                return Err(Error::Invalid(format!("organ {}: bad texture", o.name)));
            }
        }
        if !(s.noise_correlation >= 0.0 && s.noise_correlation <= 16.0) {
            return Err(Error::Invalid("noise_correlation must be in [0, 16]".into()));
        }
        if !(s.background.std >= 0.0 && s.background.mean.is_finite()) {
            return Err(Error::Invalid("bad background texture".into()));
        }
        let all = ClassSet::all(total);
        let mut covered = ClassSet::default();
        for p in &self.partition {
            if p.annotated.is_empty() || !p.annotated.is_subset(&all) {
                return Err(Error::Invalid(format!("partition {}: annotated set outside 1..={total}", p.name)));
            }
            covered = covered.union(&p.annotated);
        }
        if covered != all {
            return Err(Error::Invalid("partition does not cover every class".into()));
        }
        for c in &self.corruptions {
            c.validate()?;
        }
        Ok(())
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) || !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return Err(Error::Invalid("corruption fraction must be in [0,1], magnitude >= 0".into()));
        }
        if self.kind == CorruptionKind::EraseFraction && self.magnitude > 1.0 {
            return Err(Error::Invalid("erase fraction above 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    shape: ShapeFamily,
    cy: f64,
    cx: f64,
    /// Disk radius, ellipse semi-major axis, or bar half-length plus cap.
    a: f64,
    b: f64,
    angle: f64,
}

impl Placed {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        match self.shape {
            ShapeFamily::Disk => u * u + v * v <= self.a * self.a,
            ShapeFamily::Ellipse => (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0,
            ShapeFamily::RoundedBar => {
                let half = (self.a - self.b).max(0.0);
                let du = (u.abs() - half).max(0.0);
                du * du + v * v <= self.b * self.b
            }
        }
    }

    fn extent(&self) -> f64 {
        self.a
    }
}

fn sample_shape(o: &OrganSpec, scale: f64, h: usize, w: usize, rng: &mut seed::Rng) -> Placed {
    let r = rng.random_range(o.size[0]..=o.size[1]) * scale;
    let [t, l, b, rr] = o.anchor;
    let cy = rng.random_range(t..=b) * (h - 1) as f64;
    let cx = rng.random_range(l..=rr) * (w - 1) as f64;
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let (a, bb) = match o.shape {
        ShapeFamily::Disk => (r, r),
        ShapeFamily::Ellipse => (r, r * rng.random_range(0.5..0.8)),
        ShapeFamily::RoundedBar => (r * 1.6, r * 0.55),
    };
    Placed {
        shape: o.shape,
        cy,
        cx,
        a,
        b: bb,
        angle,
    }
}

/// Place every organ without overlap; `None` after the attempt budget.
fn place_scene(spec: &SceneSpec, scale: f64, rng: &mut seed::Rng) -> Option<LabelMap> {
    let (h, w) = (spec.height, spec.width);
    let mut attempts = 0;
    'scene: while attempts < PLACEMENT_ATTEMPTS {
        let mut label = LabelMap::filled(h, w, 0);
        let mut blocked = vec![false; h * w];
        for o in &spec.organs {
            let mut placed = false;
            while !placed {
                attempts += 1;
                if attempts > PLACEMENT_ATTEMPTS {
                    break 'scene;
                }
                let p = sample_shape(o, scale, h, w, rng);
                let e = p.extent();
                if p.cy - e < 0.0 || p.cx - e < 0.0 || p.cy + e > (h - 1) as f64 || p.cx + e > (w - 1) as f64 {
                    continue;
                }
                let pixels: Vec<usize> = (0..h)
                    .flat_map(|y| (0..w).map(move |x| (y, x)))
                    .filter(|&(y, x)| p.contains(y as f64, x as f64))
                    .map(|(y, x)| y * w + x)
                    .collect();
                if pixels.is_empty() || pixels.iter().any(|&i| blocked[i]) {
                    if attempts % 200 == 0 {
                        continue 'scene;
                    }
                    continue;
                }
                for &i in &pixels {
                    label.labels_mut()[i] = o.class_k;
                }
                let g = spec.gap as isize;
                for &i in &pixels {
                    let (y, x) = ((i / w) as isize, (i % w) as isize);
                    for dy in -g..=g {
                        for dx in -g..=g {
                            let (yy, xx) = (y + dy, x + dx);
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                blocked[yy as usize * w + xx as usize] = true;
                            }
                        }
                    }
                }
                placed = true;
            }
        }
        return Some(label);
    }
    None
}

/// Render a full label and its image from one seed.
pub fn render_scene(spec: &SceneSpec, seed_value: u64) -> Result<(GridImage, LabelMap)> {
    let mut rng = seed::rng(seed_value);
    let label = match place_scene(spec, 1.0, &mut rng) {
        Some(l) => l,
        None => {
            log::warn!("organ placement failed after {PLACEMENT_ATTEMPTS} attempts; shrinking sizes");
            place_scene(spec, SHRINK_FACTOR, &mut rng).ok_or_else(|| {
                Error::Invalid(format!(
                    "cannot place {} disjoint organs on a {}x{} grid",
                    spec.organs.len(),
                    spec.height,
                    spec.width
                ))
            })?
        }
    };
    let mut textures = vec![spec.background; spec.organs.len() + 1];
    for o in &spec.organs {
        textures[o.class_k as usize] = o.texture;
    }
    let field = noise_field(spec.height, spec.width, spec.noise_correlation, &mut rng);
    let values = label
        .labels()
        .iter()
        .zip(&field)
        .map(|(&k, &f)| {
            let t = textures[k as usize];
            // Stored as f32 on disk; keep the in-memory value identical.
            (t.mean + t.std * f) as f32 as f64
        })
        .collect();
    Ok((GridImage::new(1, spec.height, spec.width, values)?, label))
}

/// Unit-variance Gaussian noise, blurred with a Gaussian of std `corr` pixels
/// (white when `corr` is 0). Blurring runs over a padded grid so every output
/// pixel sees a full kernel and keeps exactly unit variance.
pub fn noise_field(h: usize, w: usize, corr: f64, rng: &mut seed::Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    if corr <= 0.0 {
        return (0..h * w).map(|_| normal.sample(rng)).collect();
    }
    let r = (3.0 * corr).ceil() as usize;
    let kernel: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * corr * corr)).exp()
        })
        .collect();
    let norm = kernel.iter().map(|k| k * k).sum::<f64>();
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let white: Vec<f64> = (0..ph * pw).map(|_| normal.sample(rng)).collect();
    let mut rows = vec![0.0; ph * w];
    for y in 0..ph {
        for x in 0..w {
            rows[y * w + x] = kernel.iter().enumerate().map(|(i, k)| k * white[y * pw + x + i]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = kernel.iter().enumerate().map(|(i, k)| k * rows[(y + i) * w + x]).sum();
            // Separable kernel: total squared weight is norm^2.
            out[y * w + x] = v / norm;
        }
    }
    out
}

fn split_index(s: Split) -> u64 {
    match s {
        Split::Train => 0,
        Split::Valid => 1,
        Split::Test => 2,
    }
}

/// A generated corpus: one [`PartialDataset`] per (partition entry, split).
#[derive(Debug, Clone)]
pub struct Corpus {
    pub catalog: ClassCatalog,
    pub datasets: Vec<PartialDataset>,
}

impl Corpus {
    /// Datasets of one partition entry, in train/valid/test order.
    pub fn group(&self, name: &str) -> Vec<PartialDataset> {
        self.datasets.iter().filter(|d| d.name == name).cloned().collect()
    }

    pub fn split(&self, split: Split) -> Vec<PartialDataset> {
        self.datasets.iter().filter(|d| d.split == split).cloned().collect()
    }
}

pub fn generate_corpus(spec: &CorpusSpec, par: Parallelism) -> Result<Corpus> {
    spec.validate()?;
    let catalog = spec.catalog()?;
    let mut datasets = Vec::new();
    for (di, p) in spec.partition.iter().enumerate() {
        for (split, n) in [
            (Split::Train, spec.samples.train),
            (Split::Valid, spec.samples.valid),
            (Split::Test, spec.samples.test),
        ] {
            let base = seed::derive_seed(seed::derive_seed(spec.seed, di as u64), split_index(split));
            let samples = par.map_range(n, |i| -> Result<Sample> {
                let (image, oracle) = render_scene(&spec.scene, seed::derive_seed(base, i as u64))?;
                let visible = oracle.restrict(&p.annotated);
                Sample::new(format!("{}_{}_{:03}", p.name, split, i), image, visible)?.with_oracle(oracle)
            });
            let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;
            datasets.push(PartialDataset::new(p.name.clone(), p.annotated.clone(), split, samples)?);
        }
    }
    Ok(Corpus { catalog, datasets })
}

/// Damage class `k` of `label`. Moved or swapped pixels only land on pixels
/// that are background or `k`, so other classes are never overwritten.
/// Returns the corrupted map and the Dice of the new class-`k` mask against
/// the original one.
pub fn corrupt_pseudo(
    label: &LabelMap,
    k: ClassIndex,
    kind: CorruptionKind,
    magnitude: f64,
    total_classes: usize,
    rng: &mut seed::Rng,
) -> (LabelMap, f64) {
    let (h, w) = (label.height(), label.width());
    let original = label.mask_of(k);
    let pixels: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| label.get(y, x) == k)
        .collect();
    let mut out = label.clone();
    if magnitude == 0.0 || pixels.is_empty() {
        let d = dice_binary(&original, &out.mask_of(k));
        return (out, d);
    }
    match kind {
        CorruptionKind::TranslateFraction => {
            let shift = (magnitude * w as f64).round() as isize;
            // Prefer directions that keep the most pixels on the grid.
            let dirs = [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)];
            let fits = |(dy, dx): (isize, isize)| {
                pixels
                    .iter()
                    .filter(|&&(y, x)| {
                        let (ny, nx) = (y as isize + dy * shift, x as isize + dx * shift);
                        ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w
                    })
                    .count()
            };
            let best = dirs.iter().map(|&d| fits(d)).max().unwrap_or(0);
            let candidates: Vec<(isize, isize)> = dirs.iter().copied().filter(|&d| fits(d) == best).collect();
            let (dy, dx) = candidates[rng.random_range(0..candidates.len())];
            for &(y, x) in &pixels {
                out.set(y, x, 0);
            }
            for &(y, x) in &pixels {
                let (ny, nx) = (y as isize + dy * shift, x as isize + dx * shift);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    let (ny, nx) = (ny as usize, nx as usize);
                    if out.get(ny, nx) == 0 {
                        out.set(ny, nx, k);
                    }
                }
            }
        }
        CorruptionKind::EraseFraction => {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = theta.sin_cos();
            let mut order = pixels.clone();
            order.sort_by(|a, b| {
                let pa = a.0 as f64 * s + a.1 as f64 * c;
                let pb = b.0 as f64 * s + b.1 as f64 * c;
                pa.partial_cmp(&pb).expect("finite").then(a.cmp(b))
            });
            let erase = ((magnitude.min(1.0)) * order.len() as f64).round() as usize;
            for &(y, x) in &order[..erase] {
                out.set(y, x, 0);
            }
        }
        CorruptionKind::SwapClass => {
            let others: Vec<ClassIndex> = (1..=total_classes as ClassIndex).filter(|&j| j != k).collect();
            let j = if others.is_empty() { 0 } else { others[rng.random_range(0..others.len())] };
            for &(y, x) in &pixels {
                out.set(y, x, j);
            }
        }
    }
    let d = dice_binary(&original, &out.mask_of(k));
    (out, d)
}

/// Record of one injected pseudo-label corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub sample_id: String,
    pub class_k: ClassIndex,
    pub dice: f64,
}

/// Corrupt one pseudo-labeled class in a seeded `spec.fraction` of samples.
/// Ground-truth pixels are never touched.
pub fn corrupt_pseudo_samples(
    samples: &mut [PseudoSample],
    spec: &CorruptionSpec,
    total_classes: usize,
) -> Vec<CorruptionRecord> {
    let mut rng = seed::rng(spec.seed);
    let mut records = Vec::new();
    for s in samples.iter_mut() {
        let pick: f64 = rng.random();
        let sample_seed: u64 = rng.random();
        if pick >= spec.fraction {
            continue;
        }
        let present: Vec<ClassIndex> = s
            .pseudo_classes
            .iter()
            .filter(|&k| s.label.labels().contains(&k))
            .collect();
        if present.is_empty() {
            continue;
        }
        let mut srng = seed::rng(sample_seed);
        let k = present[srng.random_range(0..present.len())];
        let protect = s.gt_classes.clone();
        let (mut corrupted, dice) = corrupt_pseudo(&s.label, k, spec.kind, spec.magnitude, total_classes, &mut srng);
        // Swaps must not introduce ground-truth classes outside the annotation.
        for (c, &orig) in corrupted.labels_mut().iter_mut().zip(s.label.labels()) {
            if protect.contains(*c) && *c != orig {
                *c = 0;
            }
        }
        s.label = corrupted;
        records.push(CorruptionRecord {
            sample_id: s.id.clone(),
            class_k: k,
            dice,
        });
    }
    records
}

/// Mean, min and max Dice achieved by a corruption on the oracle labels of a
/// corpus (every class of every sample).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionMeasurement {
    pub spec: CorruptionSpec,
    pub mean_dice: f64,
    pub min_dice: f64,
    pub max_dice: f64,
    pub count: usize,
}

pub fn measure_corruption(corpus: &Corpus, spec: &CorruptionSpec) -> CorruptionMeasurement {
    let total = corpus.catalog.total_classes();
    let mut rng = seed::rng(spec.seed);
    let mut dices = Vec::new();
    for d in &corpus.datasets {
        for s in &d.samples {
            let label = s.oracle.as_ref().unwrap_or(&s.label);
            for k in label.present_classes().iter() {
                dices.push(corrupt_pseudo(label, k, spec.kind, spec.magnitude, total, &mut rng).1);
            }
        }
    }
    let count = dices.len();
    CorruptionMeasurement {
        spec: *spec,
        mean_dice: dices.iter().sum::<f64>() / count.max(1) as f64,
        min_dice: dices.iter().copied().fold(f64::INFINITY, f64::min),
        max_dice: dices.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        count,
    }
}

/// Overlap coefficient of two normal densities, by numeric integration.
pub fn texture_overlap(a: Texture, b: Texture) -> f64 {
    let lo = (a.mean - 8.0 * a.std).min(b.mean - 8.0 * b.std);
    let hi = (a.mean + 8.0 * a.std).max(b.mean + 8.0 * b.std);
    let pdf = |t: Texture, x: f64| {
        (-(x - t.mean).powi(2) / (2.0 * t.std * t.std)).exp() / (t.std * (std::f64::consts::TAU).sqrt())
    };
    let n = 20_000;
    let dx = (hi - lo) / n as f64;
    (0..n)
        .map(|i| {
            let x = lo + (i as f64 + 0.5) * dx;
            pdf(a, x).min(pdf(b, x))
        })
        .sum::<f64>()
        * dx
}

/// Corpus card: spec, derived seeds and measured properties.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusCard {
    pub spec: CorpusSpec,
    pub catalog: ClassCatalog,
    pub datasets: Vec<CardDataset>,
    /// Largest intensity-histogram overlap between any two textures.
    pub max_texture_overlap: f64,
    pub corruptions: Vec<CorruptionMeasurement>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CardDataset {
    pub name: String,
    pub split: Split,
    pub annotated: ClassSet,
    pub samples: usize,
}

pub fn corpus_card(spec: &CorpusSpec, corpus: &Corpus) -> CorpusCard {
    let mut textures = vec![spec.scene.background];
    textures.extend(spec.scene.organs.iter().map(|o| o.texture));
    let mut max_overlap: f64 = 0.0;
    for i in 0..textures.len() {
        for j in i + 1..textures.len() {
            if textures[i].std > 0.0 && textures[j].std > 0.0 {
                max_overlap = max_overlap.max(texture_overlap(textures[i], textures[j]));
            }
        }
    }
    CorpusCard {
        spec: spec.clone(),
        catalog: corpus.catalog.clone(),
        datasets: corpus
            .datasets
            .iter()
            .map(|d| CardDataset {
                name: d.name.clone(),
                split: d.split,
                annotated: d.annotated.clone(),
                samples: d.len(),
            })
            .collect(),
        max_texture_overlap: max_overlap,
        corruptions: spec.corruptions.iter().map(|c| measure_corruption(corpus, c)).collect(),
    }
}

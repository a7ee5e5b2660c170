//! Pseudo-label quality assessment by outlier detection in feature space.
//!
//! Every organ of every pseudo-labeled image is summarized by the centroid of
//! the extractor's features over its mask. All centroids are reduced to two
//! dimensions with one PCA fit, a Gaussian is fit per class to the
//! ground-truth centroids only, and a pseudo-labeled organ is flagged when its
//! squared Mahalanobis distance exceeds the chi-squared (df = 2) quantile.
//! An image is kept only if none of its pseudo-labeled organs is flagged.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::grid::{BinaryMask, ClassIndex, ClassSet};
use crate::model::SegModel;
use crate::pseudo::PseudoSample;

/// Default chi-squared quantile for the outlier threshold.
pub const DEFAULT_TAU_QUANTILE: f64 = 0.999;

/// Minimum ground-truth features for a usable class distribution.
pub const MIN_GT_FEATURES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    Pseudo,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::GroundTruth => "ground_truth",
            Provenance::Pseudo => "pseudo",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrganFeature {
    /// Index of the owning sample in the assessed list.
    pub sample: usize,
    pub sample_id: String,
    pub class_k: ClassIndex,
    pub provenance: Provenance,
    pub z_raw: Vec<f64>,
    /// Set once the PCA projection has been applied.
    pub z: Option<[f64; 2]>,
}

/// Per-plane mean of `features` (`planes` row-major planes) over the mask.
/// `None` when the mask is empty.
pub fn organ_feature(features: &[f64], planes: usize, mask: &BinaryMask) -> Option<Vec<f64>> {
    let n = mask.bits().len();
    assert_eq!(features.len(), planes * n, "feature raster does not match mask");
    let count = mask.count();
    if count == 0 {
        return None;
    }
    let inv = 1.0 / count as f64;
    Some(
        (0..planes)
            .map(|c| {
                features[c * n..(c + 1) * n]
                    .iter()
                    .zip(mask.bits())
                    .filter(|(_, &b)| b)
                    .map(|(v, _)| v)
                    .sum::<f64>()
                    * inv
            })
            .collect(),
    )
}

/// Projection onto the top two principal axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjector {
    pub mean: Vec<f64>,
    pub basis: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
}

impl PcaProjector {
    pub fn project(&self, x: &[f64]) -> [f64; 2] {
        let mut z = [0.0; 2];
        for (zi, row) in z.iter_mut().zip(&self.basis) {
            *zi = x
                .iter()
                .zip(&self.mean)
                .zip(row)
                .map(|((xv, mv), bv)| (xv - mv) * bv)
                .sum();
        }
        z
    }

    pub fn reconstruct(&self, z: [f64; 2]) -> Vec<f64> {
        self.mean
            .iter()
            .enumerate()
            .map(|(j, m)| m + z[0] * self.basis[0][j] + z[1] * self.basis[1][j])
            .collect()
    }
}

/// PCA to two dimensions from the eigendecomposition of the sample covariance.
///
/// Each axis is signed so its first non-negligible component is positive.
pub fn fit_pca(data: &[Vec<f64>]) -> Result<PcaProjector> {
    let n = data.len();
    if n < 3 {
        return Err(Error::Invalid(format!("PCA needs at least 3 vectors, got {n}")));
    }
    let m = data[0].len();
    if m < 2 {
        return Err(Error::Invalid("PCA needs dimension >= 2".into()));
    }
    if data.iter().any(|v| v.len() != m) {
        return Err(Error::Shape("PCA input vectors differ in length".into()));
    }
    let mut mean = vec![0.0; m];
    for v in data {
        for (a, x) in mean.iter_mut().zip(v) {
            *a += x;
        }
    }
    for a in &mut mean {
        *a /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(m, m);
    for v in data {
        for i in 0..m {
            let di = v[i] - mean[i];
            for j in i..m {
                cov[(i, j)] += di * (v[j] - mean[j]);
            }
        }
    }
    for i in 0..m {
        for j in i..m {
            let c = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });
    let axis = |idx: usize| -> Vec<f64> {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                for x in &mut v {
                    *x = -*x;
                }
            }
        }
        v
    };
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut second = eig.eigenvalues[order[1]].max(0.0);
    if second <= 1e-12 * top.max(f64::MIN_POSITIVE) {
        log::warn!("PCA input has rank < 2; second axis is an arbitrary orthonormal completion");
        second = 0.0;
    }
    Ok(PcaProjector {
        mean,
        basis: [axis(order[0]), axis(order[1])],
        explained_variance: [top, second],
    })
}

/// Gaussian summary of one class's ground-truth features in the PCA plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub class_k: ClassIndex,
    pub mean: [f64; 2],
    /// Regularized unbiased covariance.
    pub cov: [[f64; 2]; 2],
    pub count: usize,
    /// False when fewer than [`MIN_GT_FEATURES`] features were available.
    pub usable: bool,
}

pub fn fit_distribution(points: &[[f64; 2]], class_k: ClassIndex) -> ClassDistribution {
    let n = points.len();
    if n < MIN_GT_FEATURES {
        return ClassDistribution {
            class_k,
            mean: [0.0; 2],
            cov: [[1.0, 0.0], [0.0, 1.0]],
            count: n,
            usable: false,
        };
    }
    let mut mean = [0.0; 2];
    for p in points {
        mean[0] += p[0];
        mean[1] += p[1];
    }
    mean[0] /= n as f64;
    mean[1] /= n as f64;
    let mut c = [[0.0; 2]; 2];
    for p in points {
        let d = [p[0] - mean[0], p[1] - mean[1]];
        c[0][0] += d[0] * d[0];
        c[0][1] += d[0] * d[1];
        c[1][1] += d[1] * d[1];
    }
    let denom = (n - 1) as f64;
    c[0][0] /= denom;
    c[0][1] /= denom;
    c[1][1] /= denom;
    c[1][0] = c[0][1];
    let eps = 1e-8 * (c[0][0] + c[1][1]) / 2.0 + 1e-12;
    c[0][0] += eps;
    c[1][1] += eps;
    ClassDistribution {
        class_k,
        mean,
        cov: c,
        count: n,
        usable: true,
    }
}

/// `(z - mu)^T C^-1 (z - mu)`.
pub fn mahalanobis_sq(z: [f64; 2], dist: &ClassDistribution) -> f64 {
    let [[a, b], [_, d]] = dist.cov;
    let det = a * d - b * b;
    let dx = z[0] - dist.mean[0];
    let dy = z[1] - dist.mean[1];
    ((d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det).max(0.0)
}

/// Inverse CDF of chi-squared with two degrees of freedom: `-2 ln(1 - p)`.
pub fn chi2_threshold(p: f64) -> f64 {
    -2.0 * (-p).ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaVerdict {
    pub sample_id: String,
    pub per_class_distance_sq: BTreeMap<ClassIndex, f64>,
    pub flagged_classes: ClassSet,
    pub keep: bool,
}

/// Everything one assessment round produced.
#[derive(Debug, Clone)]
pub struct Assessment {
    pub features: Vec<OrganFeature>,
    /// Squared distance of each feature to its class distribution (NaN if unusable).
    pub distance_sq: Vec<f64>,
    pub flagged: Vec<bool>,
    pub projector: PcaProjector,
    pub distributions: BTreeMap<ClassIndex, ClassDistribution>,
    pub threshold: f64,
    pub verdicts: Vec<QaVerdict>,
}

impl Assessment {
    pub fn kept(&self) -> usize {
        self.verdicts.iter().filter(|v| v.keep).count()
    }

    /// One report row per organ feature, in feature order.
    pub fn rows(&self) -> Vec<QaRow> {
        self.features
            .iter()
            .zip(&self.distance_sq)
            .zip(&self.flagged)
            .map(|((f, &d2), &flagged)| {
                let z = f.z.unwrap_or([f64::NAN; 2]);
                QaRow {
                    sample_id: f.sample_id.clone(),
                    class: f.class_k,
                    provenance: f.provenance.as_str(),
                    z1: z[0],
                    z2: z[1],
                    d2: d2.is_finite().then_some(d2),
                    threshold: self.threshold,
                    flagged: flagged as u8,
                }
            })
            .collect()
    }
}

/// Flat QA report record; `d2` is empty for classes without a usable
/// distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QaRow {
    pub sample_id: String,
    pub class: ClassIndex,
    pub provenance: &'static str,
    pub z1: f64,
    pub z2: f64,
    pub d2: Option<f64>,
    pub threshold: f64,
    pub flagged: u8,
}

/// Organ centroids of the model's final feature layer over each class of y'.
pub fn extract_features(
    model: &SegModel,
    samples: &[PseudoSample],
    par: Parallelism,
) -> Result<Vec<OrganFeature>> {
    let per_sample = par.map_range(samples.len(), |i| -> Result<Vec<OrganFeature>> {
        let s = &samples[i];
        let fwd = model.forward(&s.image)?;
        let planes = fwd.feature_planes();
        let mut out = Vec::new();
        for (classes, provenance) in [
            (&s.gt_classes, Provenance::GroundTruth),
            (&s.pseudo_classes, Provenance::Pseudo),
        ] {
            for k in classes.iter() {
                if let Some(z_raw) = organ_feature(fwd.features(), planes, &s.label.mask_of(k)) {
                    out.push(OrganFeature {
                        sample: i,
                        sample_id: s.id.clone(),
                        class_k: k,
                        provenance,
                        z_raw,
                        z: None,
                    });
                }
            }
        }
        out.sort_by_key(|f| f.class_k);
        Ok(out)
    });
    let mut all = Vec::new();
    for r in per_sample {
        all.extend(r?);
    }
    Ok(all)
}

/// Project, fit ground-truth distributions and flag outlying pseudo features.
///
/// `sample_ids` lists every assessed sample; samples without pseudo features
/// are kept.
pub fn assess_features(
    mut features: Vec<OrganFeature>,
    sample_ids: &[String],
    tau_quantile: f64,
) -> Result<Assessment> {
    if !(tau_quantile > 0.0 && tau_quantile < 1.0) {
        return Err(Error::Invalid(format!("tau quantile {tau_quantile} outside (0, 1)")));
    }
    let raw: Vec<Vec<f64>> = features.iter().map(|f| f.z_raw.clone()).collect();
    let projector = fit_pca(&raw)?;
    for f in &mut features {
        f.z = Some(projector.project(&f.z_raw));
    }

    let mut gt_points: BTreeMap<ClassIndex, Vec<[f64; 2]>> = BTreeMap::new();
    for f in &features {
        if f.provenance == Provenance::GroundTruth {
            gt_points.entry(f.class_k).or_default().push(f.z.expect("projected"));
        }
    }
    let mut classes: Vec<ClassIndex> = features.iter().map(|f| f.class_k).collect();
    classes.sort_unstable();
    classes.dedup();
    let distributions: BTreeMap<ClassIndex, ClassDistribution> = classes
        .iter()
        .map(|&k| {
            let pts = gt_points.get(&k).map(Vec::as_slice).unwrap_or(&[]);
            let d = fit_distribution(pts, k);
            if !d.usable {
                log::info!("class {k}: {} ground-truth features, exempt from filtering", d.count);
            }
            (k, d)
        })
        .collect();

    let threshold = chi2_threshold(tau_quantile);
    let mut verdicts: Vec<QaVerdict> = sample_ids
        .iter()
        .map(|id| QaVerdict {
            sample_id: id.clone(),
            per_class_distance_sq: BTreeMap::new(),
            flagged_classes: ClassSet::default(),
            keep: true,
        })
        .collect();
    let mut distance_sq = Vec::with_capacity(features.len());
    let mut flagged = Vec::with_capacity(features.len());
    let mut flagged_by_sample: Vec<Vec<ClassIndex>> = vec![Vec::new(); sample_ids.len()];
    for f in &features {
        let dist = &distributions[&f.class_k];
        let d2 = if dist.usable {
            mahalanobis_sq(f.z.expect("projected"), dist)
        } else {
            f64::NAN
        };
        let is_flagged = f.provenance == Provenance::Pseudo && dist.usable && d2 > threshold;
        distance_sq.push(d2);
        flagged.push(is_flagged);
        if f.provenance == Provenance::Pseudo {
            let v = verdicts
                .get_mut(f.sample)
                .ok_or_else(|| Error::Invalid(format!("feature refers to unknown sample {}", f.sample)))?;
            if d2.is_finite() {
                v.per_class_distance_sq.insert(f.class_k, d2);
            }
            if is_flagged {
                flagged_by_sample[f.sample].push(f.class_k);
            }
        }
    }
    for (v, ks) in verdicts.iter_mut().zip(flagged_by_sample) {
        v.flagged_classes = ClassSet::from_iter(ks);
        v.keep = v.flagged_classes.is_empty();
    }
    Ok(Assessment {
        features,
        distance_sq,
        flagged,
        projector,
        distributions,
        threshold,
        verdicts,
    })
}

/// Full assessment of a pseudo dataset with the given model's features.
pub fn assess(
    samples: &[PseudoSample],
    model: &SegModel,
    tau_quantile: f64,
    par: Parallelism,
) -> Result<Assessment> {
    let features = extract_features(model, samples, par)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    assess_features(features, &ids, tau_quantile)
}

/// Keep the samples whose verdict says so. The result may be empty.
pub fn filter(samples: Vec<PseudoSample>, verdicts: &[QaVerdict]) -> Result<Vec<PseudoSample>> {
    if samples.len() != verdicts.len() {
        return Err(Error::Invalid(format!(
            "{} verdicts for {} samples",
            verdicts.len(),
            samples.len()
        )));
    }
    Ok(samples
        .into_iter()
        .zip(verdicts)
        .filter(|(_, v)| v.keep)
        .map(|(s, _)| s)
        .collect())
}

/// Pearson correlation; `None` for fewer than 3 pairs or zero variance.
pub fn pearson_corr(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n != ys.len() || n < 3 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

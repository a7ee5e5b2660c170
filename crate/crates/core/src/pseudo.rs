//! Pseudo labels and the pseudo multi-organ training set.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::grid::{ClassIndex, ClassSet, GridImage, LabelMap, PartialDataset, ProbMap, Split};
use crate::io::{read_image, read_labels, read_text, write_image, write_labels, write_text};
use crate::model::SegModel;

/// A training image whose label covers every class: ground truth for the
/// classes its dataset annotates, model predictions for the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSample {
    pub id: String,
    pub dataset: String,
    pub image: GridImage,
    /// Merged label y'.
    pub label: LabelMap,
    /// The original partial annotation.
    pub gt: LabelMap,
    pub gt_classes: ClassSet,
    pub pseudo_classes: ClassSet,
    pub source_iteration: usize,
    pub oracle: Option<LabelMap>,
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn argmax_labels(probs: &ProbMap) -> LabelMap {
    let n = probs.pixels();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            let mut best_p = probs.get(0, i);
            for c in 1..probs.classes() {
                let p = probs.get(c, i);
                if p > best_p {
                    best = c;
                    best_p = p;
                }
            }
            best as ClassIndex
        })
        .collect();
    LabelMap::new(probs.height(), probs.width(), labels).expect("shape from prob map")
}

pub fn predict_labels(model: &SegModel, image: &GridImage) -> Result<LabelMap> {
    Ok(argmax_labels(&model.forward(image)?.probs))
}

/// Ground truth wins wherever it is foreground; elsewhere only predictions of
/// unannotated classes survive.
pub fn merge_with_gt(pseudo: &LabelMap, gt: &LabelMap, annotated: &ClassSet) -> Result<LabelMap> {
    if !pseudo.same_shape(gt.height(), gt.width()) {
        return Err(Error::Shape("pseudo label and ground truth differ in shape".into()));
    }
    let labels = pseudo
        .labels()
        .iter()
        .zip(gt.labels())
        .map(|(&p, &g)| {
            if g != 0 {
                g
            } else if p != 0 && !annotated.contains(p) {
                p
            } else {
                0
            }
        })
        .collect();
    LabelMap::new(gt.height(), gt.width(), labels)
}

/// Pseudo-label every training sample of every dataset with `model`.
pub fn build_pseudo_dataset(
    model: &SegModel,
    datasets: &[PartialDataset],
    iteration: usize,
    par: Parallelism,
) -> Result<Vec<PseudoSample>> {
    let total = model.arch().classes - 1;
    let mut out = Vec::new();
    for d in datasets.iter().filter(|d| d.split == Split::Train) {
        let pseudo_classes = d.annotated.complement(total);
        let built = par.map(&d.samples, |s| -> Result<PseudoSample> {
            let pred = predict_labels(model, &s.image)?;
            Ok(PseudoSample {
                id: s.id.clone(),
                dataset: d.name.clone(),
                image: s.image.clone(),
                label: merge_with_gt(&pred, &s.label, &d.annotated)?,
                gt: s.label.clone(),
                gt_classes: d.annotated.clone(),
                pseudo_classes: pseudo_classes.clone(),
                source_iteration: iteration,
                oracle: s.oracle.clone(),
            })
        });
        for s in built {
            out.push(s?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PseudoEntry {
    id: String,
    dataset: String,
    image: PathBuf,
    label: PathBuf,
    gt: PathBuf,
    gt_classes: ClassSet,
    pseudo_classes: ClassSet,
    source_iteration: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PseudoManifest {
    schema_version: u32,
    samples: Vec<PseudoEntry>,
}

/// Write rasters under `dir` plus `dir/pseudo.json`.
pub fn save_pseudo_dataset(dir: &Path, samples: &[PseudoSample]) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let stem = PathBuf::from(&s.dataset);
        let image = stem.join(format!("{}.image.grid", s.id));
        let label = stem.join(format!("{}.merged.grid", s.id));
        let gt = stem.join(format!("{}.gt.grid", s.id));
        write_image(&dir.join(&image), &s.image)?;
        write_labels(&dir.join(&label), &s.label)?;
        write_labels(&dir.join(&gt), &s.gt)?;
        entries.push(PseudoEntry {
            id: s.id.clone(),
            dataset: s.dataset.clone(),
            image,
            label,
            gt,
            gt_classes: s.gt_classes.clone(),
            pseudo_classes: s.pseudo_classes.clone(),
            source_iteration: s.source_iteration,
        });
    }
    let path = dir.join("pseudo.json");
    let m = PseudoManifest {
        schema_version: 1,
        samples: entries,
    };
    write_text(&path, &(serde_json::to_string_pretty(&m)? + "\n"))?;
    Ok(path)
}

pub fn load_pseudo_dataset(path: &Path) -> Result<Vec<PseudoSample>> {
    let m: PseudoManifest = serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    m.samples
        .into_iter()
        .map(|e| {
            Ok(PseudoSample {
                image: read_image(&base.join(&e.image))?,
                label: read_labels(&base.join(&e.label))?,
                gt: read_labels(&base.join(&e.gt))?,
                id: e.id,
                dataset: e.dataset,
                gt_classes: e.gt_classes,
                pseudo_classes: e.pseudo_classes,
                source_iteration: e.source_iteration,
                oracle: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(v: &[u8]) -> LabelMap {
        LabelMap::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_probs_predict_background() {
        assert_eq!(argmax_labels(&ProbMap::uniform(4, 2, 3)), LabelMap::filled(2, 3, 0));
    }

    #[test]
    fn one_hot_roundtrip() {
        let l = lm(&[0, 3, 1, 2, 2]);
        assert_eq!(argmax_labels(&ProbMap::one_hot(&l, 4)), l);
    }

    #[test]
    fn merge_rules() {
        let annotated = ClassSet::from_iter([1]);
        let pseudo = lm(&[2, 1, 2, 0, 3]);
        let empty = lm(&[0, 0, 0, 0, 0]);
        // gt empty: pseudo restricted to unannotated classes
        assert_eq!(merge_with_gt(&pseudo, &empty, &annotated).unwrap(), lm(&[2, 0, 2, 0, 3]));
        // pseudo empty: gt
        let gt = lm(&[1, 1, 0, 0, 0]);
        assert_eq!(merge_with_gt(&empty, &gt, &annotated).unwrap(), gt);
        // conflict: gt wins
        let merged = merge_with_gt(&pseudo, &gt, &annotated).unwrap();
        assert_eq!(merged.labels()[0], 1);
        assert_eq!(merged, lm(&[1, 1, 2, 0, 3]));
        assert_eq!(merge_with_gt(&merged, &gt, &annotated).unwrap(), merged);
    }
}

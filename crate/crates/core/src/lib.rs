//! Partial-label multi-organ segmentation.
//!
//! A unified multi-class segmenter is trained from several partially labeled
//! datasets in two stages. Stage one uses only ground-truth supervision: a
//! marginal loss over channel-merged predictions plus an exclusion loss that
//! keeps unlabeled organs off the labeled union mask. Stage two self-trains on
//! pseudo labels, dropping every image whose pseudo-labeled organs look like
//! outliers (squared Mahalanobis distance in a PCA-reduced feature space,
//! thresholded at a chi-squared quantile).
//!
//! Everything runs on small 2D rasters with a hand-differentiated network, so
//! whole experiments finish in seconds to minutes on a desktop CPU.

pub mod error;
pub mod exec;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pseudo;
pub mod qa;
pub mod seed;
pub mod selftrain;
pub mod synth;

pub use error::{Error, Result};
pub use exec::Parallelism;
pub use grid::{
    BinaryMask, ClassCatalog, ClassSet, GridImage, LabelMap, PartialDataset, ProbMap, Sample,
    Split,
};

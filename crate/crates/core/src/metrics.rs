//! Segmentation metrics and the paired signed-rank test.
//!
//! Distances are in pixel units. A class is only scored on samples whose
//! dataset annotates it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::grid::{BinaryMask, ClassIndex, LabelMap, PartialDataset};

/// `2|P∩G| / (|P|+|G|)`, 1 when both are empty.
pub fn dice_binary(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    assert!(
        pred.same_shape(gt),
        "dice_binary: shape mismatch"
    );
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.bits().iter().zip(gt.bits()) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// Mask pixels with at least one 4-neighbour outside the mask or the grid.
pub fn boundary_points(mask: &BinaryMask) -> Vec<(i64, i64)> {
    let (h, w) = (mask.height(), mask.width());
    let inside = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask.get(r as usize, c as usize)
    };
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            if !inside(ri - 1, ci) || !inside(ri + 1, ci) || !inside(ri, ci - 1) || !inside(ri, ci + 1) {
                out.push((r as i64, c as i64));
            }
        }
    }
    out
}

fn directed(from: &[(i64, i64)], to: &[(i64, i64)]) -> Vec<f64> {
    from.iter()
        .map(|&(r, c)| {
            let best = to
                .iter()
                .map(|&(r2, c2)| (r - r2).pow(2) + (c - c2).pow(2))
                .min()
                .expect("nonempty boundary");
            (best as f64).sqrt()
        })
        .collect()
}

/// Linear-interpolation percentile, inclusive of both ends.
pub fn percentile_inclusive(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// `(asd, hd95)` between mask boundaries; `None` if either mask is empty.
pub fn surface_distances(pred: &BinaryMask, gt: &BinaryMask) -> Option<(f64, f64)> {
    assert!(
        pred.same_shape(gt),
        "surface_distances: shape mismatch"
    );
    let bp = boundary_points(pred);
    let bg = boundary_points(gt);
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let pg = directed(&bp, &bg);
    let gp = directed(&bg, &bp);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let asd = (mean(&pg) + mean(&gp)) / 2.0;
    let mut pooled = pg;
    pooled.extend(gp);
    Some((asd, percentile_inclusive(&mut pooled, 0.95)))
}

/// One (sample, class) evaluation. Metrics are `None` when the class is not
/// evaluable for the sample, or (distances only) when a mask is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample_id: String,
    pub class_k: ClassIndex,
    pub evaluable: bool,
    pub dice: Option<f64>,
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
}

pub fn evaluate_labels(
    sample_id: &str,
    pred: &LabelMap,
    gt: &LabelMap,
    annotated: &crate::grid::ClassSet,
    total_classes: usize,
) -> Vec<EvalRow> {
    (1..=total_classes as ClassIndex)
        .map(|k| {
            let evaluable = annotated.contains(k);
            let (dice, asd, hd95) = if evaluable {
                let (p, g) = (pred.mask_of(k), gt.mask_of(k));
                let sd = surface_distances(&p, &g);
                (Some(dice_binary(&p, &g)), sd.map(|s| s.0), sd.map(|s| s.1))
            } else {
                (None, None, None)
            };
            EvalRow {
                sample_id: sample_id.to_string(),
                class_k: k,
                evaluable,
                dice,
                asd,
                hd95,
            }
        })
        .collect()
}

/// Evaluate `predict` on every sample of every dataset.
pub fn evaluate_datasets<F>(
    datasets: &[PartialDataset],
    total_classes: usize,
    par: Parallelism,
    predict: F,
) -> Result<Vec<EvalRow>>
where
    F: Fn(&crate::grid::GridImage) -> Result<LabelMap> + Sync,
{
    let mut rows = Vec::new();
    for d in datasets {
        let per = par.map(&d.samples, |s| -> Result<Vec<EvalRow>> {
            let pred = predict(&s.image)?;
            Ok(evaluate_labels(&s.id, &pred, &s.label, &d.annotated, total_classes))
        });
        for r in per {
            rows.extend(r?);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class_k: ClassIndex,
    pub evaluable_rows: usize,
    pub dice_mean: f64,
    pub asd_mean: Option<f64>,
    pub hd95_mean: Option<f64>,
    /// Evaluable rows whose surface distances are undefined.
    pub undefined_surface: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Only classes with at least one evaluable row appear.
    pub classes: Vec<ClassSummary>,
    pub absent_classes: Vec<ClassIndex>,
    pub grand_dice: Option<f64>,
    pub grand_asd: Option<f64>,
    pub grand_hd95: Option<f64>,
    pub undefined_surface: usize,
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn summarize(rows: &[EvalRow]) -> EvalSummary {
    let mut by_class: BTreeMap<ClassIndex, Vec<&EvalRow>> = BTreeMap::new();
    for r in rows {
        by_class.entry(r.class_k).or_default().push(r);
    }
    let mut classes = Vec::new();
    let mut absent = Vec::new();
    for (k, rs) in by_class {
        let ev: Vec<&EvalRow> = rs.into_iter().filter(|r| r.evaluable).collect();
        let Some(dice_mean) = mean_of(ev.iter().filter_map(|r| r.dice)) else {
            absent.push(k);
            continue;
        };
        classes.push(ClassSummary {
            class_k: k,
            evaluable_rows: ev.len(),
            dice_mean,
            asd_mean: mean_of(ev.iter().filter_map(|r| r.asd)),
            hd95_mean: mean_of(ev.iter().filter_map(|r| r.hd95)),
            undefined_surface: ev.iter().filter(|r| r.asd.is_none()).count(),
        });
    }
    EvalSummary {
        grand_dice: mean_of(classes.iter().map(|c| c.dice_mean)),
        grand_asd: mean_of(classes.iter().filter_map(|c| c.asd_mean)),
        grand_hd95: mean_of(classes.iter().filter_map(|c| c.hd95_mean)),
        undefined_surface: classes.iter().map(|c| c.undefined_surface).sum(),
        absent_classes: absent,
        classes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences `x - y`.
    pub statistic: f64,
    pub p_value: f64,
    pub method: WilcoxonMethod,
    /// Pairs left after dropping zero differences.
    pub n: usize,
}

/// Largest sample size handled by exact enumeration in [`wilcoxon_signed_rank`].
pub const WILCOXON_EXACT_MAX: usize = 12;

/// Two-sided signed-rank test, exact for small samples.
pub fn wilcoxon_signed_rank(xs: &[f64], ys: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_with(xs, ys, None)
}

/// Like [`wilcoxon_signed_rank`] but with the method forced.
pub fn wilcoxon_with(xs: &[f64], ys: &[f64], force: Option<WilcoxonMethod>) -> Result<WilcoxonResult> {
    if xs.len() != ys.len() {
        return Err(Error::Invalid("wilcoxon: unpaired inputs".into()));
    }
    let diffs: Vec<f64> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            p_value: 1.0,
            method: WilcoxonMethod::Degenerate,
            n,
        });
    }
    if n < 5 {
        return Err(Error::Invalid(format!(
            "wilcoxon: need at least 5 nonzero differences, got {n}"
        )));
    }
    // Doubled average ranks stay integral.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).expect("finite"));
    let mut rank2 = vec![0u64; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let r2 = (i + 1 + j + 1) as u64;
        for &o in &order[i..=j] {
            rank2[o] = r2;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let w2: u64 = (0..n).filter(|&i| diffs[i] > 0.0).map(|i| rank2[i]).sum();
    let statistic = w2 as f64 / 2.0;
    let method = force.unwrap_or(if n <= WILCOXON_EXACT_MAX {
        WilcoxonMethod::Exact
    } else {
        WilcoxonMethod::Normal
    });
    let p_value = match method {
        WilcoxonMethod::Exact => {
            if n > 24 {
                return Err(Error::Invalid(format!("wilcoxon: exact enumeration too large (n={n})")));
            }
            let total = 1u64 << n;
            let (mut le, mut ge) = (0u64, 0u64);
            for pattern in 0..total {
                let s: u64 = (0..n).filter(|b| pattern >> b & 1 == 1).map(|b| rank2[b]).sum();
                le += (s <= w2) as u64;
                ge += (s >= w2) as u64;
            }
            (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
        }
        WilcoxonMethod::Normal => {
            let nf = n as f64;
            let mean = nf * (nf + 1.0) / 4.0;
            let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
            if var <= 0.0 {
                1.0
            } else {
                let z = ((statistic - mean).abs() - 0.5).max(0.0) / var.sqrt();
                let normal = Normal::standard();
                (2.0 * (1.0 - normal.cdf(z))).min(1.0)
            }
        }
        WilcoxonMethod::Degenerate => 1.0,
    };
    Ok(WilcoxonResult {
        statistic,
        p_value,
        method,
        n,
    })
}

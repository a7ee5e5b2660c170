//! Supervision signals as differentiable losses over a [`ProbMap`].
//!
//! * marginal loss: unannotated class planes are summed into background and the
//!   merged prediction is scored with Dice + cross-entropy against the partial
//!   label;
//! * exclusion loss: soft-Dice overlap between each unannotated class plane and
//!   the union mask of the annotated organs, which must be disjoint from it;
//! * full-label loss: plain Dice + cross-entropy over every class, used on
//!   merged pseudo labels.
//!
//! Every function returns `dL/dprobs` alongside the value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{union_mask, BinaryMask, ClassIndex, ClassSet, LabelMap, ProbMap};

/// Smoothing term in every soft-Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

/// Probabilities are clamped here before the logarithm.
pub const CE_CLAMP: f64 = 1e-12;

/// Sum unannotated class planes into background.
///
/// Output planes: merged background, then annotated classes in ascending order.
pub fn merge_channels(probs: &ProbMap, annotated: &ClassSet) -> ProbMap {
    let n = probs.pixels();
    let mut out = vec![0.0; (1 + annotated.len()) * n];
    let (bg, rest) = out.split_at_mut(n);
    for c in 0..probs.classes() {
        let plane = probs.plane(c);
        let dst = match annotated.position(c as ClassIndex) {
            Some(pos) if c != 0 => &mut rest[pos * n..(pos + 1) * n],
            _ => &mut *bg,
        };
        for (d, &p) in dst.iter_mut().zip(plane) {
            *d += p;
        }
    }
    ProbMap::from_raw(1 + annotated.len(), probs.height(), probs.width(), out)
        .expect("shape derived from input")
}

/// `(2 sum p t + eps) / (sum p + sum t + eps)` and its gradient w.r.t. `p`.
pub fn dice_overlap(p: &[f64], t: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(p.len(), t.len());
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for (&pi, &ti) in p.iter().zip(t) {
        inter += pi * ti;
        sp += pi;
        st += ti;
    }
    let num = 2.0 * inter + DICE_EPS;
    let den = sp + st + DICE_EPS;
    let den2 = den * den;
    let grad = t.iter().map(|&ti| (2.0 * ti * den - num) / den2).collect();
    (num / den, grad)
}

/// Soft Dice loss `1 - overlap(p, t)` with its gradient.
pub fn soft_dice_loss(p: &[f64], t: &[f64]) -> (f64, Vec<f64>) {
    let (s, mut g) = dice_overlap(p, t);
    for v in &mut g {
        *v = -*v;
    }
    (1.0 - s, g)
}

/// Mean over pixels of `-ln p[remap[label]]`.
///
/// `remap[l]` is the channel holding label `l`. Returns the loss, the gradient
/// and whether any target probability had to be clamped.
pub fn cross_entropy_loss(
    probs: &ProbMap,
    target: &LabelMap,
    remap: &[usize],
) -> Result<(f64, Vec<f64>, bool)> {
    let n = probs.pixels();
    if !target.same_shape(probs.height(), probs.width()) {
        return Err(Error::Shape("cross-entropy target shape mismatch".into()));
    }
    let mut grad = vec![0.0; probs.classes() * n];
    let mut loss = 0.0;
    let mut saturated = false;
    let inv_n = 1.0 / n as f64;
    for (i, &l) in target.labels().iter().enumerate() {
        let c = *remap
            .get(l as usize)
            .filter(|&&c| c < probs.classes())
            .ok_or_else(|| Error::Invalid(format!("label {l} has no channel in remap")))?;
        let p = probs.get(c, i);
        if p < CE_CLAMP {
            saturated = true;
            loss -= CE_CLAMP.ln();
        } else {
            loss -= p.ln();
            grad[c * n + i] = -inv_n / p;
        }
    }
    Ok((loss * inv_n, grad, saturated))
}

/// Sum over unannotated classes of soft-Dice overlap with `mask`.
///
/// Minimizing this is the same problem as maximizing the Dice loss of those
/// planes against the mask; it differs from that by the constant `|C_u|`.
/// Returns 0 when every class is annotated or the mask is empty.
pub fn exclusion_loss(
    probs: &ProbMap,
    annotated: &ClassSet,
    mask: &BinaryMask,
) -> Result<(f64, Vec<f64>)> {
    let n = probs.pixels();
    if mask.height() != probs.height() || mask.width() != probs.width() {
        return Err(Error::Shape("exclusion mask shape mismatch".into()));
    }
    let mut grad = vec![0.0; probs.classes() * n];
    if mask.is_empty() {
        return Ok((0.0, grad));
    }
    let m = mask.to_plane();
    let mut term = 0.0;
    for u in 1..probs.classes() {
        if annotated.contains(u as ClassIndex) {
            continue;
        }
        let (s, g) = dice_overlap(probs.plane(u), &m);
        term += s;
        grad[u * n..(u + 1) * n].copy_from_slice(&g);
    }
    Ok((term, grad))
}

/// Relative weights of the stage-one terms. Zeroing `exclusion` gives the
/// marginal-only objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub marginal: f64,
    pub exclusion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            marginal: 1.0,
            exclusion: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub marginal_term: f64,
    pub exclusion_term: f64,
    /// Dice loss of each foreground channel of the merged prediction.
    pub per_class_dice_terms: Vec<f64>,
    pub saturated: bool,
}

/// Dice (mean over foreground channels) + cross-entropy on a merged prediction.
/// Returns (dice part, per-class dice, ce, saturation, gradient w.r.t. merged).
fn dice_ce(merged: &ProbMap, label: &LabelMap, annotated: &ClassSet) -> Result<(f64, Vec<f64>, f64, bool, Vec<f64>)> {
    let n = merged.pixels();
    let mut remap = vec![0usize; 256];
    for k in annotated.iter() {
        remap[k as usize] = annotated.position(k).expect("member") + 1;
    }
    for &l in label.labels() {
        if l != 0 && !annotated.contains(l) {
            return Err(Error::Invalid(format!("label {l} is not annotated in {annotated}")));
        }
    }
    let (ce, mut grad, saturated) = cross_entropy_loss(merged, label, &remap)?;
    let fg = annotated.len();
    let mut per_class = Vec::with_capacity(fg);
    let mut dice = 0.0;
    for (pos, k) in annotated.iter().enumerate() {
        let target = label.mask_of(k).to_plane();
        let c = pos + 1;
        let (l, g) = soft_dice_loss(merged.plane(c), &target);
        per_class.push(l);
        dice += l / fg as f64;
        for (d, gv) in grad[c * n..(c + 1) * n].iter_mut().zip(g) {
            *d += gv / fg as f64;
        }
    }
    Ok((dice, per_class, ce, saturated, grad))
}

/// Stage-one objective: marginal loss on channel-merged predictions plus the
/// exclusion loss of unannotated classes against the label's union mask.
pub fn stage1_loss(
    probs: &ProbMap,
    label: &LabelMap,
    annotated: &ClassSet,
    weights: LossWeights,
) -> Result<(LossReport, Vec<f64>)> {
    if annotated.is_empty() {
        return Err(Error::Invalid("annotated class set is empty".into()));
    }
    if !label.same_shape(probs.height(), probs.width()) {
        return Err(Error::Shape("label shape does not match prob map".into()));
    }
    let n = probs.pixels();
    let merged = merge_channels(probs, annotated);
    let (dice, per_class, ce, saturated, gmerged) = dice_ce(&merged, label, annotated)?;

    let mut grad = vec![0.0; probs.classes() * n];
    for c in 0..probs.classes() {
        let src = match annotated.position(c as ClassIndex) {
            Some(pos) if c != 0 => pos + 1,
            _ => 0,
        };
        for (d, &g) in grad[c * n..(c + 1) * n].iter_mut().zip(&gmerged[src * n..(src + 1) * n]) {
            *d = weights.marginal * g;
        }
    }

    let (excl, gexcl) = exclusion_loss(probs, annotated, &union_mask(label))?;
    if weights.exclusion != 0.0 {
        for (d, g) in grad.iter_mut().zip(gexcl) {
            *d += weights.exclusion * g;
        }
    }
    let marginal_term = weights.marginal * (dice + ce);
    let exclusion_term = weights.exclusion * excl;
    Ok((
        LossReport {
            total: marginal_term + exclusion_term,
            marginal_term,
            exclusion_term,
            per_class_dice_terms: per_class,
            saturated,
        },
        grad,
    ))
}

/// Dice + cross-entropy over all `1 + C` channels against a fully populated label.
pub fn fulllabel_loss(probs: &ProbMap, label: &LabelMap) -> Result<(LossReport, Vec<f64>)> {
    let all = ClassSet::all(probs.classes() - 1);
    stage1_loss(probs, label, &all, LossWeights::default())
}

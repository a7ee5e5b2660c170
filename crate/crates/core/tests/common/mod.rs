//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use partseg::model::Arch;
use partseg::grid::ClassIndex;
use partseg::{BinaryMask, ClassSet, GridImage, LabelMap, ProbMap};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct-loop forward pass: returns (last feature planes, softmax planes).
pub fn naive_forward(arch: &Arch, params: &[f64], img: &GridImage) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let k = arch.kernel as i64;
    let r = k / 2;
    let mut input: Vec<f64> = img.values().to_vec();
    let mut in_c = arch.in_channels;
    let mut off = 0;
    for _ in 0..arch.conv_layers {
        let m = arch.features;
        let wlen = m * in_c * (k * k) as usize;
        let weights = &params[off..off + wlen];
        let bias = &params[off + wlen..off + wlen + m];
        off += wlen + m;
        let mut out = vec![0.0; m * n];
        for o in 0..m {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let mut acc = bias[o];
                    for i in 0..in_c {
                        for dy in 0..k {
                            for dx in 0..k {
                                let (yy, xx) = (y + dy - r, x + dx - r);
                                if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                                    continue;
                                }
                                let wi = ((o * in_c + i) * k as usize + dy as usize) * k as usize + dx as usize;
                                acc += weights[wi] * input[i * n + (yy as usize) * w + xx as usize];
                            }
                        }
                    }
                    out[o * n + y as usize * w + x as usize] = acc.tanh();
                }
            }
        }
        input = out;
        in_c = m;
    }
    let c = arch.classes;
    let wc = &params[off..off + c * in_c];
    let bc = &params[off + c * in_c..off + c * in_c + c];
    let mut probs = vec![0.0; c * n];
    for p in 0..n {
        let logits: Vec<f64> = (0..c)
            .map(|j| bc[j] + (0..in_c).map(|i| wc[j * in_c + i] * input[i * n + p]).sum::<f64>())
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for j in 0..c {
            probs[j * n + p] = (logits[j] - mx).exp() / z;
        }
    }
    (input, probs)
}

/// Central finite differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> GridImage {
    GridImage::new(1, h, w, (0..h * w).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

pub fn random_labels(rng: &mut impl Rng, h: usize, w: usize, classes: &[ClassIndex]) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| classes[rng.random_range(0..classes.len())]).collect()).unwrap()
}

pub fn random_probs(rng: &mut impl Rng, classes: usize, h: usize, w: usize) -> ProbMap {
    let n = h * w;
    let raw: Vec<f64> = (0..classes * n).map(|_| rng.random_range(0.01..1.0)).collect();
    let mut probs = vec![0.0; classes * n];
    for p in 0..n {
        let s: f64 = (0..classes).map(|c| raw[c * n + p]).sum();
        for c in 0..classes {
            probs[c * n + p] = raw[c * n + p] / s;
        }
    }
    ProbMap::new(classes, h, w, probs).unwrap()
}

/// Random non-empty proper-or-full subset of `1..=total`.
pub fn random_annotated(rng: &mut impl Rng, total: usize) -> ClassSet {
    loop {
        let s = ClassSet::from_iter((1..=total as ClassIndex).filter(|_| rng.random_bool(0.5)));
        if !s.is_empty() {
            return s;
        }
    }
}

/// Boundary pixels (row, col) in raster order: foreground with a background
/// or off-grid 4-neighbour.
pub fn brute_boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let fg = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && mask.get(y as usize, x as usize);
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

fn nearest(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| {
                    let (dy, dx) = (y as f64 - v as f64, x as f64 - u as f64);
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Inclusive linear-interpolation percentile.
pub fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// (ASD, HD95) by all-pairs search; `None` if either mask is empty.
pub fn brute_surface(pred: &BinaryMask, gt: &BinaryMask) -> Option<(f64, f64)> {
    let (bp, bg) = (brute_boundary(pred), brute_boundary(gt));
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let d_pg = nearest(&bp, &bg);
    let d_gp = nearest(&bg, &bp);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let asd = (mean(&d_pg) + mean(&d_gp)) / 2.0;
    let pooled: Vec<f64> = d_pg.iter().chain(&d_gp).copied().collect();
    Some((asd, percentile(pooled, 0.95)))
}

/// Two-sided exact signed-rank p value by listing every sign pattern, using
/// average ranks for tied magnitudes.
pub fn brute_wilcoxon(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    let ranks: Vec<f64> = d
        .iter()
        .map(|a| {
            let below = d.iter().filter(|b| b.abs() < a.abs()).count() as f64;
            let equal = d.iter().filter(|b| b.abs() == a.abs()).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let w: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let mu = n as f64 * (n as f64 + 1.0) / 4.0;
    let mut extreme = 0usize;
    for pattern in 0..(1usize << n) {
        let s: f64 = (0..n).filter(|b| pattern >> b & 1 == 1).map(|b| ranks[b]).sum();
        if (s - mu).abs() >= (w - mu).abs() - 1e-9 {
            extreme += 1;
        }
    }
    (w, extreme as f64 / (1usize << n) as f64)
}

/// Every mask on an `h x w` grid with at most `max_fg` foreground pixels.
pub fn mask_census(h: usize, w: usize, max_fg: usize) -> Vec<BinaryMask> {
    let n = h * w;
    (0u32..1 << n)
        .filter(|bits| bits.count_ones() as usize <= max_fg)
        .map(|bits| BinaryMask::new(h, w, (0..n).map(|i| bits >> i & 1 == 1).collect()).unwrap())
        .collect()
}

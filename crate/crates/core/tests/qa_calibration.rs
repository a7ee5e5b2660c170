mod common;

use common::*;
use partseg::qa::{assess_features, OrganFeature, Provenance};
use rand::Rng;
use rand_distr::StandardNormal;

const MEAN: [f64; 2] = [3.0, -1.0];
// Cholesky factor of the generating covariance
const CHOL: [[f64; 2]; 2] = [[2.0, 0.0], [0.9, 0.5]];

fn draw(r: &mut impl Rng) -> Vec<f64> {
    let e: [f64; 2] = [r.sample(StandardNormal), r.sample(StandardNormal)];
    vec![MEAN[0] + CHOL[0][0] * e[0], MEAN[1] + CHOL[1][0] * e[0] + CHOL[1][1] * e[1]]
}

fn feature(sample: usize, provenance: Provenance, z_raw: Vec<f64>) -> OrganFeature {
    OrganFeature {
        sample,
        sample_id: format!("s{sample}"),
        class_k: 1,
        provenance,
        z_raw,
        z: None,
    }
}

/// `gt` ground-truth features owned by sample 0, then one pseudo feature per
/// further sample.
fn population(seed: u64, gt: usize, pseudo: usize) -> (Vec<OrganFeature>, Vec<String>) {
    let mut r = rng(seed);
    let mut features: Vec<OrganFeature> = (0..gt).map(|_| feature(0, Provenance::GroundTruth, draw(&mut r))).collect();
    features.extend((1..=pseudo).map(|s| feature(s, Provenance::Pseudo, draw(&mut r))));
    let ids = (0..=pseudo).map(|s| format!("s{s}")).collect();
    (features, ids)
}

fn flag_rate(seed: u64, tau: f64, pseudo: usize) -> f64 {
    let (features, ids) = population(seed, 5000, pseudo);
    let a = assess_features(features, &ids, tau).unwrap();
    (a.verdicts.len() - a.kept()) as f64 / pseudo as f64
}

fn binomial_band(p: f64, n: f64) -> f64 {
    2.0 * (p * (1.0 - p) / n).sqrt()
}

#[test]
fn in_distribution_flag_rate_single_draw() {
    let rate = flag_rate(1, 0.999, 1000);
    assert!((rate - 0.001).abs() <= binomial_band(0.001, 1000.0), "rate {rate}");
}

#[test]
fn in_distribution_flag_rate_pooled() {
    for (tau, seeds) in [(0.999, 20u64), (0.95, 5)] {
        let rates: Vec<f64> = (0..seeds).map(|s| flag_rate(100 + s, tau, 1000)).collect();
        let pooled = rates.iter().sum::<f64>() / seeds as f64;
        let expect = 1.0 - tau;
        let band = binomial_band(expect, 1000.0 * seeds as f64);
        assert!((pooled - expect).abs() <= band, "tau {tau}: pooled {pooled}, band {band}");
    }
}

/// Squared distances computed directly from the raw ground-truth sample
/// moments, without any projection.
fn raw_mahalanobis(features: &[OrganFeature]) -> Vec<f64> {
    let gt: Vec<&Vec<f64>> = features.iter().filter(|f| f.provenance == Provenance::GroundTruth).map(|f| &f.z_raw).collect();
    let n = gt.len() as f64;
    let mu = [gt.iter().map(|v| v[0]).sum::<f64>() / n, gt.iter().map(|v| v[1]).sum::<f64>() / n];
    let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
    for v in &gt {
        let (x, y) = (v[0] - mu[0], v[1] - mu[1]);
        a += x * x;
        b += x * y;
        d += y * y;
    }
    let (a, b, d) = (a / (n - 1.0), b / (n - 1.0), d / (n - 1.0));
    let det = a * d - b * b;
    features
        .iter()
        .map(|f| {
            let (x, y) = (f.z_raw[0] - mu[0], f.z_raw[1] - mu[1]);
            (d * x * x - 2.0 * b * x * y + a * y * y) / det
        })
        .collect()
}

#[test]
fn distances_match_raw_moment_oracle() {
    for seed in 0..10 {
        let (features, ids) = population(seed, 50, 200);
        let expect = raw_mahalanobis(&features);
        let a = assess_features(features, &ids, 0.99).unwrap();
        for (got, want) in a.distance_sq.iter().zip(&expect) {
            assert!((got - want).abs() <= 1e-6 * want.max(1.0), "seed {seed}: {got} vs {want}");
        }
    }
}

fn condition_number(m: [[f64; 2]; 2]) -> f64 {
    // singular values from the eigenvalues of m^T m
    let p = m[0][0] * m[0][0] + m[1][0] * m[1][0];
    let q = m[0][0] * m[0][1] + m[1][0] * m[1][1];
    let s = m[0][1] * m[0][1] + m[1][1] * m[1][1];
    let tr = p + s;
    let disc = ((p - s) * (p - s) + 4.0 * q * q).sqrt();
    ((tr + disc) / (tr - disc)).sqrt()
}

#[test]
fn verdicts_are_affine_invariant_in_the_plane() {
    let mut r = rng(77);
    let mut tested = 0;
    while tested < 30 {
        let m = [[r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)], [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)]];
        if !(condition_number(m) < 1e3) {
            continue;
        }
        tested += 1;
        let shift = [r.random_range(-50.0..50.0), r.random_range(-50.0..50.0)];
        let (features, ids) = population(tested, 40, 120);
        let moved: Vec<OrganFeature> = features
            .iter()
            .map(|f| {
                let x = &f.z_raw;
                let y = vec![m[0][0] * x[0] + m[0][1] * x[1] + shift[0], m[1][0] * x[0] + m[1][1] * x[1] + shift[1]];
                feature(f.sample, f.provenance, y)
            })
            .collect();
        let a = assess_features(features, &ids, 0.95).unwrap();
        let b = assess_features(moved, &ids, 0.95).unwrap();
        // the covariance ridge is a fixed fraction of the mean eigenvalue, so
        // invariance holds up to that fraction of the smallest one
        let tol = [&a, &b]
            .iter()
            .map(|x| {
                let c = x.distributions[&1].cov;
                let tr = c[0][0] + c[1][1];
                let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
                let lmin = tr / 2.0 - (tr * tr / 4.0 - det).max(0.0).sqrt();
                1e-8 * tr / (2.0 * lmin)
            })
            .fold(0.0, f64::max)
            * 4.0
            + 1e-10;
        for (x, y) in a.distance_sq.iter().zip(&b.distance_sq) {
            assert!((x - y).abs() <= tol * x.max(1.0), "{x} vs {y}, tol {tol:e}");
        }
        let near_threshold = a.distance_sq.iter().any(|d| (d - a.threshold).abs() < 1e-6);
        if !near_threshold {
            assert_eq!(a.flagged, b.flagged);
        }
    }
}

#[test]
fn rotations_and_scaling_of_higher_dimensional_features_are_invisible() {
    let mut r = rng(5);
    for seed in 0..10 {
        // 4-d features whose spread lives in the first two coordinates
        let (base, ids) = population(200 + seed, 40, 80);
        let lift = |v: &[f64], r: &mut rand_chacha::ChaCha8Rng| vec![v[0], v[1], 0.01 * r.sample::<f64, _>(StandardNormal), 0.01 * r.sample::<f64, _>(StandardNormal)];
        let features: Vec<OrganFeature> = base.iter().map(|f| feature(f.sample, f.provenance, lift(&f.z_raw, &mut r))).collect();
        // random orthogonal map from Gram-Schmidt, then uniform scale and shift
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < 4 {
            let mut v: Vec<f64> = (0..4).map(|_| r.sample(StandardNormal)).collect();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-3 {
                q.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        let scale = r.random_range(0.1..10.0);
        let moved: Vec<OrganFeature> = features
            .iter()
            .map(|f| {
                let y = q.iter().enumerate().map(|(i, row)| scale * row.iter().zip(&f.z_raw).map(|(a, b)| a * b).sum::<f64>() + i as f64).collect();
                feature(f.sample, f.provenance, y)
            })
            .collect();
        let a = assess_features(features, &ids, 0.95).unwrap();
        let b = assess_features(moved, &ids, 0.95).unwrap();
        for (x, y) in a.distance_sq.iter().zip(&b.distance_sq) {
            assert!((x - y).abs() <= 1e-6 * x.max(1.0), "seed {seed}: {x} vs {y}");
        }
    }
}

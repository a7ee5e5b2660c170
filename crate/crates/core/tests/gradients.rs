mod common;

use common::*;
use partseg::losses::{fulllabel_loss, stage1_loss, LossWeights};
use partseg::model::{Arch, SegModel};
use partseg::{ClassSet, GridImage, LabelMap, ProbMap};
use rand::Rng;

const TOTAL: usize = 3;

fn arch() -> Arch {
    Arch {
        in_channels: 1,
        features: 3,
        classes: TOTAL + 1,
        kernel: 3,
        conv_layers: 2,
    }
}

fn random_model(rng: &mut impl Rng) -> SegModel {
    let a = arch();
    SegModel::from_params(a, (0..a.param_count()).map(|_| rng.random_range(-0.8..0.8)).collect()).unwrap()
}

/// A partial label for `annotated` plus the image it belongs to.
fn instance(seed: u64, h: usize, w: usize) -> (GridImage, LabelMap, ClassSet, SegModel) {
    let mut r = rng(seed);
    let annotated = random_annotated(&mut r, TOTAL);
    let mut classes = vec![0];
    classes.extend(annotated.iter());
    let label = random_labels(&mut r, h, w, &classes);
    (random_image(&mut r, h, w), label, annotated, random_model(&mut r))
}

fn params_loss<'a>(model: &SegModel, img: &GridImage, f: &'a dyn Fn(&ProbMap) -> f64) -> impl Fn(&[f64]) -> f64 + 'a {
    let arch = *model.arch();
    let img = img.clone();
    move |p: &[f64]| {
        let m = SegModel::from_params(arch, p.to_vec()).unwrap();
        f(&m.forward(&img).unwrap().probs)
    }
}

#[test]
fn stage1_parameter_gradients_match_finite_differences() {
    for seed in 0..24 {
        let (img, label, annotated, model) = instance(seed, 6, 6);
        let fwd = model.forward(&img).unwrap();
        let (_, gp) = stage1_loss(&fwd.probs, &label, &annotated, LossWeights::default()).unwrap();
        let analytic = model.backward(&img, &fwd, &gp).unwrap();
        let loss = |p: &ProbMap| stage1_loss(p, &label, &annotated, LossWeights::default()).unwrap().0.total;
        let numeric = numeric_grad(params_loss(&model, &img, &loss), model.params(), 1e-5);
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn fulllabel_parameter_gradients_match_finite_differences() {
    for seed in 100..124 {
        let mut r = rng(seed);
        let label = random_labels(&mut r, 6, 6, &[0, 1, 2, 3]);
        let img = random_image(&mut r, 6, 6);
        let model = random_model(&mut r);
        let fwd = model.forward(&img).unwrap();
        let (_, gp) = fulllabel_loss(&fwd.probs, &label).unwrap();
        let analytic = model.backward(&img, &fwd, &gp).unwrap();
        let loss = |p: &ProbMap| fulllabel_loss(p, &label).unwrap().0.total;
        let numeric = numeric_grad(params_loss(&model, &img, &loss), model.params(), 1e-5);
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn loss_gradients_wrt_probabilities() {
    for seed in 200..230 {
        let mut r = rng(seed);
        let probs = random_probs(&mut r, TOTAL + 1, 6, 6);
        let annotated = random_annotated(&mut r, TOTAL);
        let mut classes = vec![0];
        classes.extend(annotated.iter());
        let label = random_labels(&mut r, 6, 6, &classes);
        let weights = LossWeights {
            marginal: r.random_range(0.2..2.0),
            exclusion: r.random_range(0.0..2.0),
        };
        let (_, analytic) = stage1_loss(&probs, &label, &annotated, weights).unwrap();
        let f = |p: &[f64]| {
            // steps stay inside the simplex tolerance
            let pm = ProbMap::new(TOTAL + 1, 6, 6, p.to_vec()).unwrap();
            stage1_loss(&pm, &label, &annotated, weights).unwrap().0.total
        };
        let numeric = numeric_grad(f, probs.probs(), 1e-7);
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-5, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn forward_matches_direct_loops() {
    for seed in 0..6 {
        let mut r = rng(1000 + seed);
        let a = Arch {
            in_channels: 2,
            features: 4,
            classes: 5,
            kernel: if seed % 2 == 0 { 3 } else { 5 },
            conv_layers: 1 + seed as usize % 3,
        };
        let params: Vec<f64> = (0..a.param_count()).map(|_| r.random_range(-1.0..1.0)).collect();
        let img = GridImage::new(2, 8, 8, (0..128).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let model = SegModel::from_params(a, params.clone()).unwrap();
        let fwd = model.forward(&img).unwrap();
        let (features, probs) = naive_forward(&a, &params, &img);
        let max_diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_diff(fwd.features(), &features) < 1e-12, "features, seed {seed}");
        assert!(max_diff(fwd.probs.probs(), &probs) < 1e-12, "probs, seed {seed}");
    }
}

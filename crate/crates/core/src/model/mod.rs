//! A small fully convolutional segmenter with hand-derived gradients.
//!
//! The network splits into a dense feature extractor (a stack of same-padded
//! `k x k` convolutions, each followed by `tanh`) and a per-pixel classifier
//! (a 1x1 convolution to `1 + C` logits and a softmax). The extractor's last
//! activation is the feature raster used for pseudo-label assessment.
//!
//! Parameters live in one flat vector so the optimizer, the checkpoint format
//! and the finite-difference checks can treat them uniformly.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use optim::{poly_lr, sgd_step, Stage, TrainState, DEFAULT_MOMENTUM, POLY_EXPONENT};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridImage, ProbMap};
use crate::seed;

/// Architecture descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub in_channels: usize,
    /// Feature planes `m` produced by the extractor.
    pub features: usize,
    /// Output planes, background included.
    pub classes: usize,
    pub kernel: usize,
    pub conv_layers: usize,
}

impl Arch {
    /// Two 3x3 tanh convolutions with 8 feature planes.
    pub fn standard(in_channels: usize, classes: usize) -> Self {
        Arch {
            in_channels,
            features: 8,
            classes,
            kernel: 3,
            conv_layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.features == 0 || self.conv_layers == 0 {
            return Err(Error::Invalid(format!("degenerate architecture {self:?}")));
        }
        if self.classes < 2 {
            return Err(Error::Invalid("need background plus at least one class".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Invalid("kernel size must be odd".into()));
        }
        Ok(())
    }

    fn layer_in(&self, l: usize) -> usize {
        if l == 0 {
            self.in_channels
        } else {
            self.features
        }
    }

    fn conv_weight_len(&self, l: usize) -> usize {
        self.features * self.layer_in(l) * self.kernel * self.kernel
    }

    /// Offsets of (weights, bias) for conv layer `l`; `l == conv_layers` is the classifier.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for i in 0..l.min(self.conv_layers) {
            off += self.conv_weight_len(i) + self.features;
        }
        if l < self.conv_layers {
            (off, off + self.conv_weight_len(l))
        } else {
            (off, off + self.classes * self.features)
        }
    }

    pub fn param_count(&self) -> usize {
        let (w, _) = self.offsets(self.conv_layers);
        w + self.classes * self.features + self.classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    arch: Arch,
    params: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    height: usize,
    width: usize,
    /// `tanh` output of every conv layer, each `features * pixels` long.
    activations: Vec<Vec<f64>>,
    pub probs: ProbMap,
}

impl Forward {
    /// The extractor output, `m` row-major planes.
    pub fn features(&self) -> &[f64] {
        self.activations.last().expect("at least one conv layer")
    }

    pub fn feature_planes(&self) -> usize {
        self.features().len() / (self.height * self.width)
    }
}

impl SegModel {
    /// Xavier-uniform weights, zero biases.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::rng(seed);
        let mut params = vec![0.0; arch.param_count()];
        let k2 = arch.kernel * arch.kernel;
        for l in 0..=arch.conv_layers {
            let (w0, b0) = arch.offsets(l);
            let (fan_in, fan_out) = if l < arch.conv_layers {
                (arch.layer_in(l) * k2, arch.features * k2)
            } else {
                (arch.features, arch.classes)
            };
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut params[w0..b0] {
                *p = rng.random_range(-a..a);
            }
        }
        Ok(SegModel { arch, params })
    }

    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        Ok(SegModel {
            arch,
            params: vec![0.0; arch.param_count()],
        })
    }

    pub fn from_params(arch: Arch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "architecture needs {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Invalid("non-finite model parameter".into()));
        }
        Ok(SegModel { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward(&self, image: &GridImage) -> Result<Forward> {
        let a = &self.arch;
        if image.channels() != a.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, image has {}",
                a.in_channels,
                image.channels()
            )));
        }
        let (h, w) = (image.height(), image.width());
        let n = h * w;
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(a.conv_layers);
        for l in 0..a.conv_layers {
            let input: &[f64] = if l == 0 {
                image.values()
            } else {
                &activations[l - 1]
            };
            let (w0, b0) = a.offsets(l);
            let mut out = vec![0.0; a.features * n];
            conv_forward(
                input,
                a.layer_in(l),
                h,
                w,
                &self.params[w0..b0],
                &self.params[b0..b0 + a.features],
                a.features,
                a.kernel,
                &mut out,
            );
            for v in &mut out {
                *v = fast_tanh(*v);
            }
            activations.push(out);
        }

        let feats = activations.last().expect("conv_layers > 0");
        let (w0, b0) = a.offsets(a.conv_layers);
        let cls_w = &self.params[w0..b0];
        let cls_b = &self.params[b0..b0 + a.classes];
        let mut logits = vec![0.0; a.classes * n];
        for j in 0..a.classes {
            let out = &mut logits[j * n..(j + 1) * n];
            out.fill(cls_b[j]);
            for c in 0..a.features {
                let wv = cls_w[j * a.features + c];
                for (o, &f) in out.iter_mut().zip(&feats[c * n..(c + 1) * n]) {
                    *o += wv * f;
                }
            }
        }
        softmax_planes(&mut logits, a.classes, n);
        let probs = ProbMap::from_raw(a.classes, h, w, logits)?;
        Ok(Forward {
            height: h,
            width: w,
            activations,
            probs,
        })
    }

    /// Gradient of a scalar loss w.r.t. all parameters, given `dL/dprobs`.
    pub fn backward(&self, image: &GridImage, fwd: &Forward, grad_probs: &[f64]) -> Result<Vec<f64>> {
        let a = &self.arch;
        let (h, w) = (fwd.height, fwd.width);
        let n = h * w;
        if grad_probs.len() != a.classes * n {
            return Err(Error::Shape(format!(
                "loss gradient has {} values, prob map has {}",
                grad_probs.len(),
                a.classes * n
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let p = fwd.probs.probs();

        // softmax: dz_j = p_j (g_j - sum_k g_k p_k)
        let mut dlogits = vec![0.0; a.classes * n];
        for i in 0..n {
            let mut dot = 0.0;
            for k in 0..a.classes {
                dot += grad_probs[k * n + i] * p[k * n + i];
            }
            for j in 0..a.classes {
                dlogits[j * n + i] = p[j * n + i] * (grad_probs[j * n + i] - dot);
            }
        }

        let feats = fwd.features();
        let (w0, b0) = a.offsets(a.conv_layers);
        let mut dact = vec![0.0; a.features * n];
        for j in 0..a.classes {
            let dz = &dlogits[j * n..(j + 1) * n];
            grads[b0 + j] = dz.iter().sum();
            for c in 0..a.features {
                let f = &feats[c * n..(c + 1) * n];
                grads[w0 + j * a.features + c] = dot(dz, f);
                let wv = self.params[w0 + j * a.features + c];
                for (d, &z) in dact[c * n..(c + 1) * n].iter_mut().zip(dz) {
                    *d += wv * z;
                }
            }
        }

        for l in (0..a.conv_layers).rev() {
            let act = &fwd.activations[l];
            for (d, &y) in dact.iter_mut().zip(act) {
                *d *= 1.0 - y * y;
            }
            let input: &[f64] = if l == 0 {
                image.values()
            } else {
                &fwd.activations[l - 1]
            };
            let (w0, b0) = a.offsets(l);
            for o in 0..a.features {
                grads[b0 + o] = dact[o * n..(o + 1) * n].iter().sum();
            }
            let in_c = a.layer_in(l);
            let mut dinput = if l > 0 { vec![0.0; in_c * n] } else { Vec::new() };
            conv_backward(
                input,
                in_c,
                h,
                w,
                &self.params[w0..b0],
                a.features,
                a.kernel,
                &dact,
                &mut grads[w0..b0],
                if l > 0 { Some(&mut dinput) } else { None },
            );
            dact = dinput;
        }
        Ok(grads)
    }
}

/// `1 - 2 / (e^{2x} + 1)`: about three times cheaper than `f64::tanh`,
/// within a few ulps absolute, and saturates cleanly to ±1.
#[inline]
fn fast_tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

/// Dot product with four partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn softmax_planes(logits: &mut [f64], classes: usize, n: usize) {
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for k in 0..classes {
            max = max.max(logits[k * n + i]);
        }
        let mut sum = 0.0;
        for k in 0..classes {
            let e = (logits[k * n + i] - max).exp();
            logits[k * n + i] = e;
            sum += e;
        }
        for k in 0..classes {
            logits[k * n + i] /= sum;
        }
    }
}

/// Copy `c` planes into zero-bordered planes of `(h + 2r) x (w + 2r)`.
fn pad_planes(input: &[f64], c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut out = vec![0.0; c * ph * pw];
    for i in 0..c {
        for y in 0..h {
            let dst = i * ph * pw + (y + r) * pw + r;
            out[dst..dst + w].copy_from_slice(&input[i * h * w + y * w..i * h * w + (y + 1) * w]);
        }
    }
    out
}

const BLOCK: usize = 8;

/// Same-padded correlation over zero-bordered input planes. `tap(o, i, ky, kx)`
/// gives the weight; `init[o]` seeds every output of channel `o`. Taps are
/// summed in (i, ky, kx) order for every output pixel.
#[allow(clippy::too_many_arguments)]
fn correlate_padded(
    padded: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    k: usize,
    out_c: usize,
    init: impl Fn(usize) -> f64,
    tap: impl Fn(usize, usize, usize, usize) -> f64,
    out: &mut [f64],
) {
    let r = k / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let n = h * w;
    let mut taps = vec![0.0; in_c * k * k];
    for o in 0..out_c {
        for i in 0..in_c {
            for ky in 0..k {
                for kx in 0..k {
                    taps[(i * k + ky) * k + kx] = tap(o, i, ky, kx);
                }
            }
        }
        let b = init(o);
        for y in 0..h {
            let dst = &mut out[o * n + y * w..o * n + (y + 1) * w];
            let mut x0 = 0;
            while x0 + BLOCK <= w {
                let mut acc = [b; BLOCK];
                for i in 0..in_c {
                    let plane = &padded[i * ph * pw..(i + 1) * ph * pw];
                    for ky in 0..k {
                        let row = &plane[(y + ky) * pw + x0..(y + ky) * pw + x0 + BLOCK + k - 1];
                        for kx in 0..k {
                            let wv = taps[(i * k + ky) * k + kx];
                            let src: &[f64; BLOCK] = row[kx..kx + BLOCK].try_into().expect("block");
                            for l in 0..BLOCK {
                                acc[l] += wv * src[l];
                            }
                        }
                    }
                }
                dst[x0..x0 + BLOCK].copy_from_slice(&acc);
                x0 += BLOCK;
            }
            for (x, d) in dst.iter_mut().enumerate().skip(x0) {
                let mut acc = b;
                for i in 0..in_c {
                    let plane = &padded[i * ph * pw..(i + 1) * ph * pw];
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += taps[(i * k + ky) * k + kx] * plane[(y + ky) * pw + x + kx];
                        }
                    }
                }
                *d = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    bias: &[f64],
    out_c: usize,
    k: usize,
    out: &mut [f64],
) {
    let padded = pad_planes(input, in_c, h, w, k / 2);
    correlate_padded(
        &padded,
        in_c,
        h,
        w,
        k,
        out_c,
        |o| bias[o],
        |o, i, ky, kx| weights[((o * in_c + i) * k + ky) * k + kx],
        out,
    );
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    out_c: usize,
    k: usize,
    dout: &[f64],
    dweights: &mut [f64],
    dinput: Option<&mut Vec<f64>>,
) {
    let n = h * w;
    let r = k / 2;
    let pw = w + 2 * r;
    let ph = h + 2 * r;
    let padded = pad_planes(input, in_c, h, w, r);
    for o in 0..out_c {
        let g = &dout[o * n..(o + 1) * n];
        for i in 0..in_c {
            let plane = &padded[i * ph * pw..(i + 1) * ph * pw];
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for y in 0..h {
                        let s = (y + ky) * pw + kx;
                        acc += dot(&g[y * w..(y + 1) * w], &plane[s..s + w]);
                    }
                    dweights[((o * in_c + i) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    if let Some(di) = dinput {
        // Transposed convolution: correlate the padded upstream gradient with
        // the spatially flipped kernel, input and output channels swapped.
        let padded_dout = pad_planes(dout, out_c, h, w, r);
        correlate_padded(
            &padded_dout,
            out_c,
            h,
            w,
            k,
            in_c,
            |_| 0.0,
            |i, o, ky, kx| weights[((o * in_c + i) * k + (k - 1 - ky)) * k + (k - 1 - kx)],
            di,
        );
    }
}

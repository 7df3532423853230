//! Training guidance: differentiable pixel, segmentation and perceptual
//! losses with exact gradients, plus the hard segmentation pipeline used
//! at report time.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{InifError, Result};
use crate::volume::{normalize_value, Volume, AXES, NORM_MAX};

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &[f64], truth: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(InifError::ShapeMismatch(format!(
            "mse over {} vs {} values",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let d = t - p;
            loss += d * d;
            2.0 * (p - t) / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Soft segmentation settings: Gaussian smoothing followed by a logistic
/// threshold on normalized intensities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftSegConfig {
    /// Smoothing width in voxels.
    pub sigma: f64,
    /// Threshold in normalized intensity units.
    pub tau: f64,
    /// Logistic sharpness; smaller values approach a hard indicator.
    pub sharpness: f64,
    /// Connected components below this voxel count are dropped by the
    /// hard evaluation path; the soft path ignores it.
    pub min_size: usize,
}

impl SoftSegConfig {
    pub fn new(sigma: f64, tau: f64, sharpness: f64, min_size: usize) -> Result<Self> {
        if sigma < 0.0 || sharpness <= 0.0 || !(0.0..=NORM_MAX).contains(&tau) {
            return Err(InifError::InvalidArgument(format!(
                "soft segmentation config sigma {sigma}, tau {tau}, sharpness {sharpness}"
            )));
        }
        Ok(SoftSegConfig {
            sigma,
            tau,
            sharpness,
            min_size,
        })
    }
}

impl Default for SoftSegConfig {
    fn default() -> Self {
        SoftSegConfig {
            sigma: 1.0,
            tau: 50.0,
            sharpness: 5.0,
            min_size: 20,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// One separable convolution pass along `axis` with edge-replicate
/// padding. `adjoint` scatters instead of gathering, giving the exact
/// transpose of the forward pass.
fn axis_pass(
    data: &[f64],
    shape: &[usize; AXES],
    axis: usize,
    kernel: &[f64],
    adjoint: bool,
) -> Vec<f64> {
    let len = shape[axis];
    let radius = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; data.len()];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for s in 0..stride {
            let base = o * len * stride + s;
            for i in 0..len {
                let at = base + i * stride;
                for (k, &w) in kernel.iter().enumerate() {
                    let j = (i as i64 + k as i64 - radius).clamp(0, len as i64 - 1) as usize;
                    let src = base + j * stride;
                    if adjoint {
                        out[src] += w * data[at];
                    } else {
                        out[at] += w * data[src];
                    }
                }
            }
        }
    }
    out
}

fn spatial_axes(shape: &[usize; AXES]) -> Vec<usize> {
    (2..AXES).filter(|&a| shape[a] > 1).collect()
}

/// Gaussian smoothing over every non-singleton spatial axis.
pub fn gaussian_smooth(data: &[f64], shape: &[usize; AXES], sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return data.to_vec();
    }
    let mut cur = data.to_vec();
    for axis in spatial_axes(shape) {
        cur = axis_pass(&cur, shape, axis, &kernel, false);
    }
    cur
}

/// Transpose of [`gaussian_smooth`] applied to a cotangent.
pub fn gaussian_smooth_adjoint(cotangent: &[f64], shape: &[usize; AXES], sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return cotangent.to_vec();
    }
    let mut cur = cotangent.to_vec();
    for axis in spatial_axes(shape).into_iter().rev() {
        cur = axis_pass(&cur, shape, axis, &kernel, true);
    }
    cur
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Differentiable soft mask: smoothed intensities through a logistic
/// centered at the threshold. Monotone in the input.
pub fn soft_segment(img: &[f64], shape: &[usize; AXES], cfg: &SoftSegConfig) -> Vec<f64> {
    gaussian_smooth(img, shape, cfg.sigma)
        .into_iter()
        .map(|x| logistic((x - cfg.tau) / cfg.sharpness))
        .collect()
}

/// 1 - soft IoU between the soft masks of `pred` and `truth`, with the
/// gradient with respect to `pred`. Both masks empty gives IoU 1.
pub fn soft_iou_loss(
    pred: &[f64],
    truth: &[f64],
    shape: &[usize; AXES],
    cfg: &SoftSegConfig,
) -> Result<(f64, Vec<f64>)> {
    let voxels: usize = shape.iter().product();
    if pred.len() != voxels || truth.len() != voxels {
        return Err(InifError::ShapeMismatch(format!(
            "iou buffers {} / {} vs shape {shape:?}",
            pred.len(),
            truth.len()
        )));
    }
    let sp = gaussian_smooth(pred, shape, cfg.sigma);
    let a: Vec<f64> = sp
        .iter()
        .map(|&x| logistic((x - cfg.tau) / cfg.sharpness))
        .collect();
    let b = soft_segment(truth, shape, cfg);
    let mut num = 0.0;
    let mut den = 0.0;
    for (&ai, &bi) in a.iter().zip(&b) {
        num += ai.min(bi);
        den += ai.max(bi);
    }
    if den == 0.0 {
        return Ok((0.0, vec![0.0; pred.len()]));
    }
    let iou = num / den;
    // d(loss)/d(a_j) through the quotient, with a symmetric split at ties
    // (min + max is smooth, only the split between them is arbitrary).
    let mut d_soft = vec![0.0; pred.len()];
    for j in 0..a.len() {
        let dnum = if a[j] < b[j] {
            1.0
        } else if a[j] > b[j] {
            0.0
        } else {
            0.5
        };
        let dden = 1.0 - dnum;
        let d_iou = (dnum * den - num * dden) / (den * den);
        let dlogistic = a[j] * (1.0 - a[j]) / cfg.sharpness;
        d_soft[j] = -d_iou * dlogistic;
    }
    let grad = gaussian_smooth_adjoint(&d_soft, shape, cfg.sigma);
    Ok((1.0 - iou, grad))
}

const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];
const KERNEL: usize = 3;
const STRIDE: usize = 2;
/// Smallest patch edge the three-stage extractor accepts.
pub const MIN_PATCH: usize = 15;

/// One valid-padding strided convolution stage.
#[derive(Debug, Clone)]
struct ConvStage {
    /// out_ch x in_ch x 3 x 3, row-major.
    kernels: Vec<f64>,
    in_ch: usize,
    out_ch: usize,
}

/// Fixed random feature pyramid: three strided 3x3 stages with a smooth
/// rectifier and per-pixel channel unit normalization. Deterministic for
/// a given seed; stage-one kernels are zero-mean so constant offsets in
/// the input do not register.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stages: Vec<ConvStage>,
    pub stage_weights: [f64; 3],
    pub seed: u64,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut in_ch = 1;
        for &out_ch in &STAGE_CHANNELS {
            let fan = (in_ch * KERNEL * KERNEL) as f64;
            let bound = (1.0 / fan).sqrt();
            let mut kernels: Vec<f64> = (0..out_ch * in_ch * KERNEL * KERNEL)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let per_kernel = in_ch * KERNEL * KERNEL;
            for o in 0..out_ch {
                let slab = &mut kernels[o * per_kernel..(o + 1) * per_kernel];
                let mean = slab.iter().sum::<f64>() / per_kernel as f64;
                slab.iter_mut().for_each(|v| *v -= mean);
            }
            stages.push(ConvStage {
                kernels,
                in_ch,
                out_ch,
            });
            in_ch = out_ch;
        }
        FeatureExtractor {
            stages,
            stage_weights: [1.0; 3],
            seed,
        }
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

struct StageActivation {
    h: usize,
    w: usize,
    pre: Vec<f64>,
    rect: Vec<f64>,
    feat: Vec<f64>,
    norms: Vec<f64>,
}

const NORM_EPS: f64 = 1e-10;

fn run_stages(extractor: &FeatureExtractor, input: &[f64], h: usize, w: usize) -> Vec<StageActivation> {
    let mut acts = Vec::new();
    let mut cur = input.to_vec();
    let (mut ch, mut hh, mut ww) = (1usize, h, w);
    for stage in &extractor.stages {
        let oh = (hh - KERNEL) / STRIDE + 1;
        let ow = (ww - KERNEL) / STRIDE + 1;
        let mut pre = vec![0.0; stage.out_ch * oh * ow];
        for o in 0..stage.out_ch {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..stage.in_ch {
                        for dy in 0..KERNEL {
                            for dx in 0..KERNEL {
                                let k = stage.kernels
                                    [((o * stage.in_ch + i) * KERNEL + dy) * KERNEL + dx];
                                let v = cur[(i * hh + y * STRIDE + dy) * ww + x * STRIDE + dx];
                                acc += k * v;
                            }
                        }
                    }
                    pre[(o * oh + y) * ow + x] = acc;
                }
            }
        }
        let rect: Vec<f64> = pre.iter().map(|&z| softplus(z)).collect();
        let mut feat = vec![0.0; rect.len()];
        let mut norms = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut sq = 0.0;
                for o in 0..stage.out_ch {
                    let v = rect[(o * oh + y) * ow + x];
                    sq += v * v;
                }
                let n = sq.sqrt() + NORM_EPS;
                norms[y * ow + x] = n;
                for o in 0..stage.out_ch {
                    feat[(o * oh + y) * ow + x] = rect[(o * oh + y) * ow + x] / n;
                }
            }
        }
        acts.push(StageActivation {
            h: oh,
            w: ow,
            pre,
            rect: rect.clone(),
            feat,
            norms,
        });
        cur = rect;
        ch = stage.out_ch;
        hh = oh;
        ww = ow;
    }
    let _ = ch;
    acts
}

/// Stage-weighted squared distance between the normalized feature maps of
/// two patches, averaged per stage over spatial positions, with the
/// gradient with respect to `pred`.
pub fn perceptual_loss(
    pred: &[f64],
    reference: &[f64],
    h: usize,
    w: usize,
    extractor: &FeatureExtractor,
) -> Result<(f64, Vec<f64>)> {
    if pred.len() != h * w || reference.len() != h * w {
        return Err(InifError::ShapeMismatch(format!(
            "patch buffers {} / {} vs {h}x{w}",
            pred.len(),
            reference.len()
        )));
    }
    if h < MIN_PATCH || w < MIN_PATCH {
        return Err(InifError::InvalidArgument(format!(
            "patch {h}x{w} below extractor receptive field {MIN_PATCH}"
        )));
    }
    let scaled_pred: Vec<f64> = pred.iter().map(|v| v / NORM_MAX).collect();
    let scaled_ref: Vec<f64> = reference.iter().map(|v| v / NORM_MAX).collect();
    let acts_p = run_stages(extractor, &scaled_pred, h, w);
    let acts_r = run_stages(extractor, &scaled_ref, h, w);
    let mut loss = 0.0;
    // Cotangent flowing backward through the pred stack only.
    let mut rect_cot: Vec<Vec<f64>> = acts_p.iter().map(|a| vec![0.0; a.rect.len()]).collect();
    for (si, (ap, ar)) in acts_p.iter().zip(&acts_r).enumerate() {
        let weight = extractor.stage_weights[si];
        let area = (ap.h * ap.w) as f64;
        let out_ch = extractor.stages[si].out_ch;
        let mut feat_cot = vec![0.0; ap.feat.len()];
        for j in 0..ap.feat.len() {
            let d = ap.feat[j] - ar.feat[j];
            loss += weight * d * d / area;
            feat_cot[j] = 2.0 * weight * d / area;
        }
        // Through the per-pixel unit normalization: v = u/n with
        // n = |u| + eps; dL/du = g/n - u (u . g) / (n^2 |u|).
        for y in 0..ap.h {
            for x in 0..ap.w {
                let n = ap.norms[y * ap.w + x];
                let mag = n - NORM_EPS;
                let mut dot = 0.0;
                for o in 0..out_ch {
                    let at = (o * ap.h + y) * ap.w + x;
                    dot += ap.rect[at] * feat_cot[at];
                }
                for o in 0..out_ch {
                    let at = (o * ap.h + y) * ap.w + x;
                    rect_cot[si][at] +=
                        feat_cot[at] / n - ap.rect[at] * dot / (n * n * mag.max(NORM_EPS));
                }
            }
        }
    }
    // Walk the stages backward: rectifier, then conv transpose into the
    // previous stage's rectified output (or the scaled input).
    let mut input_cot = vec![0.0; h * w];
    for si in (0..extractor.stages.len()).rev() {
        let stage = &extractor.stages[si];
        let ap = &acts_p[si];
        let pre_cot: Vec<f64> = ap
            .pre
            .iter()
            .zip(&rect_cot[si])
            .map(|(&z, &g)| g * logistic(z))
            .collect();
        let (ih, iw) = if si == 0 {
            (h, w)
        } else {
            (acts_p[si - 1].h, acts_p[si - 1].w)
        };
        let mut below = vec![0.0; stage.in_ch * ih * iw];
        for o in 0..stage.out_ch {
            for y in 0..ap.h {
                for x in 0..ap.w {
                    let g = pre_cot[(o * ap.h + y) * ap.w + x];
                    if g == 0.0 {
                        continue;
                    }
                    for i in 0..stage.in_ch {
                        for dy in 0..KERNEL {
                            for dx in 0..KERNEL {
                                let k = stage.kernels
                                    [((o * stage.in_ch + i) * KERNEL + dy) * KERNEL + dx];
                                below[(i * ih + y * STRIDE + dy) * iw + x * STRIDE + dx] += g * k;
                            }
                        }
                    }
                }
            }
        }
        if si == 0 {
            input_cot = below;
        } else {
            for (dst, src) in rect_cot[si - 1].iter_mut().zip(&below) {
                *dst += src;
            }
        }
    }
    let grad: Vec<f64> = input_cot.iter().map(|g| g / NORM_MAX).collect();
    Ok((loss, grad))
}

/// One square patch inside a (t, c, z) plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchLocation {
    pub t: usize,
    pub c: usize,
    pub z: usize,
    pub y0: usize,
    pub x0: usize,
    pub size: usize,
}

/// Deterministically sample an in-bounds patch location.
pub fn sample_patch_location(
    shape: &[usize; AXES],
    size: usize,
    seed: u64,
) -> Result<PatchLocation> {
    if size > shape[3] || size > shape[4] {
        return Err(InifError::InvalidArgument(format!(
            "patch size {size} exceeds plane {}x{}",
            shape[3], shape[4]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(PatchLocation {
        t: rng.random_range(0..shape[0]),
        c: rng.random_range(0..shape[1]),
        z: rng.random_range(0..shape[2]),
        y0: rng.random_range(0..=shape[3] - size),
        x0: rng.random_range(0..=shape[4] - size),
        size,
    })
}

/// Normalized intensities of a patch sliced from a volume.
pub fn slice_patch(vol: &Volume, loc: &PatchLocation) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(loc.size * loc.size);
    let range = vol.channel_range[loc.c];
    for dy in 0..loc.size {
        for dx in 0..loc.size {
            let flat = vol.flat_index(&[loc.t, loc.c, loc.z, loc.y0 + dy, loc.x0 + dx])?;
            out.push(normalize_value(vol.data[flat], range));
        }
    }
    Ok(out)
}

/// Sample matching patches from a reconstruction source and a reference
/// volume. The decode callback receives the sampled location and returns
/// the reconstructed patch in normalized intensities.
pub fn sample_guidance_patches<F>(
    mut decode: F,
    reference: &Volume,
    size: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, PatchLocation)>
where
    F: FnMut(&PatchLocation) -> Result<Vec<f64>>,
{
    let loc = sample_patch_location(&reference.shape, size, seed)?;
    let pred = decode(&loc)?;
    let reference_patch = slice_patch(reference, &loc)?;
    if pred.len() != size * size {
        return Err(InifError::ShapeMismatch(format!(
            "decoded patch has {} values, expected {}",
            pred.len(),
            size * size
        )));
    }
    Ok((pred, reference_patch, loc))
}

/// One weighted loss term entering [`compose_loss`].
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub weight: f64,
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Weighted sum of loss terms; the gradient is the weighted sum of term
/// gradients. Weights must be non-negative.
pub fn compose_loss(terms: &[LossTerm]) -> Result<(f64, Vec<f64>)> {
    let first = terms
        .first()
        .ok_or_else(|| InifError::InvalidArgument("no loss terms".into()))?;
    let n = first.grad.len();
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for term in terms {
        if term.weight < 0.0 {
            return Err(InifError::InvalidArgument(format!(
                "negative loss weight {}",
                term.weight
            )));
        }
        if term.grad.len() != n {
            return Err(InifError::ShapeMismatch(format!(
                "loss term gradient length {} vs {n}",
                term.grad.len()
            )));
        }
        value += term.weight * term.value;
        for (g, t) in grad.iter_mut().zip(&term.grad) {
            *g += term.weight * t;
        }
    }
    Ok((value, grad))
}

/// Report-time segmentation settings: contrast stretch around the mean,
/// smoothing, a hard threshold and a small-object filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSegConfig {
    pub sigma: f64,
    /// (low, high) multiples of the standard deviation around the mean
    /// that map to the [0, 1] stretch range.
    pub stretch: (f64, f64),
    /// Threshold on the stretched, smoothed intensities.
    pub threshold: f64,
    pub min_size: usize,
}

impl Default for EvalSegConfig {
    fn default() -> Self {
        EvalSegConfig {
            sigma: 1.0,
            stretch: (1.5, 10.5),
            threshold: 0.5,
            min_size: 20,
        }
    }
}

/// Hard segmentation of normalized intensities: stretch, smooth,
/// threshold, then drop connected components smaller than `min_size`
/// (6-connectivity over the spatial axes, per (t, c) plane).
pub fn hard_segment(img: &[f64], shape: &[usize; AXES], cfg: &EvalSegConfig) -> Vec<bool> {
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let lo = mean - cfg.stretch.0 * std;
    let hi = mean + cfg.stretch.1 * std;
    let stretched: Vec<f64> = if hi > lo {
        img.iter()
            .map(|&v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; img.len()]
    };
    let smoothed = gaussian_smooth(&stretched, shape, cfg.sigma);
    let mut mask: Vec<bool> = smoothed.iter().map(|&v| v > cfg.threshold).collect();
    remove_small_components(&mut mask, shape, cfg.min_size);
    mask
}

fn remove_small_components(mask: &mut [bool], shape: &[usize; AXES], min_size: usize) {
    if min_size <= 1 {
        return;
    }
    let plane = shape[2] * shape[3] * shape[4];
    let (sz, sy) = (shape[3] * shape[4], shape[4]);
    let mut visited = vec![false; mask.len()];
    let mut component = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || visited[start] {
            continue;
        }
        component.clear();
        stack.push(start);
        visited[start] = true;
        while let Some(at) = stack.pop() {
            component.push(at);
            let local = at % plane;
            let z = local / sz;
            let y = (local % sz) / sy;
            let x = local % sy;
            let mut push = |n: usize| {
                if mask[n] && !visited[n] {
                    visited[n] = true;
                    stack.push(n);
                }
            };
            if z > 0 {
                push(at - sz);
            }
            if z + 1 < shape[2] {
                push(at + sz);
            }
            if y > 0 {
                push(at - sy);
            }
            if y + 1 < shape[3] {
                push(at + sy);
            }
            if x > 0 {
                push(at - 1);
            }
            if x + 1 < shape[4] {
                push(at + 1);
            }
        }
        if component.len() < min_size {
            for &at in &component {
                mask[at] = false;
            }
        }
    }
}

/// Intersection over union of two hard masks. Both empty gives 1, exactly
/// one empty gives 0.
pub fn hard_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let union = a.iter().zip(b).filter(|(&x, &y)| x || y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

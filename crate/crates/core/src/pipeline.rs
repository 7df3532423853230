//! End-to-end compression: epoch sampling, the training loop, the
//! codec-prior fast mode and chunked processing of large stacks.
//!
//! Internally the network is trained against targets rescaled to roughly
//! [-1, 1]; the affine rescale is folded into the final layer before the
//! weights are serialized, so decoders see normalized intensities (or
//! residual targets) directly and nothing about the rescale is stored.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{allocate_bits, decode_volume, rate_control_encode};
use crate::error::{InifError, Result};
use crate::format::{
    self, decode_coords, header_bytes, residual_to_target, InifFile, InifHeader, PriorBlock,
    RESIDUAL_HALF,
};
use crate::guidance::{
    compose_loss, hard_iou, hard_segment, mse_loss, perceptual_loss, sample_guidance_patches,
    soft_iou_loss, EvalSegConfig, FeatureExtractor, LossTerm, SoftSegConfig, MIN_PATCH,
};
use crate::metrics::{quality_report, QualityReport};
use crate::optim::{AdamState, LearnedOptState, LearnedOptWeights, Optimizer};
use crate::siren::{
    backward_batch, forward_batch, init_siren, size_architecture, SirenArchitecture, SirenParams,
    DEPTH,
};
use crate::volume::{flat_index, normalize_value, RoiSpec, Volume, AXES};

/// Largest per-step coordinate batch when the job does not pin one.
pub const DEFAULT_BATCH: usize = 1 << 16;
pub const DEFAULT_STEPS_PLAIN: usize = 2000;
pub const DEFAULT_STEPS_PRIOR: usize = 500;
/// Fraction of the byte budget handed to the block codec in prior mode.
pub const DEFAULT_PRIOR_SPLIT: f64 = 0.9;
pub const ADAM_STEP_SIZE: f64 = 1e-3;
/// The output layer carries one channel per network output, so wide
/// channel counts would dominate the parameter budget.
pub const MAX_CHANNELS: usize = 8;

/// Internal affine between network outputs and stored target units.
const TARGET_SCALE: f64 = RESIDUAL_HALF;

const SAMPLER_SALT: u64 = 0x5357_4150_5f31_3233;
const PATCH_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone)]
pub enum OptimizerChoice {
    Adam,
    Learned(LearnedOptWeights),
}

/// Optional structural term added to the reconstruction loss. Guidance
/// never changes what is stored, only which weight values training
/// settles on.
#[derive(Debug, Clone)]
pub enum GuidanceSpec {
    None,
    /// Soft-IoU agreement between segmentations of the reconstruction
    /// and of the input volume.
    Segmentation {
        cfg: SoftSegConfig,
        weight: f64,
        patch: usize,
    },
    /// Feature-space distance against a clean reference volume.
    Perceptual {
        reference: Volume,
        extractor_seed: u64,
        weight: f64,
        patch: usize,
    },
}

impl GuidanceSpec {
    fn weight(&self) -> f64 {
        match self {
            GuidanceSpec::None => 0.0,
            GuidanceSpec::Segmentation { weight, .. } => *weight,
            GuidanceSpec::Perceptual { weight, .. } => *weight,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompressionJob {
    pub volume: Volume,
    pub target_ratio: f64,
    pub steps: usize,
    pub optimizer: OptimizerChoice,
    pub guidance: GuidanceSpec,
    /// `Some(split)` enables the codec-prior fast mode; the network then
    /// fits the codec residual instead of the raw intensities.
    pub prior_split: Option<f64>,
    /// Coordinates per step; 0 picks `min(grid, DEFAULT_BATCH)`.
    pub batch: usize,
    pub seed: u64,
    pub comment: String,
}

impl CompressionJob {
    pub fn new(volume: Volume, target_ratio: f64) -> Result<Self> {
        let job = CompressionJob {
            volume,
            target_ratio,
            steps: DEFAULT_STEPS_PLAIN,
            optimizer: OptimizerChoice::Adam,
            guidance: GuidanceSpec::None,
            prior_split: None,
            batch: 0,
            seed: 0,
            comment: String::new(),
        };
        job.validate()?;
        Ok(job)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_ratio > 1.0) || !self.target_ratio.is_finite() {
            return Err(InifError::InvalidArgument(format!(
                "target ratio {} must exceed 1",
                self.target_ratio
            )));
        }
        if self.steps == 0 {
            return Err(InifError::InvalidArgument(
                "step count T must be at least 1".into(),
            ));
        }
        if self.volume.channels() > MAX_CHANNELS {
            return Err(InifError::InvalidArgument(format!(
                "{} channels exceed the {MAX_CHANNELS}-channel output limit",
                self.volume.channels()
            )));
        }
        let w = self.guidance.weight();
        if w < 0.0 || !w.is_finite() {
            return Err(InifError::InvalidArgument(format!(
                "guidance weight {w} must be finite and non-negative"
            )));
        }
        match &self.guidance {
            GuidanceSpec::None => {}
            GuidanceSpec::Segmentation { patch, .. } => {
                if *patch < 2 {
                    return Err(InifError::InvalidArgument(format!(
                        "segmentation patch edge {patch} below 2"
                    )));
                }
            }
            GuidanceSpec::Perceptual {
                reference, patch, ..
            } => {
                if *patch < MIN_PATCH {
                    return Err(InifError::InvalidArgument(format!(
                        "perceptual patch edge {patch} below the {MIN_PATCH}-pixel receptive field"
                    )));
                }
                if reference.shape != self.volume.shape {
                    return Err(InifError::ShapeMismatch(format!(
                        "reference {:?} vs volume {:?}",
                        reference.shape, self.volume.shape
                    )));
                }
            }
        }
        if let Some(split) = self.prior_split {
            if !(split > 0.0 && split < 1.0) {
                return Err(InifError::InvalidArgument(format!(
                    "prior split {split} must lie strictly between 0 and 1"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Reconstruction error in normalized intensity units.
    pub mse: f64,
    /// Raw guidance loss value; 0 when guidance is off.
    pub guidance: f64,
    /// Weighted sum of the terms above.
    pub total: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// Quality of the decoded file against the input, both normalized.
    pub report: QualityReport,
}

/// Without-replacement site sampler: every grid point appears exactly
/// once per epoch, in a seeded shuffled order.
pub struct EpochSampler {
    order: Vec<u32>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(sites: usize, seed: u64) -> Result<Self> {
        if sites == 0 || sites > u32::MAX as usize {
            return Err(InifError::InvalidArgument(format!(
                "cannot sample over {sites} sites"
            )));
        }
        let mut sampler = EpochSampler {
            order: (0..sites as u32).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        sampler.reshuffle();
        Ok(sampler)
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    /// The next `n` sites, rolling over into a freshly shuffled epoch
    /// whenever the current one runs out.
    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            let take = (n - out.len()).min(self.order.len() - self.pos);
            out.extend(
                self.order[self.pos..self.pos + take]
                    .iter()
                    .map(|&i| i as usize),
            );
            self.pos += take;
        }
        out
    }
}

/// Axes a coordinate component is emitted for: every non-singleton axis
/// except channel, which is folded into the network output.
fn coord_in_dim(shape: &[usize; AXES]) -> usize {
    [0usize, 2, 3, 4]
        .iter()
        .filter(|&&a| shape[a] > 1)
        .count()
}

/// Grid index of a training site (channel excluded, t-major).
fn site_index(shape: &[usize; AXES], site: usize) -> [usize; AXES] {
    let (z, y, x) = (shape[2], shape[3], shape[4]);
    let xi = site % x;
    let yi = (site / x) % y;
    let zi = (site / (x * y)) % z;
    let ti = site / (x * y * z);
    [ti, 0, zi, yi, xi]
}

/// Channel ranges rounded through `f32`, exactly as the file header will
/// store them; training and decoding must normalize identically.
fn f32_ranges(v: &Volume) -> Vec<(f64, f64)> {
    v.channel_range
        .iter()
        .map(|&(lo, hi)| (lo as f32 as f64, hi as f32 as f64))
        .collect()
}

/// One deterministic batch of training coordinates and normalized
/// intensity targets (batch x out_dim, channels fastest).
pub fn sample_batch(
    v: &Volume,
    batch: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<usize>)> {
    let shape = v.shape;
    let in_dim = coord_in_dim(&shape);
    if in_dim == 0 {
        return Err(InifError::InvalidShape(
            "volume has a single grid point".into(),
        ));
    }
    let channels = shape[1];
    let sites = v.voxel_count() / channels;
    let ranges = f32_ranges(v);
    let picked = EpochSampler::new(sites, seed)?.next_batch(batch.min(sites));
    let mut coords = Vec::with_capacity(picked.len() * in_dim);
    let mut targets = Vec::with_capacity(picked.len() * channels);
    for &s in &picked {
        let mut idx = site_index(&shape, s);
        coords.extend(decode_coords(&idx, &shape));
        for c in 0..channels {
            idx[1] = c;
            let flat = flat_index(&shape, &idx)?;
            targets.push(normalize_value(v.data[flat], ranges[c]));
        }
    }
    Ok((coords, targets, picked))
}

/// Everything the training loop needs that depends on the mode.
struct Prepared {
    arch: SirenArchitecture,
    /// Scaled training targets, sites x channels.
    targets: Vec<f64>,
    /// Per-voxel additive base of the normalized reconstruction.
    base: Option<Vec<f64>>,
    /// d(normalized value)/d(network output).
    chain: f64,
    /// Offset folded into the final layer alongside `TARGET_SCALE`.
    fold_offset: f64,
    prior: Option<PriorBlock>,
}

fn prepare_plain(
    v: &Volume,
    ranges: &[(f64, f64)],
    budget: usize,
    in_dim: usize,
    comment_len: usize,
) -> Result<Prepared> {
    let channels = v.channels();
    let header = header_bytes(&v.shape, channels, DEPTH, 0, false, comment_len);
    // volume_bytes = 2 * budget at ratio 2 makes the sizing budget exact.
    let arch = size_architecture(2.0, budget * 2, in_dim, channels, header)?;
    let sites = v.voxel_count() / channels;
    let mut targets = Vec::with_capacity(v.voxel_count());
    for s in 0..sites {
        let mut idx = site_index(&v.shape, s);
        for c in 0..channels {
            idx[1] = c;
            let flat = flat_index(&v.shape, &idx)?;
            let norm = normalize_value(v.data[flat], ranges[c]);
            targets.push((norm - TARGET_SCALE) / TARGET_SCALE);
        }
    }
    Ok(Prepared {
        arch,
        targets,
        base: None,
        chain: TARGET_SCALE,
        fold_offset: TARGET_SCALE,
        prior: None,
    })
}

fn prepare_prior(
    v: &Volume,
    ranges: &[(f64, f64)],
    budget: usize,
    split: f64,
    in_dim: usize,
    comment_len: usize,
) -> Result<Prepared> {
    let channels = v.channels();
    let min_params = SirenArchitecture::new(in_dim, channels, DEPTH, 1)?.param_count();
    let min_inr = header_bytes(&v.shape, channels, DEPTH, 0, true, comment_len) + 4 * min_params;
    let (codec_budget, _) = allocate_bits(budget, split, min_inr)?;
    let bs = rate_control_encode(v, codec_budget, 8)?;
    let stream_len = bs.to_bytes().len();
    let decoded = decode_volume(&bs)?;

    // Residual in normalized units, under the input's (f32) ranges.
    let mut residual = vec![0.0; v.voxel_count()];
    let (mut rmin, mut rmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for (flat, r) in residual.iter_mut().enumerate() {
        let range = ranges[v.channel_of_flat(flat)];
        *r = normalize_value(v.data[flat], range) - normalize_value(decoded.data[flat], range);
        rmin = rmin.min(*r);
        rmax = rmax.max(*r);
    }
    let range32 = (rmin as f32, rmax as f32);
    let rr = (range32.0 as f64, range32.1 as f64);

    let header = header_bytes(&v.shape, channels, DEPTH, stream_len, true, comment_len);
    let arch = size_architecture(2.0, budget * 2, in_dim, channels, header)?;

    // base = prior + the target-to-residual affine evaluated at output 0.
    let half_span = if rr.1 > rr.0 { (rr.1 - rr.0) / 2.0 } else { 0.0 };
    let mut base = vec![0.0; v.voxel_count()];
    for (flat, b) in base.iter_mut().enumerate() {
        let range = ranges[v.channel_of_flat(flat)];
        let prior_norm = normalize_value(decoded.data[flat], range);
        *b = prior_norm + if rr.1 > rr.0 { rr.0 + half_span } else { rr.0 };
    }

    let sites = v.voxel_count() / channels;
    let mut targets = Vec::with_capacity(v.voxel_count());
    for s in 0..sites {
        let mut idx = site_index(&v.shape, s);
        for c in 0..channels {
            idx[1] = c;
            let flat = flat_index(&v.shape, &idx)?;
            targets.push(residual_to_target(residual[flat], rr) / TARGET_SCALE);
        }
    }
    Ok(Prepared {
        arch,
        targets,
        base: Some(base),
        chain: half_span,
        fold_offset: 0.0,
        prior: Some(PriorBlock {
            bitstream: bs.to_bytes(),
            residual_range: range32,
        }),
    })
}

/// Fold the target affine into the (affine) output layer so stored
/// weights emit target units directly.
fn fold_output_layer(params: &mut SirenParams, scale: f64, offset: f64) {
    let last = params.layers.last_mut().expect("depth >= 2");
    for w in &mut last.w {
        *w *= scale;
    }
    for b in &mut last.b {
        *b = scale * *b + offset;
    }
}

enum GuidanceKind {
    Seg(SoftSegConfig),
    Perc(FeatureExtractor),
}

struct GuidanceCtx {
    kind: GuidanceKind,
    weight: f64,
    patch: usize,
}

fn guidance_ctx(spec: &GuidanceSpec) -> Option<GuidanceCtx> {
    match spec {
        GuidanceSpec::None => None,
        GuidanceSpec::Segmentation { cfg, weight, patch } => Some(GuidanceCtx {
            kind: GuidanceKind::Seg(*cfg),
            weight: *weight,
            patch: *patch,
        }),
        GuidanceSpec::Perceptual {
            extractor_seed,
            weight,
            patch,
            ..
        } => Some(GuidanceCtx {
            kind: GuidanceKind::Perc(FeatureExtractor::new(*extractor_seed)),
            weight: *weight,
            patch: *patch,
        }),
    }
}

/// One guidance evaluation on a sampled patch: loss value plus its
/// gradient with respect to the network parameters.
#[allow(clippy::too_many_arguments)]
fn guidance_step(
    params: &SirenParams,
    shape: &[usize; AXES],
    base: Option<&[f64]>,
    chain: f64,
    fold_offset: f64,
    ctx: &GuidanceCtx,
    reference: &Volume,
    seed: u64,
) -> Result<(f64, crate::siren::Gradients)> {
    let channels = shape[1];
    let mut stash = None;
    let decode = |loc: &crate::guidance::PatchLocation| -> Result<Vec<f64>> {
        let n = loc.size * loc.size;
        let mut pcoords = Vec::with_capacity(n * params.arch.in_dim);
        let mut flats = Vec::with_capacity(n);
        for dy in 0..loc.size {
            for dx in 0..loc.size {
                let idx = [loc.t, loc.c, loc.z, loc.y0 + dy, loc.x0 + dx];
                pcoords.extend(decode_coords(&idx, shape));
                flats.push(flat_index(shape, &idx)?);
            }
        }
        let (out, trace) = forward_batch(params, &pcoords, n)?;
        let mut pred = Vec::with_capacity(n);
        for (i, &flat) in flats.iter().enumerate() {
            let b = match base {
                Some(b) => b[flat],
                None => fold_offset,
            };
            pred.push(b + chain * out[i * channels + loc.c]);
        }
        stash = Some(trace);
        Ok(pred)
    };
    let (pred, refp, loc) = sample_guidance_patches(decode, reference, ctx.patch, seed)?;
    let s = loc.size;
    let (value, dpatch) = match &ctx.kind {
        GuidanceKind::Seg(cfg) => soft_iou_loss(&pred, &refp, &[1, 1, 1, s, s], cfg)?,
        GuidanceKind::Perc(fx) => perceptual_loss(&pred, &refp, s, s, fx)?,
    };
    let trace = stash.expect("decode ran");
    let mut gout = vec![0.0; s * s * channels];
    for (i, g) in dpatch.iter().enumerate() {
        gout[i * channels + loc.c] = g * chain;
    }
    let grads = backward_batch(params, &trace, &gout)?;
    Ok((value, grads))
}

fn run_with_budget(job: &CompressionJob, budget: usize) -> Result<(InifFile, TrainLog)> {
    job.validate()?;
    let v = &job.volume;
    let shape = v.shape;
    let channels = shape[1];
    let in_dim = coord_in_dim(&shape);
    if in_dim == 0 {
        return Err(InifError::InvalidShape(
            "volume has a single grid point".into(),
        ));
    }
    let ranges = f32_ranges(v);
    let prep = match job.prior_split {
        None => prepare_plain(v, &ranges, budget, in_dim, job.comment.len())?,
        Some(split) => prepare_prior(v, &ranges, budget, split, in_dim, job.comment.len())?,
    };

    let sites = v.voxel_count() / channels;
    let mut coords = Vec::with_capacity(sites * in_dim);
    for s in 0..sites {
        coords.extend(decode_coords(&site_index(&shape, s), &shape));
    }

    let mut params = init_siren(&prep.arch, job.seed);
    let mut optimizer = match &job.optimizer {
        OptimizerChoice::Adam => Optimizer::Adam(AdamState::new(&params, ADAM_STEP_SIZE)),
        OptimizerChoice::Learned(w) => {
            Optimizer::Learned(LearnedOptState::new(w.clone(), &params, job.steps)?)
        }
    };
    let optimizer_id = optimizer.id();
    let batch = if job.batch == 0 {
        sites.min(DEFAULT_BATCH)
    } else {
        job.batch.min(sites)
    };
    let mut sampler = EpochSampler::new(sites, job.seed ^ SAMPLER_SALT)?;
    let gctx = guidance_ctx(&job.guidance);
    let reference = match &job.guidance {
        GuidanceSpec::Perceptual { reference, .. } => reference,
        _ => v,
    };

    let mut log_steps = Vec::with_capacity(job.steps);
    let mut bcoords = Vec::with_capacity(batch * in_dim);
    let mut btargets = Vec::with_capacity(batch * channels);
    for step in 0..job.steps {
        let t0 = Instant::now();
        bcoords.clear();
        btargets.clear();
        for &s in &sampler.next_batch(batch) {
            bcoords.extend_from_slice(&coords[s * in_dim..(s + 1) * in_dim]);
            btargets.extend_from_slice(&prep.targets[s * channels..(s + 1) * channels]);
        }
        let (pred, trace) = forward_batch(&params, &bcoords, batch)?;
        let (mse_scaled, gpred) = mse_loss(&pred, &btargets)?;
        let mut grads = backward_batch(&params, &trace, &gpred)?;

        let mse_norm = prep.chain * prep.chain * mse_scaled;
        let mut terms = vec![LossTerm {
            weight: 1.0,
            value: mse_norm,
            grad: vec![],
        }];
        let mut gvalue = 0.0;
        if let Some(ctx) = &gctx {
            let seed = job
                .seed
                .wrapping_add((step as u64 + 1).wrapping_mul(PATCH_SALT));
            let (value, ggrads) = guidance_step(
                &params,
                &shape,
                prep.base.as_deref(),
                prep.chain,
                prep.fold_offset,
                ctx,
                reference,
                seed,
            )?;
            gvalue = value;
            grads.add_scaled(&ggrads, ctx.weight);
            terms.push(LossTerm {
                weight: ctx.weight,
                value,
                grad: vec![],
            });
        }
        let (total, _) = compose_loss(&terms)?;
        let train_loss = mse_scaled + gctx.as_ref().map_or(0.0, |c| c.weight) * gvalue;
        if !train_loss.is_finite() {
            return Err(InifError::Diverged {
                step,
                what: format!("loss {train_loss}"),
            });
        }
        optimizer.step(&mut params, &grads, train_loss)?;
        log_steps.push(StepRecord {
            mse: mse_norm,
            guidance: gvalue,
            total,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }

    fold_output_layer(&mut params, TARGET_SCALE, prep.fold_offset);
    params.quantize_f32();
    let header = InifHeader {
        shape,
        dtype: v.dtype,
        channel_ranges: v
            .channel_range
            .iter()
            .map(|&(lo, hi)| (lo as f32, hi as f32))
            .collect(),
        arch: prep.arch.clone(),
        optimizer_id,
        total_steps: job.steps as u32,
        seed: job.seed,
        prior: prep.prior.clone(),
        comment: job.comment.clone(),
    };
    let file = InifFile { header, params };
    if file.total_bytes() > budget {
        return Err(InifError::BudgetInfeasible(format!(
            "{} stored bytes exceed the {budget}-byte budget",
            file.total_bytes()
        )));
    }

    let recon = format::decode(&file, &RoiSpec::full(&shape))?;
    let mut truth_norm = vec![0.0; v.voxel_count()];
    let mut recon_norm = vec![0.0; v.voxel_count()];
    for flat in 0..v.voxel_count() {
        let range = ranges[v.channel_of_flat(flat)];
        truth_norm[flat] = normalize_value(v.data[flat], range);
        recon_norm[flat] = normalize_value(recon.data[flat], range);
    }
    let iou = match &job.guidance {
        GuidanceSpec::Segmentation { .. } => {
            let cfg = EvalSegConfig::default();
            let a = hard_segment(&recon_norm, &shape, &cfg);
            let b = hard_segment(&truth_norm, &shape, &cfg);
            Some(hard_iou(&a, &b))
        }
        _ => None,
    };
    let report = quality_report(&recon_norm, &truth_norm, &shape, iou)?;
    Ok((file, TrainLog {
        steps: log_steps,
        report,
    }))
}

fn byte_budget(v: &Volume, ratio: f64) -> usize {
    (v.raw_bytes() as f64 / ratio).floor() as usize
}

/// Train and assemble a single-file compression of the job's volume.
pub fn compress(job: &CompressionJob) -> Result<(InifFile, TrainLog)> {
    run_with_budget(job, byte_budget(&job.volume, job.target_ratio))
}

/// Plain-mode training; the returned parameters are the stored (f32)
/// weights with the output affine already folded in.
pub fn train(job: &CompressionJob) -> Result<(SirenParams, TrainLog)> {
    if job.prior_split.is_some() {
        return Err(InifError::InvalidArgument(
            "plain training does not take a prior split".into(),
        ));
    }
    let (file, log) = compress(job)?;
    Ok((file.params, log))
}

/// Prior-mode training: block-codec base layer plus a residual network.
pub fn train_with_prior(job: &CompressionJob) -> Result<(InifFile, TrainLog)> {
    if job.prior_split.is_none() {
        return Err(InifError::InvalidArgument(
            "prior training needs a prior split".into(),
        ));
    }
    compress(job)
}

/// Working bytes needed per z-slice during training, the unit the
/// chunk planner budgets against.
fn slice_cost(shape: &[usize; AXES]) -> usize {
    // data + normalized copy + targets + coordinates, all f64.
    shape[0] * shape[1] * shape[3] * shape[4] * 8 * 4
}

/// Split the z-axis into the smallest number of contiguous, evenly
/// sized chunks whose working set fits the memory budget.
pub fn plan_chunks(shape: &[usize; AXES], memory_budget_bytes: usize) -> Result<Vec<(usize, usize)>> {
    let z = shape[2];
    if z == 0 {
        return Err(InifError::InvalidShape("empty z axis".into()));
    }
    let cost = slice_cost(shape);
    if memory_budget_bytes < cost {
        return Err(InifError::InvalidArgument(format!(
            "memory budget {memory_budget_bytes} below the {cost}-byte working set of one z-slice"
        )));
    }
    let n = (z * cost).div_ceil(memory_budget_bytes).clamp(1, z);
    Ok((0..n).map(|i| (i * z / n, (i + 1) * z / n)).collect())
}

/// Copy of a contiguous z-range, channel ranges recomputed.
pub fn slice_z(v: &Volume, z0: usize, z1: usize) -> Result<Volume> {
    if z0 >= z1 || z1 > v.shape[2] {
        return Err(InifError::InvalidRoi(format!(
            "z range {z0}..{z1} in depth {}",
            v.shape[2]
        )));
    }
    let [t_, c_, _, y_, x_] = v.shape;
    let plane = y_ * x_;
    let mut data = Vec::with_capacity(t_ * c_ * (z1 - z0) * plane);
    for t in 0..t_ {
        for c in 0..c_ {
            for z in z0..z1 {
                let lo = flat_index(&v.shape, &[t, c, z, 0, 0])?;
                data.extend_from_slice(&v.data[lo..lo + plane]);
            }
        }
    }
    Volume::new([t_, c_, z1 - z0, y_, x_], v.dtype, data)
}

#[derive(Debug, Clone)]
pub struct ChunkPart {
    pub name: String,
    pub z0: usize,
    pub z1: usize,
    pub file: InifFile,
    pub log: TrainLog,
}

#[derive(Debug, Clone)]
pub struct ChunkedOutput {
    pub manifest: String,
    pub parts: Vec<ChunkPart>,
}

impl ChunkedOutput {
    /// Manifest plus every part file, the figure the ratio guarantee
    /// is measured against.
    pub fn total_bytes(&self) -> usize {
        self.manifest.len() + self.parts.iter().map(|p| p.file.total_bytes()).sum::<usize>()
    }

    pub fn write_to_dir(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.txt"), &self.manifest)?;
        for p in &self.parts {
            p.file.save(&dir.join(&p.name))?;
        }
        Ok(())
    }
}

fn part_name(i: usize) -> String {
    format!("part_{i:03}.inif")
}

fn build_manifest(raw_bytes: usize, ratio: f64, plan: &[(usize, usize)]) -> String {
    let mut m = format!("raw_bytes={raw_bytes}\nratio={ratio}\n");
    for (i, &(z0, z1)) in plan.iter().enumerate() {
        m.push_str(&format!("part={} z0={z0} z1={z1}\n", part_name(i)));
    }
    m
}

/// Parsed manifest: raw byte count, target ratio, parts with z-ranges.
pub fn parse_manifest(text: &str) -> Result<(usize, f64, Vec<(String, usize, usize)>)> {
    let bad = |line: &str| InifError::CorruptStream(format!("manifest line {line:?}"));
    let mut raw = None;
    let mut ratio = None;
    let mut parts = Vec::new();
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("raw_bytes=") {
            raw = Some(v.parse::<usize>().map_err(|_| bad(line))?);
        } else if let Some(v) = line.strip_prefix("ratio=") {
            ratio = Some(v.parse::<f64>().map_err(|_| bad(line))?);
        } else if let Some(rest) = line.strip_prefix("part=") {
            let mut fields = rest.split_whitespace();
            let name = fields.next().ok_or_else(|| bad(line))?.to_string();
            let z0 = fields
                .next()
                .and_then(|f| f.strip_prefix("z0="))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(line))?;
            let z1 = fields
                .next()
                .and_then(|f| f.strip_prefix("z1="))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(line))?;
            parts.push((name, z0, z1));
        } else if !line.trim().is_empty() {
            return Err(bad(line));
        }
    }
    match (raw, ratio) {
        (Some(r), Some(q)) if !parts.is_empty() => Ok((r, q, parts)),
        _ => Err(InifError::CorruptStream("incomplete manifest".into())),
    }
}

fn validate_plan(plan: &[(usize, usize)], z: usize) -> Result<()> {
    let contiguous = !plan.is_empty()
        && plan[0].0 == 0
        && plan.last().unwrap().1 == z
        && plan.iter().all(|&(a, b)| a < b)
        && plan.windows(2).all(|w| w[0].1 == w[1].0);
    if contiguous {
        Ok(())
    } else {
        Err(InifError::InvalidArgument(format!(
            "chunk plan {plan:?} does not partition 0..{z}"
        )))
    }
}

/// Compress each planned z-chunk independently; the manifest bytes are
/// charged against the chunk budgets so manifest + parts together honor
/// the target ratio. Chunks share nothing, so boundaries decode exactly
/// as they would in separate files.
pub fn compress_chunked(job: &CompressionJob, plan: &[(usize, usize)]) -> Result<ChunkedOutput> {
    job.validate()?;
    validate_plan(plan, job.volume.shape[2])?;
    let manifest = build_manifest(job.volume.raw_bytes(), job.target_ratio, plan);
    let n = plan.len();
    let mut parts = Vec::with_capacity(n);
    for (i, &(z0, z1)) in plan.iter().enumerate() {
        let wrap = |e: InifError| InifError::ChunkFailed {
            chunk: i,
            source: Box::new(e),
        };
        let share = manifest.len() / n + usize::from(i < manifest.len() % n);
        let sub = slice_z(&job.volume, z0, z1).map_err(wrap)?;
        let budget = byte_budget(&sub, job.target_ratio)
            .checked_sub(share)
            .filter(|&b| b > 0)
            .ok_or_else(|| {
                wrap(InifError::BudgetInfeasible(format!(
                    "chunk budget consumed by its {share}-byte manifest share"
                )))
            })?;
        let mut cjob = job.clone();
        cjob.volume = sub;
        cjob.seed = job.seed.wrapping_add(i as u64);
        if let GuidanceSpec::Perceptual { reference, .. } = &mut cjob.guidance {
            *reference = slice_z(reference, z0, z1).map_err(wrap)?;
        }
        let (file, log) = run_with_budget(&cjob, budget).map_err(wrap)?;
        parts.push(ChunkPart {
            name: part_name(i),
            z0,
            z1,
            file,
            log,
        });
    }
    Ok(ChunkedOutput { manifest, parts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_phantom, Dtype, PhantomConfig, PhantomKind};

    fn blob_volume(shape: [usize; AXES]) -> Volume {
        generate_phantom(
            PhantomKind::GaussianBlobs,
            shape,
            Dtype::U16,
            7,
            &PhantomConfig::default(),
        )
        .unwrap()
    }

    fn quick_job(shape: [usize; AXES], ratio: f64, steps: usize) -> CompressionJob {
        let mut job = CompressionJob::new(blob_volume(shape), ratio).unwrap();
        job.steps = steps;
        job.batch = 256;
        job
    }

    #[test]
    fn job_validation_rejects_bad_knobs() {
        let v = blob_volume([1, 1, 4, 8, 8]);
        assert!(CompressionJob::new(v.clone(), 1.0).is_err());
        let mut job = CompressionJob::new(v.clone(), 8.0).unwrap();
        job.steps = 0;
        assert!(job.validate().is_err());
        job.steps = 1;
        job.guidance = GuidanceSpec::Segmentation {
            cfg: SoftSegConfig::default(),
            weight: -0.5,
            patch: 8,
        };
        assert!(job.validate().is_err());
        job.guidance = GuidanceSpec::None;
        job.prior_split = Some(1.0);
        assert!(job.validate().is_err());
    }

    #[test]
    fn sample_batch_full_grid_covers_every_site_once() {
        let v = blob_volume([1, 1, 4, 6, 5]);
        let sites = 4 * 6 * 5;
        let (coords, targets, picked) = sample_batch(&v, sites, 11).unwrap();
        assert_eq!(coords.len(), sites * 3);
        assert_eq!(targets.len(), sites);
        let mut seen = picked.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..sites).collect::<Vec<_>>());
    }

    #[test]
    fn sample_batch_is_deterministic_and_unique() {
        let v = blob_volume([1, 1, 4, 8, 8]);
        let (c1, t1, p1) = sample_batch(&v, 50, 3).unwrap();
        let (c2, t2, p2) = sample_batch(&v, 50, 3).unwrap();
        assert_eq!((c1, t1, p1.clone()), (c2, t2, p2));
        let mut uniq = p1;
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 50);
    }

    #[test]
    fn epoch_sampler_covers_each_epoch_exactly() {
        let sites = 33;
        let mut s = EpochSampler::new(sites, 5).unwrap();
        let two_epochs = s.next_batch(2 * sites);
        let mut counts = vec![0usize; sites];
        for i in two_epochs {
            counts[i] += 1;
        }
        assert!(counts.iter().all(|&c| c == 2));
        // Epoch orders differ with overwhelming probability.
        let mut s = EpochSampler::new(sites, 5).unwrap();
        let a = s.next_batch(sites);
        let b = s.next_batch(sites);
        assert_ne!(a, b);
    }

    #[test]
    fn single_step_job_trains_once_and_changes_weights() {
        let job = quick_job([1, 1, 1, 16, 16], 2.0, 1);
        let (file, log) = compress(&job).unwrap();
        assert_eq!(log.steps.len(), 1);
        let mut untouched = init_siren(&file.header.arch, job.seed);
        fold_output_layer(&mut untouched, TARGET_SCALE, TARGET_SCALE);
        untouched.quantize_f32();
        assert_ne!(file.params, untouched);
    }

    #[test]
    fn compress_respects_budget_and_is_deterministic() {
        let job = quick_job([1, 1, 8, 16, 16], 8.0, 60);
        let (f1, _) = compress(&job).unwrap();
        let (f2, _) = compress(&job).unwrap();
        assert!(f1.total_bytes() <= job.volume.raw_bytes() / 8);
        assert_eq!(
            format::serialize(&f1).unwrap(),
            format::serialize(&f2).unwrap()
        );
    }

    #[test]
    fn training_reduces_loss_and_decode_matches() {
        let mut job = quick_job([1, 1, 8, 16, 16], 4.0, 600);
        job.batch = 512;
        let (_, log) = compress(&job).unwrap();
        let first = log.steps.first().unwrap().mse;
        let last = log.steps.last().unwrap().mse;
        assert!(last < first / 2.0, "mse {first} -> {last}");
        // The decoded file goes through the folded, quantized weights;
        // gross disagreement with the training loss means the fold broke.
        assert!(log.report.mse < first, "report {}", log.report.mse);
        assert!(log.steps.iter().all(|s| s.total.is_finite()));
    }

    #[test]
    fn segmentation_guidance_runs_and_keeps_file_layout() {
        let mut plain = quick_job([1, 1, 8, 16, 16], 8.0, 25);
        let mut guided = plain.clone();
        guided.guidance = GuidanceSpec::Segmentation {
            cfg: SoftSegConfig::default(),
            weight: 0.2,
            patch: 8,
        };
        plain.steps = 25;
        let (pf, _) = compress(&plain).unwrap();
        let (gf, glog) = compress(&guided).unwrap();
        assert_eq!(pf.header.arch, gf.header.arch);
        assert_eq!(pf.total_bytes(), gf.total_bytes());
        assert!(glog.report.iou.is_some());
        assert!(glog.steps.iter().any(|s| s.guidance != 0.0));
    }

    #[test]
    fn perceptual_guidance_against_self_reference_trains() {
        let mut job = quick_job([1, 1, 1, 20, 20], 2.5, 20);
        job.guidance = GuidanceSpec::Perceptual {
            reference: job.volume.clone(),
            extractor_seed: 9,
            weight: 0.05,
            patch: 16,
        };
        let (_, log) = compress(&job).unwrap();
        assert!(log.steps.iter().all(|s| s.guidance.is_finite()));
    }

    #[test]
    fn prior_mode_embeds_codec_stream_within_budget() {
        let mut job = quick_job([1, 1, 8, 32, 32], 4.0, 40);
        job.prior_split = Some(DEFAULT_PRIOR_SPLIT);
        let (file, log) = train_with_prior(&job).unwrap();
        let prior = file.header.prior.as_ref().expect("prior embedded");
        assert!(!prior.bitstream.is_empty());
        assert!(file.total_bytes() <= job.volume.raw_bytes() / 4);
        assert!(log.report.mse.is_finite());
        // Round trip through bytes keeps the embedded stream.
        let back = format::deserialize(&format::serialize(&file).unwrap()).unwrap();
        assert_eq!(back.header.prior, file.header.prior);
    }

    #[test]
    fn train_wrappers_check_the_mode() {
        let mut job = quick_job([1, 1, 1, 16, 16], 2.0, 1);
        assert!(train_with_prior(&job).is_err());
        job.prior_split = Some(0.9);
        assert!(train(&job).is_err());
    }

    #[test]
    fn chunk_plan_partitions_evenly() {
        let shape = [1, 1, 64, 8, 8];
        let cost = slice_cost(&shape);
        let plan = plan_chunks(&shape, 16 * cost).unwrap();
        assert_eq!(plan, vec![(0, 16), (16, 32), (32, 48), (48, 64)]);
        assert!(plan_chunks(&shape, cost - 1).is_err());
        // Generous budget collapses to a single chunk.
        assert_eq!(plan_chunks(&shape, 64 * cost).unwrap(), vec![(0, 64)]);
    }

    #[test]
    fn slice_z_matches_manual_gather() {
        let v = blob_volume([2, 1, 6, 4, 4]);
        let s = slice_z(&v, 2, 5).unwrap();
        assert_eq!(s.shape, [2, 1, 3, 4, 4]);
        for t in 0..2 {
            for z in 0..3 {
                for y in 0..4 {
                    for x in 0..4 {
                        let a = s.data[s.flat_index(&[t, 0, z, y, x]).unwrap()];
                        let b = v.data[v.flat_index(&[t, 0, z + 2, y, x]).unwrap()];
                        assert_eq!(a, b);
                    }
                }
            }
        }
        assert!(slice_z(&v, 4, 4).is_err());
    }

    #[test]
    fn chunked_compression_honors_the_overall_ratio() {
        let mut job = quick_job([1, 1, 16, 16, 16], 8.0, 30);
        job.batch = 256;
        let out = compress_chunked(&job, &[(0, 8), (8, 16)]).unwrap();
        assert_eq!(out.parts.len(), 2);
        assert!(out.total_bytes() <= job.volume.raw_bytes() / 8);
        let (raw, ratio, parts) = parse_manifest(&out.manifest).unwrap();
        assert_eq!(raw, job.volume.raw_bytes());
        assert_eq!(ratio, 8.0);
        assert_eq!(parts[1], ("part_001.inif".into(), 8, 16));
        // Parts decode independently over their own shapes.
        for p in &out.parts {
            assert_eq!(p.file.header.shape[2], p.z1 - p.z0);
        }
    }

    #[test]
    fn chunk_failures_name_the_chunk() {
        let job = quick_job([1, 1, 16, 16, 16], 900.0, 1);
        match compress_chunked(&job, &[(0, 8), (8, 16)]) {
            Err(InifError::ChunkFailed { chunk, .. }) => assert_eq!(chunk, 0),
            other => panic!("expected chunk failure, got {other:?}"),
        }
    }

    #[test]
    fn bad_chunk_plans_are_rejected() {
        let job = quick_job([1, 1, 8, 16, 16], 8.0, 1);
        for plan in [
            vec![],
            vec![(0, 4)],
            vec![(1, 8)],
            vec![(0, 4), (5, 8)],
            vec![(0, 5), (4, 8)],
        ] {
            assert!(compress_chunked(&job, &plan).is_err(), "plan {plan:?}");
        }
    }

    #[test]
    fn learned_optimizer_drives_the_loop() {
        let mut job = quick_job([1, 1, 1, 16, 16], 2.0, 3);
        job.optimizer =
            OptimizerChoice::Learned(LearnedOptWeights::fallback(crate::optim::FALLBACK_SEED));
        let (file, log) = compress(&job).unwrap();
        assert_eq!(file.header.optimizer_id, 1);
        assert_eq!(log.steps.len(), 3);
    }
}

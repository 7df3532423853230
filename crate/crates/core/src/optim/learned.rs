//! Learned-optimizer scaffolding: a per-tensor recurrent controller that
//! emits the weights of a tiny per-parameter predictor plus a direction
//! value `d` and a log learning rate `c_lr`, applied as
//! `delta = 0.001 * d * exp(0.001 * c_lr) * ||theta||_2 * raw`.
//!
//! Pretrained controller weights can be loaded from a bundle; without one
//! a seeded fallback initialization is used whose predictor approximates
//! a preconditioned gradient step so that an untrained controller still
//! makes progress without destroying the fit.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{InifError, Result};
use crate::siren::{Gradients, SirenParams};

pub const CONTROLLER_WIDTH: usize = 512;

/// Soft-progress thresholds: nine evenly spaced interior values plus the
/// endpoints.
pub const PROGRESS_THRESHOLDS: [f64; 11] =
    [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Decay ladder shared by the loss EMA bank and the momentum buffers.
pub const DECAY_BANK: [f64; 4] = [0.5, 0.9, 0.99, 0.999];

const SECOND_MOMENT_DECAY: f64 = 0.999;

/// Per-parameter predictor shape: features -> 4 -> 4 -> 1.
pub const PRED_IN: usize = 6;
const PRED_HIDDEN: usize = 4;
/// Flattened predictor weight count.
pub const PRED_WEIGHTS: usize =
    PRED_HIDDEN * PRED_IN + PRED_HIDDEN + PRED_HIDDEN * PRED_HIDDEN + PRED_HIDDEN + PRED_HIDDEN + 1;

/// Controller input feature count: progress + loss trend + momentum
/// summaries + tensor-rank one-hot.
pub const FEATURES: usize = PROGRESS_THRESHOLDS.len() + DECAY_BANK.len() + 2 * DECAY_BANK.len() + 5;

/// Controller head output: predictor weights plus (d, c_lr).
pub const HEAD_OUT: usize = PRED_WEIGHTS + 2;

/// Seed of the documented fallback initialization.
pub const FALLBACK_SEED: u64 = 0x1f1f_2024;

/// Fallback c_lr schedule endpoints. After a short warmup the scalar
/// learning rate rises to exp(0.001 * CLR_PEAK) of the base step and a
/// late gate anneals it to exp(0.001 * CLR_FINAL) over the last fifth
/// of the horizon; the first step is always at c_lr = 0.
pub const CLR_PEAK: f64 = 3600.0;
pub const CLR_FINAL: f64 = -2900.0;

/// Training soft-progress features: tanh(10 * (t/T - s)) per threshold.
pub fn progress_features(t: usize, total: usize, thresholds: &[f64]) -> Result<Vec<f64>> {
    if total == 0 {
        return Err(InifError::InvalidArgument("total steps T must be > 0".into()));
    }
    let frac = t as f64 / total as f64;
    Ok(thresholds.iter().map(|s| (10.0 * (frac - s)).tanh()).collect())
}

/// Loss-trend features from an EMA bank against the running minimum:
/// the gap between the fastest EMA and each bank entry, normalized by the
/// running-minimum magnitude and clamped to [-1, 1]. Zero means no
/// change; negative values correspond to decreasing loss.
pub fn loss_features(history: &[f64]) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(InifError::InvalidArgument("empty loss history".into()));
    }
    let mut tracker = LossTracker::default();
    for &l in history {
        tracker.record(l);
    }
    Ok(tracker.features())
}

#[derive(Debug, Clone, Default)]
struct LossTracker {
    emas: Option<[f64; DECAY_BANK.len()]>,
    running_min: f64,
}

impl LossTracker {
    fn record(&mut self, loss: f64) {
        match &mut self.emas {
            None => {
                self.emas = Some([loss; DECAY_BANK.len()]);
                self.running_min = loss;
            }
            Some(emas) => {
                for (e, &beta) in emas.iter_mut().zip(DECAY_BANK.iter()) {
                    *e = beta * *e + (1.0 - beta) * loss;
                }
                self.running_min = self.running_min.min(loss);
            }
        }
    }

    fn features(&self) -> Vec<f64> {
        let emas = self.emas.expect("at least one recorded loss");
        let denom = self.running_min.abs().max(1e-8);
        emas.iter()
            .map(|&e| ((emas[0] - e) / denom).clamp(-1.0, 1.0))
            .collect()
    }
}

/// Per-tensor controller features: progress, loss trend, squashed mean and
/// RMS of each momentum buffer, and the tensor rank one-hot. The length is
/// the same for every tensor shape.
pub fn tensor_features(
    progress: &[f64],
    loss_trend: &[f64],
    momenta: &[Vec<f64>],
    rank: usize,
) -> Vec<f64> {
    let mut f = Vec::with_capacity(FEATURES);
    f.extend_from_slice(progress);
    f.extend_from_slice(loss_trend);
    for m in momenta {
        let n = m.len().max(1) as f64;
        let mean = m.iter().sum::<f64>() / n;
        let rms = (m.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        f.push(mean.tanh());
        f.push(rms.tanh());
    }
    for r in 0..5 {
        f.push(if r == rank { 1.0 } else { 0.0 });
    }
    f
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub w_z: Vec<f64>,
    pub u_z: Vec<f64>,
    pub b_z: Vec<f64>,
    pub w_r: Vec<f64>,
    pub u_r: Vec<f64>,
    pub b_r: Vec<f64>,
    pub w_h: Vec<f64>,
    pub u_h: Vec<f64>,
    pub b_h: Vec<f64>,
}

/// Shared controller weights: a single-layer gated recurrent cell plus the
/// linear head that emits predictor weights and (d, c_lr).
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedOptWeights {
    pub gru: GruWeights,
    /// HEAD_OUT x CONTROLLER_WIDTH, row-major.
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

/// Offsets of `d` and `c_lr` in the head output.
pub const HEAD_D: usize = PRED_WEIGHTS;
pub const HEAD_CLR: usize = PRED_WEIGHTS + 1;

impl LearnedOptWeights {
    /// Seeded fallback initialization. The head bias encodes a predictor
    /// that passes the preconditioned momentum feature through, with
    /// d = 1 and c_lr = 0, so first-step updates stay within
    /// 1e-3 * ||theta||_2 per parameter.
    pub fn fallback(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Values are drawn at f32 precision so bundle round-trips are
        // bit exact.
        let mut uniform = |n: usize, bound: f32| -> Vec<f64> {
            (0..n)
                .map(|_| rng.random_range(-bound..bound) as f64)
                .collect()
        };
        let wh = CONTROLLER_WIDTH;
        let mut gru = GruWeights {
            w_z: uniform(wh * FEATURES, 0.05),
            u_z: uniform(wh * wh, 0.02),
            b_z: uniform(wh, 0.05),
            w_r: uniform(wh * FEATURES, 0.05),
            u_r: uniform(wh * wh, 0.02),
            b_r: uniform(wh, 0.05),
            w_h: uniform(wh * FEATURES, 0.05),
            u_h: uniform(wh * wh, 0.02),
            b_h: uniform(wh, 0.05),
        };
        // Hidden units 0 and 1 are wired as schedule gates: their update
        // gates are pinned open and their candidates read only the shared
        // progress features, so each swings from -1 to +1 at a fixed
        // point of the horizon. Unit 0 opens around t/T = 0.02 (warmup),
        // unit 1 around t/T = 0.8 (late anneal). The c_lr head couples to
        // both so the scalar learning rate rises to its peak after warmup
        // and decays steeply at the end, which the polish phase of a fit
        // needs to settle below the fixed-step oscillation floor.
        let wire = |gru: &mut GruWeights, unit: usize, bias: f64| {
            gru.w_z[unit * FEATURES..(unit + 1) * FEATURES]
                .iter_mut()
                .for_each(|v| *v = 0.0);
            gru.u_z[unit * wh..(unit + 1) * wh].iter_mut().for_each(|v| *v = 0.0);
            gru.b_z[unit] = 10.0;
            gru.w_h[unit * FEATURES..(unit + 1) * FEATURES]
                .iter_mut()
                .for_each(|v| *v = 0.0);
            for v in &mut gru.w_h[unit * FEATURES..unit * FEATURES + PROGRESS_THRESHOLDS.len()] {
                *v = 2.0;
            }
            gru.u_h[unit * wh..(unit + 1) * wh].iter_mut().for_each(|v| *v = 0.0);
            gru.b_h[unit] = bias as f32 as f64;
        };
        wire(&mut gru, 0, 18.66);
        wire(&mut gru, 1, -12.0);
        let sum0: f64 = PROGRESS_THRESHOLDS.iter().map(|s| (10.0 * -s).tanh()).sum();
        let gate0 = (2.0 * sum0 + 18.66).tanh();
        let late0 = (2.0 * sum0 - 12.0).tanh();
        // Rounded through f32 like everything else for bit-exact bundles.
        let w_gate = (CLR_PEAK / (1.0 - gate0)) as f32 as f64;
        let w_late = ((CLR_FINAL - CLR_PEAK) / (1.0 - late0)) as f32 as f64;
        let mut head_w = uniform(HEAD_OUT * wh, 1e-4);
        head_w[HEAD_CLR * wh] = w_gate;
        head_w[HEAD_CLR * wh + 1] = w_late;
        let mut head_b = vec![0.0; HEAD_OUT];
        // Predictor baseline: route feature 1 (preconditioned momentum at
        // decay 0.9) through both hidden layers with gain 2.
        head_b[1] = 2.0; // W1[0][1]
        head_b[PRED_HIDDEN * PRED_IN + PRED_HIDDEN] = 2.0; // W2[0][0]
        head_b[PRED_HIDDEN * PRED_IN + PRED_HIDDEN + PRED_HIDDEN * PRED_HIDDEN + PRED_HIDDEN] = 1.0; // W3[0][0]
        head_b[HEAD_D] = 1.0;
        // Bias cancels the schedule gates' t=0 values so c_lr starts at 0.
        head_b[HEAD_CLR] = (-w_gate * gate0 - w_late * late0) as f32 as f64;
        LearnedOptWeights {
            gru,
            head_w,
            head_b,
        }
    }

    fn named_tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("gru.w_z", &self.gru.w_z),
            ("gru.u_z", &self.gru.u_z),
            ("gru.b_z", &self.gru.b_z),
            ("gru.w_r", &self.gru.w_r),
            ("gru.u_r", &self.gru.u_r),
            ("gru.b_r", &self.gru.b_r),
            ("gru.w_h", &self.gru.w_h),
            ("gru.u_h", &self.gru.u_h),
            ("gru.b_h", &self.gru.b_h),
            ("head.w", &self.head_w),
            ("head.b", &self.head_b),
        ]
    }
}

const BUNDLE_MAGIC: &[u8; 4] = b"VOPT";

/// Write a learned-weight bundle: magic "VOPT", u32 tensor count, then per
/// tensor a length-prefixed name, u32 element count and f32 LE values.
pub fn save_learned_weights(weights: &LearnedOptWeights, path: &Path) -> Result<()> {
    let tensors = weights.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, values) in tensors {
        out.push(name.len() as u8);
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for &v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Load a learned-weight bundle written by [`save_learned_weights`].
pub fn load_learned_weights(path: &Path) -> Result<LearnedOptWeights> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[0..4] != BUNDLE_MAGIC {
        return Err(InifError::BadMagic { expected: "VOPT" });
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut weights = LearnedOptWeights::fallback(FALLBACK_SEED);
    let expected = weights.named_tensors().len();
    if count != expected {
        return Err(InifError::MalformedBundle(format!(
            "bundle has {count} tensors, expected {expected}"
        )));
    }
    let mut pos = 8;
    let mut take = |n: usize| -> Result<usize> {
        if pos + n > bytes.len() {
            return Err(InifError::MalformedBundle("bundle truncated".into()));
        }
        let at = pos;
        pos += n;
        Ok(at)
    };
    for _ in 0..count {
        let at = take(1)?;
        let name_len = bytes[at] as usize;
        let at = take(name_len)?;
        let name = std::str::from_utf8(&bytes[at..at + name_len])
            .map_err(|_| InifError::MalformedBundle("non-UTF8 tensor name".into()))?
            .to_string();
        let at = take(4)?;
        let elems = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let at = take(elems * 4)?;
        let values: Vec<f64> = bytes[at..at + elems * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let slot: &mut Vec<f64> = match name.as_str() {
            "gru.w_z" => &mut weights.gru.w_z,
            "gru.u_z" => &mut weights.gru.u_z,
            "gru.b_z" => &mut weights.gru.b_z,
            "gru.w_r" => &mut weights.gru.w_r,
            "gru.u_r" => &mut weights.gru.u_r,
            "gru.b_r" => &mut weights.gru.b_r,
            "gru.w_h" => &mut weights.gru.w_h,
            "gru.u_h" => &mut weights.gru.u_h,
            "gru.b_h" => &mut weights.gru.b_h,
            "head.w" => &mut weights.head_w,
            "head.b" => &mut weights.head_b,
            other => {
                return Err(InifError::MalformedBundle(format!(
                    "unknown tensor {other:?}"
                )))
            }
        };
        if slot.len() != values.len() {
            return Err(InifError::MalformedBundle(format!(
                "tensor {name} has {} elements, expected {}",
                values.len(),
                slot.len()
            )));
        }
        *slot = values;
    }
    Ok(weights)
}

#[derive(Debug, Clone)]
struct TensorState {
    hidden: Vec<f64>,
    momenta: Vec<Vec<f64>>,
    second: Vec<f64>,
    rank: usize,
}

/// Full learned-optimizer state. The only training knob is the total step
/// count `total`; there is deliberately no step-size argument anywhere in
/// this interface.
#[derive(Debug, Clone)]
pub struct LearnedOptState {
    pub weights: LearnedOptWeights,
    tensors: Vec<TensorState>,
    loss: LossTracker,
    pub t: usize,
    pub total: usize,
}

impl LearnedOptState {
    pub fn new(weights: LearnedOptWeights, params: &SirenParams, total: usize) -> Result<Self> {
        if total == 0 {
            return Err(InifError::InvalidArgument("total steps T must be > 0".into()));
        }
        let tensors = params
            .tensors()
            .iter()
            .zip(params.tensor_ranks())
            .map(|(t, rank)| TensorState {
                hidden: vec![0.0; CONTROLLER_WIDTH],
                momenta: vec![vec![0.0; t.len()]; DECAY_BANK.len()],
                second: vec![0.0; t.len()],
                rank,
            })
            .collect();
        Ok(LearnedOptState {
            weights,
            tensors,
            loss: LossTracker::default(),
            t: 0,
            total,
        })
    }

    pub fn step(
        &mut self,
        params: &mut SirenParams,
        grads: &Gradients,
        loss: f64,
    ) -> Result<()> {
        if !loss.is_finite() {
            return Err(InifError::Diverged {
                step: self.t,
                what: "non-finite loss".into(),
            });
        }
        let grad_tensors = grads.tensors();
        let mut param_tensors = params.tensors_mut();
        if grad_tensors.len() != self.tensors.len() {
            return Err(InifError::ShapeMismatch(
                "optimizer state does not mirror params".into(),
            ));
        }
        self.loss.record(loss);
        let step_index = self.t + 1; // for bias correction
        let progress = progress_features(self.t.min(self.total), self.total, &PROGRESS_THRESHOLDS)?;
        let loss_trend = self.loss.features();
        for (ti, ts) in self.tensors.iter_mut().enumerate() {
            let g = grad_tensors[ti];
            let p = &mut param_tensors[ti];
            for (m, &beta) in ts.momenta.iter_mut().zip(DECAY_BANK.iter()) {
                for (mj, &gj) in m.iter_mut().zip(g.iter()) {
                    *mj = beta * *mj + (1.0 - beta) * gj;
                }
            }
            for (vj, &gj) in ts.second.iter_mut().zip(g.iter()) {
                *vj = SECOND_MOMENT_DECAY * *vj + (1.0 - SECOND_MOMENT_DECAY) * gj * gj;
            }
            let features = tensor_features(&progress, &loss_trend, &ts.momenta, ts.rank);
            gru_step(&self.weights.gru, &features, &mut ts.hidden);
            let head = head_output(&self.weights, &ts.hidden);
            let (pred_weights, d, c_lr) = (&head[..PRED_WEIGHTS], head[HEAD_D], head[HEAD_CLR]);
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = 0.001 * d * (0.001 * c_lr).exp() * norm;
            for j in 0..p.len() {
                let pf = per_param_features(
                    g[j],
                    &ts.momenta.iter().map(|m| m[j]).collect::<Vec<_>>(),
                    ts.second[j],
                    step_index,
                );
                let raw = predictor_forward(pred_weights, &pf);
                let delta = scale * raw;
                if !delta.is_finite() {
                    return Err(InifError::Diverged {
                        step: self.t,
                        what: format!("non-finite update in tensor {ti}"),
                    });
                }
                p[j] -= delta;
            }
        }
        self.t += 1;
        Ok(())
    }
}

fn gru_step(gru: &GruWeights, x: &[f64], h: &mut [f64]) {
    let wh = CONTROLLER_WIDTH;
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let gate = |w: &[f64], u: &[f64], b: &[f64], hin: &[f64]| -> Vec<f64> {
        (0..wh)
            .map(|o| {
                let mut acc = b[o];
                let wrow = &w[o * FEATURES..(o + 1) * FEATURES];
                for (i, &xi) in x.iter().enumerate() {
                    acc += wrow[i] * xi;
                }
                let urow = &u[o * wh..(o + 1) * wh];
                for (i, &hi) in hin.iter().enumerate() {
                    acc += urow[i] * hi;
                }
                acc
            })
            .collect()
    };
    let z: Vec<f64> = gate(&gru.w_z, &gru.u_z, &gru.b_z, h)
        .into_iter()
        .map(sigmoid)
        .collect();
    let r: Vec<f64> = gate(&gru.w_r, &gru.u_r, &gru.b_r, h)
        .into_iter()
        .map(sigmoid)
        .collect();
    let rh: Vec<f64> = r.iter().zip(h.iter()).map(|(ri, hi)| ri * hi).collect();
    let cand: Vec<f64> = gate(&gru.w_h, &gru.u_h, &gru.b_h, &rh)
        .into_iter()
        .map(f64::tanh)
        .collect();
    for o in 0..wh {
        h[o] = (1.0 - z[o]) * h[o] + z[o] * cand[o];
    }
}

fn head_output(weights: &LearnedOptWeights, h: &[f64]) -> Vec<f64> {
    (0..HEAD_OUT)
        .map(|o| {
            let row = &weights.head_w[o * CONTROLLER_WIDTH..(o + 1) * CONTROLLER_WIDTH];
            weights.head_b[o]
                + row
                    .iter()
                    .zip(h.iter())
                    .map(|(w, hv)| w * hv)
                    .sum::<f64>()
        })
        .collect()
}

/// Per-parameter predictor inputs: preconditioned gradient, the four
/// preconditioned momenta and a squashed second-moment magnitude.
pub fn per_param_features(g: f64, momenta: &[f64], second: f64, step: usize) -> [f64; PRED_IN] {
    let vhat = second / (1.0 - SECOND_MOMENT_DECAY.powi(step as i32));
    let denom = vhat.sqrt() + 1e-8;
    let mut f = [0.0; PRED_IN];
    f[0] = g / denom;
    for (k, &m) in momenta.iter().enumerate().take(DECAY_BANK.len()) {
        let mhat = m / (1.0 - DECAY_BANK[k].powi(step as i32));
        f[1 + k] = mhat / denom;
    }
    f[5] = vhat.sqrt().tanh();
    f
}

/// Evaluate the tiny predictor MLP on one parameter's features.
pub fn predictor_forward(w: &[f64], features: &[f64; PRED_IN]) -> f64 {
    debug_assert_eq!(w.len(), PRED_WEIGHTS);
    let mut pos = 0;
    let mut h1 = [0.0; PRED_HIDDEN];
    for o in 0..PRED_HIDDEN {
        let mut acc = 0.0;
        for i in 0..PRED_IN {
            acc += w[pos + o * PRED_IN + i] * features[i];
        }
        h1[o] = acc;
    }
    pos += PRED_HIDDEN * PRED_IN;
    for (o, h) in h1.iter_mut().enumerate() {
        *h = (*h + w[pos + o]).tanh();
    }
    pos += PRED_HIDDEN;
    let mut h2 = [0.0; PRED_HIDDEN];
    for o in 0..PRED_HIDDEN {
        let mut acc = 0.0;
        for i in 0..PRED_HIDDEN {
            acc += w[pos + o * PRED_HIDDEN + i] * h1[i];
        }
        h2[o] = acc;
    }
    pos += PRED_HIDDEN * PRED_HIDDEN;
    for (o, h) in h2.iter_mut().enumerate() {
        *h = (*h + w[pos + o]).tanh();
    }
    pos += PRED_HIDDEN;
    let mut out = 0.0;
    for i in 0..PRED_HIDDEN {
        out += w[pos + i] * h2[i];
    }
    out + w[pos + PRED_HIDDEN]
}

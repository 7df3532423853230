//! Fixed-block transform codec used as the fast-mode prior, plus the
//! hyperbolic rate-control model that picks its quantization parameter.
//!
//! Each (t, c, z) plane is tiled into BxB blocks, transformed with an
//! orthonormal 2D DCT-II, uniformly quantized and entropy coded with
//! zig-zag run-length + exponential Golomb codes. There is no prediction
//! between blocks or planes; cross-plane redundancy is left to the
//! coordinate network.

use crate::error::{InifError, Result};
use crate::volume::{normalize_with, shape_len, Dtype, NormParams, Volume, AXES};

/// Largest quantization parameter the rate controller will try.
pub const QP_MAX: u8 = 51;
/// Constants of the lambda-to-QP mapping.
pub const QP_C1: f64 = 4.2005;
pub const QP_C2: f64 = 13.7122;

const STREAM_MAGIC: &[u8; 4] = b"BDC1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockCodecConfig {
    pub block: usize,
    pub qp: u8,
}

impl BlockCodecConfig {
    pub fn new(block: usize, qp: u8) -> Result<Self> {
        if !matches!(block, 4 | 8 | 16) {
            return Err(InifError::InvalidArgument(format!(
                "block size {block} not in {{4, 8, 16}}"
            )));
        }
        if qp > QP_MAX {
            return Err(InifError::InvalidArgument(format!(
                "quantization parameter {qp} above {QP_MAX}"
            )));
        }
        Ok(BlockCodecConfig { block, qp })
    }
}

impl Default for BlockCodecConfig {
    fn default() -> Self {
        BlockCodecConfig { block: 8, qp: 30 }
    }
}

/// Quantization step: doubles every six QP.
pub fn quant_step(qp: u8) -> f64 {
    2f64.powf((qp as f64 - 4.0) / 6.0)
}

/// An encoded volume: self-describing header plus entropy-coded blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub block: u8,
    pub qp: u8,
    pub dtype: Dtype,
    pub shape: [usize; AXES],
    pub bit_len: u64,
    pub payload: Vec<u8>,
    /// Rate-control multiplier when the stream was produced by
    /// [`rate_control_encode`].
    pub lambda: Option<f64>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload.len() + 40);
        out.extend_from_slice(STREAM_MAGIC);
        out.push(self.block);
        out.push(self.qp);
        out.push(self.dtype.code());
        out.push(AXES as u8);
        for &len in &self.shape {
            out.extend_from_slice(&(len as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.bit_len.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = 4 + 4 + 4 * AXES + 8;
        if bytes.len() < 4 || &bytes[0..4] != STREAM_MAGIC {
            return Err(InifError::BadMagic { expected: "BDC1" });
        }
        if bytes.len() < header {
            return Err(InifError::Truncated {
                need: header,
                have: bytes.len(),
            });
        }
        let block = bytes[4];
        let qp = bytes[5];
        let dtype = Dtype::from_code(bytes[6])?;
        if bytes[7] as usize != AXES {
            return Err(InifError::CorruptStream(format!(
                "axis count {} in block stream",
                bytes[7]
            )));
        }
        let mut shape = [0usize; AXES];
        for (a, s) in shape.iter_mut().enumerate() {
            let off = 8 + 4 * a;
            *s = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        }
        let bit_len = u64::from_le_bytes(bytes[28..36].try_into().unwrap());
        let payload_bytes = bit_len.div_ceil(8) as usize;
        if bytes.len() < header + payload_bytes {
            return Err(InifError::CorruptStream(format!(
                "payload wants {payload_bytes} bytes, stream has {}",
                bytes.len() - header
            )));
        }
        Ok(Bitstream {
            block,
            qp,
            dtype,
            shape,
            bit_len,
            payload: bytes[header..header + payload_bytes].to_vec(),
            lambda: None,
        })
    }

    /// Serialized size in bytes.
    pub fn total_bytes(&self) -> usize {
        4 + 4 + 4 * AXES + 8 + self.payload.len()
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    bit_len: u64,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            bytes: Vec::new(),
            bit_len: 0,
        }
    }

    fn push_bit(&mut self, bit: bool) {
        let at = (self.bit_len % 8) as u8;
        if at == 0 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 0x80 >> at;
        }
        self.bit_len += 1;
    }

    /// Order-0 exponential Golomb code of a non-negative integer.
    fn push_eg(&mut self, value: u64) {
        let v = value + 1;
        let bits = 64 - v.leading_zeros() as u64;
        for _ in 0..bits - 1 {
            self.push_bit(false);
        }
        for i in (0..bits).rev() {
            self.push_bit(v >> i & 1 == 1);
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
    bit_len: u64,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8], bit_len: u64) -> Self {
        BitReader {
            bytes,
            pos: 0,
            bit_len,
        }
    }

    fn read_bit(&mut self) -> Result<bool> {
        if self.pos >= self.bit_len {
            return Err(InifError::CorruptStream("bitstream exhausted".into()));
        }
        let byte = self.bytes[(self.pos / 8) as usize];
        let bit = byte >> (7 - self.pos % 8) & 1 == 1;
        self.pos += 1;
        Ok(bit)
    }

    fn read_eg(&mut self) -> Result<u64> {
        let mut zeros = 0u32;
        while !self.read_bit()? {
            zeros += 1;
            if zeros > 63 {
                return Err(InifError::CorruptStream("oversized Golomb prefix".into()));
            }
        }
        let mut v: u64 = 1;
        for _ in 0..zeros {
            v = v << 1 | self.read_bit()? as u64;
        }
        Ok(v - 1)
    }
}

fn signed_to_code(level: i64) -> u64 {
    if level > 0 {
        2 * (level as u64 - 1)
    } else {
        (-2 * level - 1) as u64
    }
}

fn code_to_signed(code: u64) -> i64 {
    if code % 2 == 0 {
        code as i64 / 2 + 1
    } else {
        -((code as i64 + 1) / 2)
    }
}

/// Orthonormal DCT-II basis matrix: m[k][n].
fn dct_matrix(b: usize) -> Vec<f64> {
    let mut m = vec![0.0; b * b];
    for k in 0..b {
        let scale = if k == 0 {
            (1.0 / b as f64).sqrt()
        } else {
            (2.0 / b as f64).sqrt()
        };
        for n in 0..b {
            m[k * b + n] =
                scale * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2 * b) as f64).cos();
        }
    }
    m
}

/// Forward 2D transform: M X M^T.
fn dct2d(block: &[f64], m: &[f64], b: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; b * b];
    for k in 0..b {
        for x in 0..b {
            let mut acc = 0.0;
            for n in 0..b {
                acc += m[k * b + n] * block[n * b + x];
            }
            tmp[k * b + x] = acc;
        }
    }
    let mut out = vec![0.0; b * b];
    for y in 0..b {
        for k in 0..b {
            let mut acc = 0.0;
            for n in 0..b {
                acc += tmp[y * b + n] * m[k * b + n];
            }
            out[y * b + k] = acc;
        }
    }
    out
}

/// Inverse 2D transform: M^T C M.
fn idct2d(coeffs: &[f64], m: &[f64], b: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; b * b];
    for n in 0..b {
        for x in 0..b {
            let mut acc = 0.0;
            for k in 0..b {
                acc += m[k * b + n] * coeffs[k * b + x];
            }
            tmp[n * b + x] = acc;
        }
    }
    let mut out = vec![0.0; b * b];
    for y in 0..b {
        for n in 0..b {
            let mut acc = 0.0;
            for k in 0..b {
                acc += tmp[y * b + k] * m[k * b + n];
            }
            out[y * b + n] = acc;
        }
    }
    out
}

/// Diagonal scan order of a BxB block.
fn zigzag_order(b: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(b * b);
    for s in 0..2 * b - 1 {
        if s % 2 == 0 {
            // Walk up-right.
            let y0 = s.min(b - 1);
            let x0 = s - y0;
            let (mut y, mut x) = (y0 as i64, x0 as i64);
            while y >= 0 && (x as usize) < b {
                order.push(y as usize * b + x as usize);
                y -= 1;
                x += 1;
            }
        } else {
            let x0 = s.min(b - 1);
            let y0 = s - x0;
            let (mut y, mut x) = (y0 as i64, x0 as i64);
            while x >= 0 && (y as usize) < b {
                order.push(y as usize * b + x as usize);
                y += 1;
                x -= 1;
            }
        }
    }
    order
}

/// Encode a volume plane by plane.
pub fn encode_volume(v: &Volume, cfg: &BlockCodecConfig) -> Result<Bitstream> {
    if v.voxel_count() == 0 {
        return Err(InifError::InvalidShape("empty volume".into()));
    }
    let b = cfg.block;
    let q = quant_step(cfg.qp);
    let m = dct_matrix(b);
    let zz = zigzag_order(b);
    let (height, width) = (v.shape[3], v.shape[4]);
    let planes = v.shape[0] * v.shape[1] * v.shape[2];
    let by = height.div_ceil(b);
    let bx = width.div_ceil(b);
    let mut writer = BitWriter::new();
    let mut block = vec![0.0; b * b];
    for p in 0..planes {
        let base = p * height * width;
        for iy in 0..by {
            for ix in 0..bx {
                // Replicate-padded block gather.
                for dy in 0..b {
                    let y = (iy * b + dy).min(height - 1);
                    for dx in 0..b {
                        let x = (ix * b + dx).min(width - 1);
                        block[dy * b + dx] = v.data[base + y * width + x];
                    }
                }
                let coeffs = dct2d(&block, &m, b);
                let levels: Vec<i64> = zz
                    .iter()
                    .map(|&at| (coeffs[at] / q).round() as i64)
                    .collect();
                let nonzero = levels.iter().filter(|&&l| l != 0).count();
                writer.push_eg(nonzero as u64);
                let mut run = 0u64;
                for &l in &levels {
                    if l == 0 {
                        run += 1;
                    } else {
                        writer.push_eg(run);
                        writer.push_eg(signed_to_code(l));
                        run = 0;
                    }
                }
            }
        }
    }
    Ok(Bitstream {
        block: b as u8,
        qp: cfg.qp,
        dtype: v.dtype,
        shape: v.shape,
        bit_len: writer.bit_len,
        payload: writer.bytes,
        lambda: None,
    })
}

/// Decode a block stream back to a volume. Integer dtypes are rounded to
/// the storage grid; float volumes keep the dequantized values.
pub fn decode_volume(bs: &Bitstream) -> Result<Volume> {
    let planes = bs.shape[0] * bs.shape[1] * bs.shape[2];
    let decoded = decode_planes(bs, &vec![true; planes])?;
    let plane_len = bs.shape[3] * bs.shape[4];
    let mut data = vec![0.0; shape_len(&bs.shape)];
    for (p, pixels) in decoded {
        data[p * plane_len..(p + 1) * plane_len].copy_from_slice(&pixels);
    }
    Volume::new(bs.shape, bs.dtype, data)
}

/// Decode only the flagged (t, c, z) planes. The entropy stream is still
/// parsed front to back, but the inverse transform runs only for wanted
/// planes; the returned planes are identical to a full decode.
pub fn decode_planes(bs: &Bitstream, wanted: &[bool]) -> Result<Vec<(usize, Vec<f64>)>> {
    let b = bs.block as usize;
    if !matches!(b, 4 | 8 | 16) {
        return Err(InifError::CorruptStream(format!("block size {b}")));
    }
    crate::volume::validate_shape(&bs.shape)?;
    let planes = bs.shape[0] * bs.shape[1] * bs.shape[2];
    if wanted.len() != planes {
        return Err(InifError::ShapeMismatch(format!(
            "{} plane flags for {planes} planes",
            wanted.len()
        )));
    }
    let q = quant_step(bs.qp);
    let m = dct_matrix(b);
    let zz = zigzag_order(b);
    let (height, width) = (bs.shape[3], bs.shape[4]);
    let by = height.div_ceil(b);
    let bx = width.div_ceil(b);
    let mut reader = BitReader::new(&bs.payload, bs.bit_len);
    let mut out = Vec::new();
    let mut coeffs = vec![0.0; b * b];
    for (p, &want) in wanted.iter().enumerate() {
        let mut plane = if want {
            Some(vec![0.0; height * width])
        } else {
            None
        };
        for iy in 0..by {
            for ix in 0..bx {
                coeffs.iter_mut().for_each(|c| *c = 0.0);
                let nonzero = reader.read_eg()? as usize;
                if nonzero > b * b {
                    return Err(InifError::CorruptStream(format!(
                        "{nonzero} coefficients in a {b}x{b} block"
                    )));
                }
                let mut at = 0usize;
                for _ in 0..nonzero {
                    at += reader.read_eg()? as usize;
                    if at >= b * b {
                        return Err(InifError::CorruptStream("scan overrun".into()));
                    }
                    let level = code_to_signed(reader.read_eg()?);
                    coeffs[zz[at]] = level as f64 * q;
                    at += 1;
                }
                let Some(plane) = plane.as_mut() else {
                    continue;
                };
                let pixels = idct2d(&coeffs, &m, b);
                for dy in 0..b {
                    let y = iy * b + dy;
                    if y >= height {
                        break;
                    }
                    for dx in 0..b {
                        let x = ix * b + dx;
                        if x >= width {
                            break;
                        }
                        plane[y * width + x] = bs.dtype.clamp_round(pixels[dy * b + dx]);
                    }
                }
            }
        }
        if let Some(plane) = plane {
            out.push((p, plane));
        }
    }
    Ok(out)
}

/// Hyperbolic distortion-rate model D = C R^{-K} and its derived
/// lambda-rate law lambda = alpha R^beta.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateModel {
    pub c: f64,
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl RateModel {
    pub fn from_dr(c: f64, k: f64) -> Result<Self> {
        if c <= 0.0 || k <= 0.0 {
            return Err(InifError::InvalidArgument(format!(
                "distortion-rate model C {c}, K {k}"
            )));
        }
        Ok(RateModel {
            c,
            k,
            alpha: c * k,
            beta: -k - 1.0,
        })
    }

    pub fn distortion(&self, rate: f64) -> f64 {
        self.c * rate.powf(-self.k)
    }
}

/// QP = c1 ln(lambda) + c2; strictly increasing in lambda.
pub fn qp_from_lambda(lambda: f64) -> Result<f64> {
    if lambda <= 0.0 {
        return Err(InifError::InvalidArgument(format!(
            "non-positive lambda {lambda}"
        )));
    }
    Ok(QP_C1 * lambda.ln() + QP_C2)
}

/// lambda = alpha R^beta.
pub fn lambda_from_rate(model: &RateModel, rate: f64) -> Result<f64> {
    if rate <= 0.0 {
        return Err(InifError::InvalidArgument(format!(
            "non-positive rate {rate}"
        )));
    }
    Ok(model.alpha * rate.powf(model.beta))
}

/// Least-squares fit of ln D = ln C - K ln R over (rate, distortion)
/// samples.
pub fn fit_rate_model(samples: &[(f64, f64)]) -> Result<RateModel> {
    if samples.len() < 2 {
        return Err(InifError::InvalidArgument(format!(
            "{} rate samples, need at least 2",
            samples.len()
        )));
    }
    if samples.iter().any(|&(r, d)| r <= 0.0 || d <= 0.0) {
        return Err(InifError::InvalidArgument(
            "rates and distortions must be positive".into(),
        ));
    }
    let n = samples.len() as f64;
    let xs: Vec<f64> = samples.iter().map(|&(r, _)| r.ln()).collect();
    let ys: Vec<f64> = samples.iter().map(|&(_, d)| d.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx < 1e-12 {
        return Err(InifError::InvalidArgument(
            "degenerate samples: all rates equal".into(),
        ));
    }
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum();
    let slope = sxy / sxx;
    let k = -slope;
    let c = (my - slope * mx).exp();
    if k <= 0.0 {
        return Err(InifError::InvalidArgument(format!(
            "fitted distortion grows with rate (K = {k:.4})"
        )));
    }
    RateModel::from_dr(c, k)
}

/// Split a byte budget between the block codec and the network payload.
/// The network part is raised to `min_inr_bytes` when the nominal split
/// leaves less than that.
pub fn allocate_bits(
    total_budget_bytes: usize,
    split: f64,
    min_inr_bytes: usize,
) -> Result<(usize, usize)> {
    if !(0.0..1.0).contains(&split) || split <= 0.0 {
        return Err(InifError::InvalidArgument(format!(
            "split {split} must lie strictly between 0 and 1"
        )));
    }
    let mut codec = (total_budget_bytes as f64 * split).floor() as usize;
    let mut inr = total_budget_bytes - codec;
    if inr < min_inr_bytes {
        if total_budget_bytes <= min_inr_bytes {
            return Err(InifError::BudgetInfeasible(format!(
                "budget {total_budget_bytes} cannot hold a {min_inr_bytes}-byte network payload"
            )));
        }
        inr = min_inr_bytes;
        codec = total_budget_bytes - inr;
    }
    if codec == 0 {
        return Err(InifError::BudgetInfeasible(format!(
            "no bytes left for the block codec out of {total_budget_bytes}"
        )));
    }
    Ok((codec, inr))
}

const PROBE_QPS: [u8; 3] = [22, 30, 38];

/// Pick the smallest QP whose encoded size fits `target_bytes`. Probe
/// encodes seed the rate model (recorded as lambda in the stream); the
/// final QP comes from bisection over the monotone size curve.
pub fn rate_control_encode(v: &Volume, target_bytes: usize, block: usize) -> Result<Bitstream> {
    let encode_at = |qp: u8| -> Result<Bitstream> {
        encode_volume(v, &BlockCodecConfig::new(block, qp)?)
    };
    let ceiling = encode_at(QP_MAX)?;
    if ceiling.total_bytes() > target_bytes {
        return Err(InifError::RateTargetInfeasible(format!(
            "{} bytes at QP {QP_MAX} exceeds target {target_bytes}",
            ceiling.total_bytes()
        )));
    }
    // Probe encodes give (rate, distortion) samples for the model; the
    // model only informs lambda bookkeeping, correctness rests on the
    // bisection below.
    let mut samples = Vec::new();
    let mut probes: Vec<(u8, Bitstream)> = Vec::new();
    for qp in PROBE_QPS {
        let bs = encode_at(qp)?;
        let decoded = decode_volume(&bs)?;
        let mse = v
            .data
            .iter()
            .zip(&decoded.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / v.voxel_count() as f64;
        if mse > 0.0 {
            samples.push((bs.total_bytes() as f64, mse));
        }
        probes.push((qp, bs));
    }
    let lambda = fit_rate_model(&samples)
        .ok()
        .and_then(|model| lambda_from_rate(&model, target_bytes as f64).ok());
    // Bisect for the smallest QP that fits, warm-started by the probes.
    let mut lo = 0u8; // may not fit
    let mut hi = QP_MAX; // fits
    let mut best = ceiling;
    for (qp, bs) in probes {
        if bs.total_bytes() <= target_bytes {
            if qp < hi {
                hi = qp;
                best = bs;
            }
        } else if qp > lo {
            lo = qp;
        }
    }
    let fits_at_lo = encode_at(lo)?;
    if fits_at_lo.total_bytes() <= target_bytes {
        hi = lo;
        best = fits_at_lo;
    }
    while hi > lo + 1 {
        let mid = lo + (hi - lo) / 2;
        let bs = encode_at(mid)?;
        if bs.total_bytes() <= target_bytes {
            hi = mid;
            best = bs;
        } else {
            lo = mid;
        }
    }
    best.lambda = lambda;
    Ok(best)
}

/// Residual in normalized intensity space: normalize(raw) minus
/// normalize(decoded), both under the raw volume's channel ranges, so
/// decoded + residual reproduces the raw normalized field exactly.
pub fn compute_residual(raw: &Volume, decoded: &Volume) -> Result<Vec<f64>> {
    if raw.shape != decoded.shape {
        return Err(InifError::ShapeMismatch(format!(
            "raw {:?} vs decoded {:?}",
            raw.shape, decoded.shape
        )));
    }
    let params = NormParams {
        per_channel: raw.channel_range.clone(),
        dtype: raw.dtype,
    };
    let nraw = normalize_with(&raw.data, &raw.shape, &params);
    let ndec = normalize_with(&decoded.data, &decoded.shape, &params);
    Ok(nraw.iter().zip(&ndec).map(|(a, b)| a - b).collect())
}

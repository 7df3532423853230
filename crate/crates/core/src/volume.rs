//! N-dimensional volume container, NDV container I/O, intensity/coordinate
//! normalization, ROI enumeration and synthetic phantom volumes.
//!
//! Axis convention is fixed to (T, C, Z, Y, X); absent axes have length 1.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{InifError, Result};

/// Number of axes in the fixed (T, C, Z, Y, X) convention.
pub const AXES: usize = 5;

pub const NDV_MAGIC: &[u8; 4] = b"NDV1";

/// Intensity value range that normalized volumes live in.
pub const NORM_MAX: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U8,
    U16,
    F32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::U8 => 0,
            Dtype::U16 => 1,
            Dtype::F32 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::U8),
            1 => Ok(Dtype::U16),
            2 => Ok(Dtype::F32),
            other => Err(InifError::UnsupportedDtype(other)),
        }
    }

    pub fn bytes_per_voxel(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 => 2,
            Dtype::F32 => 4,
        }
    }

    /// Upper end of the representable intensity range. For floating point
    /// data the nominal range is [0, 1].
    pub fn max_value(self) -> f64 {
        match self {
            Dtype::U8 => u8::MAX as f64,
            Dtype::U16 => u16::MAX as f64,
            Dtype::F32 => 1.0,
        }
    }

    /// One quantization step of the dtype.
    pub fn quantum(self) -> f64 {
        match self {
            Dtype::U8 | Dtype::U16 => 1.0,
            Dtype::F32 => f32::EPSILON as f64,
        }
    }

    pub fn clamp_round(self, v: f64) -> f64 {
        match self {
            Dtype::U8 => v.round().clamp(0.0, u8::MAX as f64),
            Dtype::U16 => v.round().clamp(0.0, u16::MAX as f64),
            Dtype::F32 => v as f32 as f64,
        }
    }
}

/// An N-dimensional intensity volume with a flat row-major buffer.
///
/// Values are held as `f64` in native units; integer dtypes keep integral
/// values so NDV round-trips are bit exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: [usize; AXES],
    pub dtype: Dtype,
    pub data: Vec<f64>,
    /// Per-channel (min, max) of the stored values, in native units.
    pub channel_range: Vec<(f64, f64)>,
}

pub fn shape_len(shape: &[usize; AXES]) -> usize {
    shape.iter().product()
}

pub(crate) fn validate_shape(shape: &[usize; AXES]) -> Result<()> {
    if shape.iter().any(|&l| l == 0) {
        return Err(InifError::InvalidShape(format!(
            "all axis lengths must be >= 1, got {shape:?}"
        )));
    }
    Ok(())
}

impl Volume {
    pub fn new(shape: [usize; AXES], dtype: Dtype, data: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        if shape_len(&shape) != data.len() {
            return Err(InifError::ShapeMismatch(format!(
                "shape {shape:?} wants {} voxels, buffer has {}",
                shape_len(&shape),
                data.len()
            )));
        }
        let channel_range = per_channel_range(&shape, &data);
        Ok(Volume {
            shape,
            dtype,
            data,
            channel_range,
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Raw byte count of the volume in its native dtype.
    pub fn raw_bytes(&self) -> usize {
        self.voxel_count() * self.dtype.bytes_per_voxel()
    }

    pub fn strides(&self) -> [usize; AXES] {
        let s = &self.shape;
        [
            s[1] * s[2] * s[3] * s[4],
            s[2] * s[3] * s[4],
            s[3] * s[4],
            s[4],
            1,
        ]
    }

    pub fn flat_index(&self, idx: &[usize; AXES]) -> Result<usize> {
        flat_index(&self.shape, idx)
    }

    /// Channel of a flat row-major index.
    pub fn channel_of_flat(&self, flat: usize) -> usize {
        let per_channel = self.shape[2] * self.shape[3] * self.shape[4];
        (flat / per_channel) % self.shape[1]
    }

    pub fn load_ndv(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        Self::from_ndv_bytes(&bytes)
    }

    pub fn from_ndv_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[0..4] != NDV_MAGIC {
            return Err(InifError::BadMagic { expected: "NDV1" });
        }
        let dtype = Dtype::from_code(bytes[4])?;
        let axis_count = bytes[7] as usize;
        if axis_count == 0 || axis_count > AXES {
            return Err(InifError::InvalidShape(format!(
                "axis count {axis_count} outside 1..=5"
            )));
        }
        let header_len = 8 + 4 * axis_count;
        if bytes.len() < header_len {
            return Err(InifError::Truncated {
                need: header_len,
                have: bytes.len(),
            });
        }
        // The declared axes are the trailing ones of (T,C,Z,Y,X); leading
        // axes are implied singletons.
        let mut shape = [1usize; AXES];
        for a in 0..axis_count {
            let off = 8 + 4 * a;
            let len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            shape[AXES - axis_count + a] = len;
        }
        validate_shape(&shape)?;
        let voxels = shape_len(&shape);
        let need = header_len + voxels * dtype.bytes_per_voxel();
        if bytes.len() < need {
            return Err(InifError::Truncated {
                need,
                have: bytes.len(),
            });
        }
        let payload = &bytes[header_len..need];
        let mut data = Vec::with_capacity(voxels);
        match dtype {
            Dtype::U8 => data.extend(payload.iter().map(|&b| b as f64)),
            Dtype::U16 => {
                for c in payload.chunks_exact(2) {
                    data.push(u16::from_le_bytes([c[0], c[1]]) as f64);
                }
            }
            Dtype::F32 => {
                for c in payload.chunks_exact(4) {
                    data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
                }
            }
        }
        Volume::new(shape, dtype, data)
    }

    pub fn to_ndv_bytes(&self) -> Vec<u8> {
        // Store the trailing axes starting at the first non-singleton one,
        // but always keep at least Y,X so 2D images stay 2D.
        let mut first = 0;
        while first < AXES - 2 && self.shape[first] == 1 {
            first += 1;
        }
        let axis_count = AXES - first;
        let mut out = Vec::with_capacity(8 + 4 * axis_count + self.raw_bytes());
        out.extend_from_slice(NDV_MAGIC);
        out.push(self.dtype.code());
        out.extend_from_slice(&[0, 0]); // reserved
        out.push(axis_count as u8);
        for a in first..AXES {
            out.extend_from_slice(&(self.shape[a] as u32).to_le_bytes());
        }
        match self.dtype {
            Dtype::U8 => out.extend(self.data.iter().map(|&v| v as u8)),
            Dtype::U16 => {
                for &v in &self.data {
                    out.extend_from_slice(&(v as u16).to_le_bytes());
                }
            }
            Dtype::F32 => {
                for &v in &self.data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn save_ndv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_ndv_bytes())?;
        Ok(())
    }
}

pub fn flat_index(shape: &[usize; AXES], idx: &[usize; AXES]) -> Result<usize> {
    let mut flat = 0usize;
    for a in 0..AXES {
        if idx[a] >= shape[a] {
            return Err(InifError::IndexOutOfRange(format!(
                "index {idx:?} outside shape {shape:?}"
            )));
        }
        flat = flat * shape[a] + idx[a];
    }
    Ok(flat)
}

pub fn index_of_flat(shape: &[usize; AXES], mut flat: usize) -> [usize; AXES] {
    let mut idx = [0usize; AXES];
    for a in (0..AXES).rev() {
        idx[a] = flat % shape[a];
        flat /= shape[a];
    }
    idx
}

fn per_channel_range(shape: &[usize; AXES], data: &[f64]) -> Vec<(f64, f64)> {
    let channels = shape[1];
    let per_channel = shape[2] * shape[3] * shape[4];
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); channels];
    for (i, &v) in data.iter().enumerate() {
        let c = (i / per_channel) % channels;
        let r = &mut ranges[c];
        r.0 = r.0.min(v);
        r.1 = r.1.max(v);
    }
    ranges
}

/// Per-channel min/max recorded by intensity normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub per_channel: Vec<(f64, f64)>,
    pub dtype: Dtype,
}

/// Min-max normalize intensities into [0, 100], per channel.
///
/// A degenerate channel range (max == min) maps to the constant 0.
pub fn normalize_intensity(v: &Volume) -> (Vec<f64>, NormParams) {
    let params = NormParams {
        per_channel: v.channel_range.clone(),
        dtype: v.dtype,
    };
    let data = normalize_with(&v.data, &v.shape, &params);
    (data, params)
}

/// Normalize a buffer shaped like `shape` with previously recorded params.
pub fn normalize_with(data: &[f64], shape: &[usize; AXES], params: &NormParams) -> Vec<f64> {
    let channels = shape[1];
    let per_channel = shape[2] * shape[3] * shape[4];
    data.iter()
        .enumerate()
        .map(|(i, &y)| {
            let c = (i / per_channel) % channels;
            normalize_value(y, params.per_channel[c])
        })
        .collect()
}

pub fn normalize_value(y: f64, (y_min, y_max): (f64, f64)) -> f64 {
    if y_max > y_min {
        NORM_MAX * (y - y_min) / (y_max - y_min)
    } else {
        0.0
    }
}

/// Inverse of [`normalize_value`], clamped to the recorded range.
pub fn denormalize_value(n: f64, (y_min, y_max): (f64, f64)) -> f64 {
    if y_max > y_min {
        (y_min + n / NORM_MAX * (y_max - y_min)).clamp(y_min, y_max)
    } else {
        y_min
    }
}

/// Coordinate component of index `i` along an axis of length `len`,
/// normalized to [-1, 1]. Endpoints map to exactly -1 and +1.
pub fn coord_component(i: usize, len: usize) -> f64 {
    debug_assert!(len > 1);
    2.0 * i as f64 / (len - 1) as f64 - 1.0
}

/// Coordinate of a grid index: one component per axis with length > 1.
/// Singleton axes contribute no component.
pub fn coord_of_index(idx: &[usize; AXES], shape: &[usize; AXES]) -> Result<Vec<f64>> {
    flat_index(shape, idx)?;
    Ok((0..AXES)
        .filter(|&a| shape[a] > 1)
        .map(|a| coord_component(idx[a], shape[a]))
        .collect())
}

/// Region-of-interest selector over a volume grid.
#[derive(Debug, Clone)]
pub enum RoiSpec {
    /// Half-open per-axis ranges with strides.
    Range {
        lo: [usize; AXES],
        hi: [usize; AXES],
        stride: [usize; AXES],
    },
    /// Explicit index list.
    Indices(Vec<[usize; AXES]>),
    /// Binary mask with the same shape as the volume.
    Mask {
        shape: [usize; AXES],
        mask: Vec<bool>,
    },
}

impl RoiSpec {
    pub fn full(shape: &[usize; AXES]) -> Self {
        RoiSpec::Range {
            lo: [0; AXES],
            hi: *shape,
            stride: [1; AXES],
        }
    }
}

/// Enumeration of the grid points a ROI selects, in row-major ROI order.
#[derive(Debug, Clone)]
pub struct RoiSelection {
    /// Flat row-major index into the volume for each output position.
    pub flat_indices: Vec<usize>,
    /// Output shape for range ROIs; `None` for index lists and masks.
    pub out_shape: Option<[usize; AXES]>,
}

/// Enumerate the grid points selected by `roi`, row-major over the ROI.
/// The returned index map is a bijection onto output positions.
pub fn coords_of_roi(roi: &RoiSpec, shape: &[usize; AXES]) -> Result<RoiSelection> {
    match roi {
        RoiSpec::Range { lo, hi, stride } => {
            let mut out_shape = [0usize; AXES];
            for a in 0..AXES {
                if lo[a] >= hi[a] || hi[a] > shape[a] {
                    return Err(InifError::InvalidRoi(format!(
                        "axis {a}: want 0 <= lo < hi <= {}, got [{}, {})",
                        shape[a], lo[a], hi[a]
                    )));
                }
                if stride[a] == 0 {
                    return Err(InifError::InvalidRoi(format!("axis {a}: stride 0")));
                }
                out_shape[a] = (hi[a] - lo[a]).div_ceil(stride[a]);
            }
            let mut flat_indices = Vec::with_capacity(shape_len(&out_shape));
            let mut idx = [0usize; AXES];
            enumerate_range(shape, lo, hi, stride, 0, &mut idx, &mut flat_indices);
            Ok(RoiSelection {
                flat_indices,
                out_shape: Some(out_shape),
            })
        }
        RoiSpec::Indices(indices) => {
            let flat_indices = indices
                .iter()
                .map(|idx| flat_index(shape, idx))
                .collect::<Result<Vec<_>>>()?;
            Ok(RoiSelection {
                flat_indices,
                out_shape: None,
            })
        }
        RoiSpec::Mask { shape: mshape, mask } => {
            if mshape != shape {
                return Err(InifError::ShapeMismatch(format!(
                    "mask shape {mshape:?} != volume shape {shape:?}"
                )));
            }
            if mask.len() != shape_len(shape) {
                return Err(InifError::ShapeMismatch(format!(
                    "mask has {} entries, shape wants {}",
                    mask.len(),
                    shape_len(shape)
                )));
            }
            let flat_indices = mask
                .iter()
                .enumerate()
                .filter_map(|(i, &m)| m.then_some(i))
                .collect();
            Ok(RoiSelection {
                flat_indices,
                out_shape: None,
            })
        }
    }
}

fn enumerate_range(
    shape: &[usize; AXES],
    lo: &[usize; AXES],
    hi: &[usize; AXES],
    stride: &[usize; AXES],
    axis: usize,
    idx: &mut [usize; AXES],
    out: &mut Vec<usize>,
) {
    if axis == AXES {
        out.push(flat_index(shape, idx).expect("range indices validated"));
        return;
    }
    let mut i = lo[axis];
    while i < hi[axis] {
        idx[axis] = i;
        enumerate_range(shape, lo, hi, stride, axis + 1, idx, out);
        i += stride[axis];
    }
}

/// Synthetic phantom families standing in for real microscopy volumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomKind {
    GaussianBlobs,
    Stripes,
    Shells,
}

impl std::str::FromStr for PhantomKind {
    type Err = InifError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blobs" | "blobs" => Ok(PhantomKind::GaussianBlobs),
            "stripes" => Ok(PhantomKind::Stripes),
            "shells" => Ok(PhantomKind::Shells),
            other => Err(InifError::InvalidArgument(format!(
                "unknown phantom kind {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomConfig {
    pub blob_count: usize,
    /// Full period of the stripe pattern, in voxels along X.
    pub stripe_period: usize,
    /// Radial period of the shell pattern, in voxels.
    pub shell_period: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            blob_count: 3,
            stripe_period: 8,
            shell_period: 12,
        }
    }
}

/// Generate a deterministic phantom volume. Values span [0, dtype max] and
/// at least 10% of voxels sit above half of the maximum.
pub fn generate_phantom(
    kind: PhantomKind,
    shape: [usize; AXES],
    dtype: Dtype,
    seed: u64,
    cfg: &PhantomConfig,
) -> Result<Volume> {
    validate_shape(&shape)?;
    let voxels = shape_len(&shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = vec![0.0f64; voxels];
    match kind {
        PhantomKind::GaussianBlobs => {
            let spatial = [shape[2], shape[3], shape[4]];
            // Widen blobs until enough of the volume is bright.
            let mut width = 0.18f64;
            let centers: Vec<[f64; 3]> = (0..cfg.blob_count.max(1))
                .map(|_| {
                    [
                        rng.random_range(0.2..0.8),
                        rng.random_range(0.2..0.8),
                        rng.random_range(0.2..0.8),
                    ]
                })
                .collect();
            loop {
                fill_blobs(&mut field, &shape, &spatial, &centers, width);
                let above = field.iter().filter(|&&v| v > 0.5).count();
                if above * 10 >= voxels || width > 2.0 {
                    break;
                }
                width *= 1.3;
            }
        }
        PhantomKind::Stripes => {
            let period = cfg.stripe_period.max(2) as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            for (i, v) in field.iter_mut().enumerate() {
                let idx = index_of_flat(&shape, i);
                let x = idx[4] as f64;
                *v = 0.5 * (1.0 + (std::f64::consts::TAU * x / period + phase).sin());
            }
        }
        PhantomKind::Shells => {
            let period = cfg.shell_period.max(2) as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            for (i, v) in field.iter_mut().enumerate() {
                let idx = index_of_flat(&shape, i);
                let mut r2 = 0.0;
                for (a, len) in [(2, shape[2]), (3, shape[3]), (4, shape[4])] {
                    if len > 1 {
                        let d = idx[a] as f64 - (len - 1) as f64 / 2.0;
                        r2 += d * d;
                    }
                }
                let r = r2.sqrt();
                let s = 0.5 * (1.0 + (std::f64::consts::TAU * r / period + phase).cos());
                *v = s * s;
            }
        }
    }
    // Stretch the field to exactly [0, 1], then scale to the dtype range.
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let peak = dtype.max_value();
    let data: Vec<f64> = field
        .iter()
        .map(|&v| dtype.clamp_round((v - lo) / span * peak))
        .collect();
    Volume::new(shape, dtype, data)
}

fn fill_blobs(
    field: &mut [f64],
    shape: &[usize; AXES],
    spatial: &[usize; 3],
    centers: &[[f64; 3]],
    width: f64,
) {
    for (i, v) in field.iter_mut().enumerate() {
        let idx = index_of_flat(shape, i);
        let pos = [
            frac_pos(idx[2], spatial[0]),
            frac_pos(idx[3], spatial[1]),
            frac_pos(idx[4], spatial[2]),
        ];
        let mut acc: f64 = 0.0;
        for c in centers {
            let mut d2 = 0.0;
            for a in 0..3 {
                if spatial[a] > 1 {
                    let d = pos[a] - c[a];
                    d2 += d * d;
                }
            }
            acc = acc.max((-d2 / (2.0 * width * width)).exp());
        }
        *v = acc;
    }
}

fn frac_pos(i: usize, len: usize) -> f64 {
    if len > 1 {
        i as f64 / (len - 1) as f64
    } else {
        0.5
    }
}

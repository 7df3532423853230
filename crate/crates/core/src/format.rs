//! The on-disk weight file: a fixed-layout binary header, an optional
//! embedded block-codec prior, and the single-precision network payload.
//! Decoding is a pure function of (weights, coordinate), so ROI, strided
//! and masked decodes are bit-identical restrictions of the full decode.

use std::collections::HashMap;
use std::path::Path;

use crate::codec::{decode_planes, Bitstream};
use crate::error::{InifError, Result};
use crate::siren::{forward_batch, Layer, SirenArchitecture, SirenParams};
use crate::volume::{
    coord_component, coords_of_roi, denormalize_value, index_of_flat, shape_len, Dtype, RoiSpec,
    Volume, AXES, NORM_MAX,
};

pub const INIF_MAGIC: &[u8; 4] = b"INIF";
pub const INIF_VERSION: u8 = 1;
const FLAG_PRIOR: u8 = 0b0000_0001;

/// Half-width of the residual training target range.
pub const RESIDUAL_HALF: f64 = 50.0;

/// Map a raw residual into the symmetric [-50, 50] training range.
pub fn residual_to_target(r: f64, (min, max): (f64, f64)) -> f64 {
    if max > min {
        -RESIDUAL_HALF + 2.0 * RESIDUAL_HALF * (r - min) / (max - min)
    } else {
        0.0
    }
}

/// Inverse of [`residual_to_target`]; out-of-range predictions clamp to
/// the recorded residual extremes.
pub fn target_to_residual(t: f64, (min, max): (f64, f64)) -> f64 {
    if max > min {
        min + (t.clamp(-RESIDUAL_HALF, RESIDUAL_HALF) + RESIDUAL_HALF) / (2.0 * RESIDUAL_HALF)
            * (max - min)
    } else {
        min
    }
}

/// Embedded fast-mode prior: the codec stream plus the residual range the
/// network was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBlock {
    pub bitstream: Vec<u8>,
    pub residual_range: (f32, f32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InifHeader {
    pub shape: [usize; AXES],
    pub dtype: Dtype,
    /// Per-channel normalization range, single precision as stored.
    pub channel_ranges: Vec<(f32, f32)>,
    pub arch: SirenArchitecture,
    /// Provenance only: which update engine produced the weights.
    pub optimizer_id: u32,
    pub total_steps: u32,
    pub seed: u64,
    pub prior: Option<PriorBlock>,
    pub comment: String,
}

/// Axes written to disk: trailing axes of (T,C,Z,Y,X) with leading
/// singletons dropped, at least the last two kept.
fn kept_axes(shape: &[usize; AXES]) -> usize {
    let leading = shape.iter().take(AXES - 2).take_while(|&&l| l == 1).count();
    AXES - leading
}

/// Exact byte count of a header with the given dimensions.
pub fn header_bytes(
    shape: &[usize; AXES],
    channels: usize,
    depth: usize,
    prior_len: usize,
    prior_present: bool,
    comment_len: usize,
) -> usize {
    4 + 1
        + 1
        + 1
        + 1
        + 4 * kept_axes(shape)
        + 8 * channels
        + 1
        + 4
        + 1
        + 1
        + 4 * depth
        + 4
        + 4
        + 8
        + 4
        + prior_len
        + if prior_present { 8 } else { 0 }
        + 4
        + comment_len
}

impl InifHeader {
    pub fn byte_len(&self) -> usize {
        let (prior_len, prior_present) = match &self.prior {
            Some(p) => (p.bitstream.len(), true),
            None => (0, false),
        };
        header_bytes(
            &self.shape,
            self.shape[1],
            self.arch.depth,
            prior_len,
            prior_present,
            self.comment.len(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InifFile {
    pub header: InifHeader,
    pub params: SirenParams,
}

impl InifFile {
    pub fn total_bytes(&self) -> usize {
        self.header.byte_len() + 4 * self.params.arch.param_count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serialize(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        deserialize(&std::fs::read(path)?)
    }
}

pub fn serialize(file: &InifFile) -> Result<Vec<u8>> {
    let header = &file.header;
    let arch = &file.params.arch;
    if *arch != header.arch {
        return Err(InifError::InvalidArgument(
            "header architecture does not match the weights".into(),
        ));
    }
    if header.channel_ranges.len() != header.shape[1] {
        return Err(InifError::InvalidArgument(format!(
            "{} channel ranges for {} channels",
            header.channel_ranges.len(),
            header.shape[1]
        )));
    }
    if arch.depth > u8::MAX as usize
        || arch.in_dim > u8::MAX as usize
        || arch.out_dim > u8::MAX as usize
    {
        return Err(InifError::InvalidArgument(
            "architecture fields exceed header width".into(),
        ));
    }
    let axes = kept_axes(&header.shape);
    let mut out = Vec::with_capacity(file.total_bytes());
    out.extend_from_slice(INIF_MAGIC);
    out.push(INIF_VERSION);
    out.push(if header.prior.is_some() { FLAG_PRIOR } else { 0 });
    out.push(header.dtype.code());
    out.push(axes as u8);
    for &len in &header.shape[AXES - axes..] {
        out.extend_from_slice(&(len as u32).to_le_bytes());
    }
    for &(lo, hi) in &header.channel_ranges {
        out.extend_from_slice(&lo.to_le_bytes());
        out.extend_from_slice(&hi.to_le_bytes());
    }
    out.push(arch.depth as u8);
    out.extend_from_slice(&(arch.hidden as u32).to_le_bytes());
    out.push(arch.in_dim as u8);
    out.push(arch.out_dim as u8);
    for &omega in &arch.omega0 {
        out.extend_from_slice(&(omega as f32).to_le_bytes());
    }
    out.extend_from_slice(&header.optimizer_id.to_le_bytes());
    out.extend_from_slice(&header.total_steps.to_le_bytes());
    out.extend_from_slice(&header.seed.to_le_bytes());
    match &header.prior {
        Some(prior) => {
            out.extend_from_slice(&(prior.bitstream.len() as u32).to_le_bytes());
            out.extend_from_slice(&prior.bitstream);
            out.extend_from_slice(&prior.residual_range.0.to_le_bytes());
            out.extend_from_slice(&prior.residual_range.1.to_le_bytes());
        }
        None => out.extend_from_slice(&0u32.to_le_bytes()),
    }
    out.extend_from_slice(&(header.comment.len() as u32).to_le_bytes());
    out.extend_from_slice(header.comment.as_bytes());
    debug_assert_eq!(out.len(), header.byte_len());
    for layer in &file.params.layers {
        for &v in layer.w.iter().chain(layer.b.iter()) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(layer.omega as f32).to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(InifError::Truncated {
                need: self.pos + n,
                have: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<InifFile> {
    if bytes.len() < 4 || &bytes[0..4] != INIF_MAGIC {
        return Err(InifError::BadMagic { expected: "INIF" });
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u8()?;
    if version != INIF_VERSION {
        return Err(InifError::BadVersion(version));
    }
    let flags = cur.u8()?;
    if flags & !FLAG_PRIOR != 0 {
        return Err(InifError::CorruptStream(format!(
            "unknown flag bits {flags:#04x}"
        )));
    }
    let dtype = Dtype::from_code(cur.u8()?)?;
    let axes = cur.u8()? as usize;
    if axes < 2 || axes > AXES {
        return Err(InifError::InvalidShape(format!(
            "axis count {axes} outside 2..=5"
        )));
    }
    let mut shape = [1usize; AXES];
    for a in 0..axes {
        shape[AXES - axes + a] = cur.u32()? as usize;
    }
    crate::volume::validate_shape(&shape)?;
    let mut channel_ranges = Vec::with_capacity(shape[1]);
    for _ in 0..shape[1] {
        channel_ranges.push((cur.f32()?, cur.f32()?));
    }
    let depth = cur.u8()? as usize;
    let hidden = cur.u32()? as usize;
    let in_dim = cur.u8()? as usize;
    let out_dim = cur.u8()? as usize;
    // A width-h network stores at least 4h payload bytes; bound h by the
    // file size before any sized allocation.
    if hidden > bytes.len() / 4 {
        return Err(InifError::Truncated {
            need: 4 * hidden,
            have: bytes.len(),
        });
    }
    let mut arch = SirenArchitecture::new(in_dim, out_dim, depth, hidden)?;
    for l in 0..depth {
        arch.omega0[l] = cur.f32()? as f64;
    }
    let optimizer_id = cur.u32()?;
    let total_steps = cur.u32()?;
    let seed = cur.u64()?;
    let prior_len = cur.u32()? as usize;
    let prior_present = flags & FLAG_PRIOR != 0;
    if prior_len > 0 && !prior_present {
        return Err(InifError::CorruptStream(
            "prior bytes present but prior flag unset".into(),
        ));
    }
    let prior = if prior_present {
        let bitstream = cur.take(prior_len)?.to_vec();
        let residual_range = (cur.f32()?, cur.f32()?);
        Some(PriorBlock {
            bitstream,
            residual_range,
        })
    } else {
        None
    };
    let comment_len = cur.u32()? as usize;
    let comment = std::str::from_utf8(cur.take(comment_len)?)
        .map_err(|_| InifError::CorruptStream("non-UTF8 comment".into()))?
        .to_string();
    let needed: u128 = 4 * arch.param_count() as u128;
    if (cur.pos as u128) + needed > bytes.len() as u128 {
        return Err(InifError::Truncated {
            need: cur.pos + needed.min(usize::MAX as u128) as usize,
            have: bytes.len(),
        });
    }
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let fan_in = arch.fan_in(l);
        let fan_out = arch.fan_out(l);
        let mut w = Vec::with_capacity(fan_out * fan_in);
        for _ in 0..fan_out * fan_in {
            w.push(cur.f32()? as f64);
        }
        let mut b = Vec::with_capacity(fan_out);
        for _ in 0..fan_out {
            b.push(cur.f32()? as f64);
        }
        let omega = cur.f32()? as f64;
        layers.push(Layer {
            w,
            b,
            omega,
            fan_in,
            fan_out,
        });
    }
    if cur.pos != bytes.len() {
        return Err(InifError::CorruptStream(format!(
            "{} trailing bytes after the weight payload",
            bytes.len() - cur.pos
        )));
    }
    Ok(InifFile {
        header: InifHeader {
            shape,
            dtype,
            channel_ranges,
            arch: arch.clone(),
            optimizer_id,
            total_steps,
            seed,
            prior,
            comment,
        },
        params: SirenParams { arch, layers },
    })
}

/// Coordinate components of one voxel: every non-singleton axis except
/// the channel axis, in (t, z, y, x) order.
pub fn decode_coords(idx: &[usize; AXES], shape: &[usize; AXES]) -> Vec<f64> {
    [0usize, 2, 3, 4]
        .iter()
        .filter(|&&a| shape[a] > 1)
        .map(|&a| coord_component(idx[a], shape[a]))
        .collect()
}

fn coord_axis_count(shape: &[usize; AXES]) -> usize {
    [0usize, 2, 3, 4].iter().filter(|&&a| shape[a] > 1).count()
}

const DECODE_BATCH: usize = 8192;

/// Evaluate the file at the given flat voxel indices, returning values in
/// the native dtype range, row-major in the order given.
fn decode_flat(file: &InifFile, flat_indices: &[usize]) -> Result<Vec<f64>> {
    let header = &file.header;
    let shape = &header.shape;
    let arch = &file.params.arch;
    if arch.out_dim != shape[1] {
        return Err(InifError::InvalidArgument(format!(
            "network emits {} components for {} channels",
            arch.out_dim, shape[1]
        )));
    }
    if arch.in_dim != coord_axis_count(shape) {
        return Err(InifError::InvalidArgument(format!(
            "network takes {} coordinates, grid has {}",
            arch.in_dim,
            coord_axis_count(shape)
        )));
    }
    // Prior planes touched by the request, decoded once.
    let plane_len = shape[3] * shape[4];
    let prior_planes: Option<(HashMap<usize, Vec<f64>>, (f64, f64), Vec<(f64, f64)>)> =
        match &header.prior {
            Some(prior) => {
                let bs = Bitstream::from_bytes(&prior.bitstream)?;
                if bs.shape != *shape {
                    return Err(InifError::CorruptStream(
                        "embedded prior shape differs from the file shape".into(),
                    ));
                }
                let n_planes = shape[0] * shape[1] * shape[2];
                let mut wanted = vec![false; n_planes];
                for &flat in flat_indices {
                    wanted[flat / plane_len] = true;
                }
                let planes: HashMap<usize, Vec<f64>> =
                    decode_planes(&bs, &wanted)?.into_iter().collect();
                let ranges: Vec<(f64, f64)> = header
                    .channel_ranges
                    .iter()
                    .map(|&(lo, hi)| (lo as f64, hi as f64))
                    .collect();
                Some((
                    planes,
                    (
                        prior.residual_range.0 as f64,
                        prior.residual_range.1 as f64,
                    ),
                    ranges,
                ))
            }
            None => None,
        };
    let mut out = Vec::with_capacity(flat_indices.len());
    for chunk in flat_indices.chunks(DECODE_BATCH.max(1)) {
        let mut coords = Vec::with_capacity(chunk.len() * arch.in_dim);
        for &flat in chunk {
            if flat >= shape_len(shape) {
                return Err(InifError::IndexOutOfRange(format!(
                    "flat index {flat} outside {} voxels",
                    shape_len(shape)
                )));
            }
            let idx = index_of_flat(shape, flat);
            coords.extend(decode_coords(&idx, shape));
        }
        let (pred, _) = forward_batch(&file.params, &coords, chunk.len())?;
        for (j, &flat) in chunk.iter().enumerate() {
            let idx = index_of_flat(shape, flat);
            let c = idx[1];
            let raw_out = pred[j * arch.out_dim + c];
            let range = (
                header.channel_ranges[c].0 as f64,
                header.channel_ranges[c].1 as f64,
            );
            let normalized = match &prior_planes {
                Some((planes, res_range, ranges)) => {
                    let plane = &planes[&(flat / plane_len)];
                    let prior_norm =
                        crate::volume::normalize_value(plane[flat % plane_len], ranges[c]);
                    prior_norm + target_to_residual(raw_out, *res_range)
                }
                None => raw_out,
            };
            let value = denormalize_value(normalized.clamp(0.0, NORM_MAX), range);
            out.push(header.dtype.clamp_round(value));
        }
    }
    Ok(out)
}

/// Decode a rectangular (possibly strided) region into a volume fragment.
pub fn decode(file: &InifFile, roi: &RoiSpec) -> Result<Volume> {
    let selection = coords_of_roi(roi, &file.header.shape)?;
    let out_shape = selection.out_shape.ok_or_else(|| {
        InifError::InvalidRoi("rectangular decode needs a range selector".into())
    })?;
    let values = decode_flat(file, &selection.flat_indices)?;
    Volume::new(out_shape, file.header.dtype, values)
}

/// Decode the voxels under a binary mask, row-major over true positions.
/// Returns the values and their flat indices.
pub fn decode_mask(file: &InifFile, mask: &[bool]) -> Result<(Vec<f64>, Vec<usize>)> {
    let selection = coords_of_roi(
        &RoiSpec::Mask {
            shape: file.header.shape,
            mask: mask.to_vec(),
        },
        &file.header.shape,
    )?;
    let values = decode_flat(file, &selection.flat_indices)?;
    Ok((values, selection.flat_indices))
}

/// raw bytes over stored bytes.
pub fn compression_ratio(raw_bytes: usize, file_bytes: usize) -> Result<f64> {
    if file_bytes == 0 || raw_bytes < file_bytes {
        return Err(InifError::InvalidArgument(format!(
            "raw {raw_bytes} bytes vs file {file_bytes} bytes"
        )));
    }
    Ok(raw_bytes as f64 / file_bytes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_volume, BlockCodecConfig};
    use crate::siren::init_siren;
    use crate::volume::{generate_phantom, PhantomConfig, PhantomKind};

    fn test_file(prior: bool) -> InifFile {
        let shape = [1, 1, 4, 12, 12];
        let arch = SirenArchitecture::new(3, 1, 7, 6).unwrap();
        let mut params = init_siren(&arch, 5);
        params.quantize_f32();
        let prior_block = prior.then(|| {
            let vol = generate_phantom(
                PhantomKind::GaussianBlobs,
                shape,
                Dtype::U8,
                2,
                &PhantomConfig::default(),
            )
            .unwrap();
            let bs = encode_volume(&vol, &BlockCodecConfig::default()).unwrap();
            PriorBlock {
                bitstream: bs.to_bytes(),
                residual_range: (-4.5, 3.25),
            }
        });
        InifFile {
            header: InifHeader {
                shape,
                dtype: Dtype::U8,
                channel_ranges: vec![(0.0, 255.0)],
                arch: params.arch.clone(),
                optimizer_id: 0,
                total_steps: 100,
                seed: 5,
                prior: prior_block,
                comment: String::new(),
            },
            params,
        }
    }

    #[test]
    fn header_size_arithmetic() {
        // 3 kept axes, 1 channel, depth 7, no prior, no comment.
        assert_eq!(header_bytes(&[1, 1, 4, 12, 12], 1, 7, 0, false, 0), 87);
        let f = test_file(false);
        assert_eq!(f.header.byte_len(), 87);
        assert_eq!(serialize(&f).unwrap().len(), f.total_bytes());
        // Prior and comment extend the header by their exact byte count.
        assert_eq!(
            header_bytes(&[1, 1, 4, 12, 12], 1, 7, 100, true, 7),
            87 + 100 + 8 + 7
        );
        // A fully singleton-leading shape keeps at least two axes.
        assert_eq!(kept_axes(&[1, 1, 1, 1, 9]), 2);
        assert_eq!(kept_axes(&[2, 1, 1, 1, 9]), 5);
    }

    #[test]
    fn round_trip_bit_identity() {
        for prior in [false, true] {
            let mut f = test_file(prior);
            f.header.comment = "hello".into();
            let bytes = serialize(&f).unwrap();
            let parsed = deserialize(&bytes).unwrap();
            assert_eq!(parsed, f);
            assert_eq!(serialize(&parsed).unwrap(), bytes);
        }
    }

    #[test]
    fn distinct_header_errors() {
        let f = test_file(false);
        let bytes = serialize(&f).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            deserialize(&bad),
            Err(InifError::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(deserialize(&bad), Err(InifError::BadVersion(9))));
        assert!(matches!(
            deserialize(&bytes[..bytes.len() - 3]),
            Err(InifError::Truncated { .. })
        ));
    }

    #[test]
    fn serialize_rejects_inconsistency() {
        let mut f = test_file(false);
        f.header.arch.hidden = 9;
        assert!(serialize(&f).is_err());
        let mut f = test_file(false);
        f.header.channel_ranges.push((0.0, 1.0));
        assert!(serialize(&f).is_err());
    }

    #[test]
    fn header_byte_flips_never_pass_silently() {
        let f = test_file(false);
        let bytes = serialize(&f).unwrap();
        let header_len = f.header.byte_len();
        for at in 0..header_len {
            for flip in [0x01u8, 0x80] {
                let mut mutated = bytes.clone();
                mutated[at] ^= flip;
                match deserialize(&mutated) {
                    Err(_) => {}
                    Ok(parsed) => {
                        // Accepted parses must reflect the changed byte:
                        // writing them back never recreates the original.
                        assert_ne!(
                            serialize(&parsed).unwrap(),
                            bytes,
                            "flip of header byte {at} passed silently"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn full_decode_equals_slice_concatenation() {
        let f = test_file(false);
        let full = decode(&f, &RoiSpec::full(&f.header.shape)).unwrap();
        assert_eq!(full.shape, f.header.shape);
        let mut stitched = Vec::new();
        for z in 0..4 {
            let slice = decode(
                &f,
                &RoiSpec::Range {
                    lo: [0, 0, z, 0, 0],
                    hi: [1, 1, z + 1, 12, 12],
                    stride: [1; AXES],
                },
            )
            .unwrap();
            stitched.extend(slice.data);
        }
        assert_eq!(full.data, stitched);
    }

    #[test]
    fn strided_decode_matches_strided_full() {
        for prior in [false, true] {
            let f = test_file(prior);
            let full = decode(&f, &RoiSpec::full(&f.header.shape)).unwrap();
            let strided = decode(
                &f,
                &RoiSpec::Range {
                    lo: [0; AXES],
                    hi: f.header.shape,
                    stride: [1, 1, 1, 1, 4],
                },
            )
            .unwrap();
            assert_eq!(strided.shape, [1, 1, 4, 12, 3]);
            let mut expected = Vec::new();
            for z in 0..4 {
                for y in 0..12 {
                    for x in (0..12).step_by(4) {
                        expected.push(full.data[(z * 12 + y) * 12 + x]);
                    }
                }
            }
            assert_eq!(strided.data, expected);
        }
    }

    #[test]
    fn single_voxel_decode_is_pointwise() {
        let f = test_file(true);
        let full = decode(&f, &RoiSpec::full(&f.header.shape)).unwrap();
        let idx = [0, 0, 2, 7, 5];
        let one = decode(
            &f,
            &RoiSpec::Range {
                lo: idx,
                hi: [1, 1, 3, 8, 6],
                stride: [1; AXES],
            },
        )
        .unwrap();
        assert_eq!(one.data.len(), 1);
        assert_eq!(one.data[0], full.data[full.flat_index(&idx).unwrap()]);
    }

    #[test]
    fn mask_decode_gathers_full_decode() {
        for prior in [false, true] {
            let f = test_file(prior);
            let full = decode(&f, &RoiSpec::full(&f.header.shape)).unwrap();
            let voxels = shape_len(&f.header.shape);
            // Sparse deterministic mask.
            let mask: Vec<bool> = (0..voxels).map(|i| i % 97 == 0).collect();
            let (values, indices) = decode_mask(&f, &mask).unwrap();
            assert_eq!(values.len(), indices.len());
            assert!(!values.is_empty());
            for (v, &i) in values.iter().zip(&indices) {
                assert_eq!(*v, full.data[i]);
            }
            let (empty, idx) = decode_mask(&f, &vec![false; voxels]).unwrap();
            assert!(empty.is_empty() && idx.is_empty());
            let (all, _) = decode_mask(&f, &vec![true; voxels]).unwrap();
            assert_eq!(all, full.data);
            assert!(decode_mask(&f, &vec![true; 3]).is_err());
        }
    }

    #[test]
    fn roi_out_of_bounds_rejected() {
        let f = test_file(false);
        assert!(decode(
            &f,
            &RoiSpec::Range {
                lo: [0; AXES],
                hi: [1, 1, 4, 12, 13],
                stride: [1; AXES],
            },
        )
        .is_err());
    }

    #[test]
    fn decoded_values_lie_in_dtype_range() {
        let f = test_file(false);
        let full = decode(&f, &RoiSpec::full(&f.header.shape)).unwrap();
        assert!(full
            .data
            .iter()
            .all(|&v| (0.0..=255.0).contains(&v) && v.fract() == 0.0));
    }

    #[test]
    fn residual_mapping_round_trips() {
        let range = (-3.75, 9.5);
        for r in [-3.75, -1.0, 0.0, 4.2, 9.5] {
            let t = residual_to_target(r, range);
            assert!((-RESIDUAL_HALF..=RESIDUAL_HALF).contains(&t));
            assert!((target_to_residual(t, range) - r).abs() < 1e-12);
        }
        // Degenerate range collapses to its single value.
        assert_eq!(residual_to_target(2.0, (2.0, 2.0)), 0.0);
        assert_eq!(target_to_residual(17.0, (2.0, 2.0)), 2.0);
        // Out-of-range predictions clamp.
        assert_eq!(target_to_residual(-99.0, range), -3.75);
        assert_eq!(target_to_residual(99.0, range), 9.5);
    }

    #[test]
    fn compression_ratio_accounting() {
        assert_eq!(compression_ratio(1000, 1000).unwrap(), 1.0);
        assert_eq!(compression_ratio(2048, 16).unwrap(), 128.0);
        assert!(compression_ratio(10, 20).is_err());
        assert!(compression_ratio(10, 0).is_err());
    }

    #[test]
    fn file_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.inif");
        let f = test_file(true);
        f.save(&path).unwrap();
        let loaded = InifFile::load(&path).unwrap();
        assert_eq!(loaded, f);
    }
}

//! Python bindings: volumes, compression jobs, and .inif files.

use std::collections::HashMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use inif_core::format::{self, InifFile};
use inif_core::metrics::quality_report;
use inif_core::pipeline::{self, CompressionJob};
use inif_core::volume::{
    generate_phantom, normalize_value, Dtype, PhantomConfig, PhantomKind, RoiSpec, Volume, AXES,
};
use inif_core::InifError;

fn err(e: InifError) -> PyErr {
    match e {
        InifError::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_dtype(s: &str) -> PyResult<Dtype> {
    match s {
        "u8" => Ok(Dtype::U8),
        "u16" => Ok(Dtype::U16),
        "f32" => Ok(Dtype::F32),
        _ => Err(PyValueError::new_err(format!("unknown dtype {s:?}"))),
    }
}

fn dtype_name(d: Dtype) -> &'static str {
    match d {
        Dtype::U8 => "u8",
        Dtype::U16 => "u16",
        Dtype::F32 => "f32",
    }
}

fn parse_shape(dims: Vec<usize>) -> PyResult<[usize; AXES]> {
    dims.try_into().map_err(|v: Vec<usize>| {
        PyValueError::new_err(format!("shape needs {AXES} extents, got {}", v.len()))
    })
}

/// A (t, c, z, y, x) volume held as f64 values in native units.
#[pyclass(name = "Volume", from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    fn new(shape: Vec<usize>, dtype: &str, data: Vec<f64>) -> PyResult<Self> {
        let inner =
            Volume::new(parse_shape(shape)?, parse_dtype(dtype)?, data).map_err(err)?;
        Ok(PyVolume { inner })
    }

    /// Synthetic test volume; kind is "blobs", "stripes" or "shells".
    #[staticmethod]
    #[pyo3(signature = (kind, shape, dtype = "u16", seed = 0))]
    fn phantom(kind: &str, shape: Vec<usize>, dtype: &str, seed: u64) -> PyResult<Self> {
        let kind = match kind {
            "blobs" => PhantomKind::GaussianBlobs,
            "stripes" => PhantomKind::Stripes,
            "shells" => PhantomKind::Shells,
            _ => return Err(PyValueError::new_err(format!("unknown phantom kind {kind:?}"))),
        };
        let inner = generate_phantom(
            kind,
            parse_shape(shape)?,
            parse_dtype(dtype)?,
            seed,
            &PhantomConfig::default(),
        )
        .map_err(err)?;
        Ok(PyVolume { inner })
    }

    #[staticmethod]
    fn load_ndv(path: &str) -> PyResult<Self> {
        Ok(PyVolume {
            inner: Volume::load_ndv(path.as_ref()).map_err(err)?,
        })
    }

    fn save_ndv(&self, path: &str) -> PyResult<()> {
        self.inner.save_ndv(path.as_ref()).map_err(err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape.to_vec()
    }

    #[getter]
    fn dtype(&self) -> &'static str {
        dtype_name(self.inner.dtype)
    }

    /// Flat row-major voxel values in native units.
    fn values(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    fn raw_bytes(&self) -> usize {
        self.inner.raw_bytes()
    }

    fn __repr__(&self) -> String {
        format!(
            "Volume(shape={:?}, dtype={})",
            self.inner.shape,
            dtype_name(self.inner.dtype)
        )
    }
}

/// A compressed volume: header plus network weights.
#[pyclass(name = "InifFile")]
struct PyInifFile {
    inner: InifFile,
}

#[pymethods]
impl PyInifFile {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyInifFile {
            inner: InifFile::load(path.as_ref()).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(bytes: Vec<u8>) -> PyResult<Self> {
        Ok(PyInifFile {
            inner: format::deserialize(&bytes).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(err)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        format::serialize(&self.inner).map_err(err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.header.shape.to_vec()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.header.arch.param_count()
    }

    #[getter]
    fn total_bytes(&self) -> usize {
        self.inner.total_bytes()
    }

    #[getter]
    fn has_prior(&self) -> bool {
        self.inner.header.prior.is_some()
    }

    fn decode(&self) -> PyResult<PyVolume> {
        let v = format::decode(&self.inner, &RoiSpec::full(&self.inner.header.shape))
            .map_err(err)?;
        Ok(PyVolume { inner: v })
    }

    /// Decode a half-open per-axis range with optional strides.
    #[pyo3(signature = (lo, hi, stride = None))]
    fn decode_roi(
        &self,
        lo: Vec<usize>,
        hi: Vec<usize>,
        stride: Option<Vec<usize>>,
    ) -> PyResult<PyVolume> {
        let roi = RoiSpec::Range {
            lo: parse_shape(lo)?,
            hi: parse_shape(hi)?,
            stride: parse_shape(stride.unwrap_or_else(|| vec![1; AXES]))?,
        };
        Ok(PyVolume {
            inner: format::decode(&self.inner, &roi).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "InifFile(shape={:?}, params={}, bytes={})",
            self.inner.header.shape,
            self.inner.header.arch.param_count(),
            self.inner.total_bytes()
        )
    }
}

fn report_dict(report: &inif_core::metrics::QualityReport) -> HashMap<String, f64> {
    let mut d = HashMap::from([
        ("mse".to_string(), report.mse),
        ("psnr_db".to_string(), report.psnr_db),
        ("ssim".to_string(), report.ssim),
        ("voxels".to_string(), report.voxels as f64),
    ]);
    if let Some(iou) = report.iou {
        d.insert("iou".to_string(), iou);
    }
    d
}

/// Fit a network to `volume` at `ratio` and return the file plus the
/// final quality report.
#[pyfunction]
#[pyo3(signature = (volume, ratio, steps = 2000, seed = 0, prior_split = None, batch = 0))]
fn compress(
    volume: &PyVolume,
    ratio: f64,
    steps: usize,
    seed: u64,
    prior_split: Option<f64>,
    batch: usize,
) -> PyResult<(PyInifFile, HashMap<String, f64>)> {
    let mut job = CompressionJob::new(volume.inner.clone(), ratio).map_err(err)?;
    job.steps = steps;
    job.seed = seed;
    job.prior_split = prior_split;
    job.batch = batch;
    let (file, log) = pipeline::compress(&job).map_err(err)?;
    Ok((PyInifFile { inner: file }, report_dict(&log.report)))
}

/// Quality of `pred` against `truth`, both normalized per channel of
/// `truth`.
#[pyfunction]
fn quality(pred: &PyVolume, truth: &PyVolume) -> PyResult<HashMap<String, f64>> {
    let t = &truth.inner;
    if pred.inner.shape != t.shape {
        return Err(PyValueError::new_err("volume shapes differ"));
    }
    let norm = |v: &Volume| -> Vec<f64> {
        (0..v.voxel_count())
            .map(|flat| normalize_value(v.data[flat], t.channel_range[t.channel_of_flat(flat)]))
            .collect()
    };
    let report =
        quality_report(&norm(&pred.inner), &norm(t), &t.shape, None).map_err(err)?;
    Ok(report_dict(&report))
}

#[pymodule]
fn inif_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyInifFile>()?;
    m.add_function(wrap_pyfunction!(compress, m)?)?;
    m.add_function(wrap_pyfunction!(quality, m)?)?;
    Ok(())
}

//! Command-line surface over the compression library. Every subcommand
//! is a thin wrapper: outputs are byte-identical to the equivalent
//! library calls.

mod bench;
mod roi;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use inif_core::format::{self, InifFile};
use inif_core::guidance::SoftSegConfig;
use inif_core::optim::{load_learned_weights, LearnedOptWeights, FALLBACK_SEED};
use inif_core::pipeline::{
    self, CompressionJob, GuidanceSpec, OptimizerChoice, DEFAULT_PRIOR_SPLIT, DEFAULT_STEPS_PLAIN,
    DEFAULT_STEPS_PRIOR,
};
use inif_core::volume::{
    generate_phantom, Dtype, PhantomConfig, PhantomKind, RoiSpec, Volume, AXES,
};
use inif_core::InifError;

#[derive(Parser)]
#[command(name = "inif", about = "Implicit-network compression of multi-dimensional volumes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit a network to an NDV volume and write a .inif file.
    Compress(CompressArgs),
    /// Decode all or part of a .inif file back into an NDV volume.
    Decompress(DecompressArgs),
    /// Print the header and size accounting of a .inif file or manifest.
    Inspect(InspectArgs),
    /// Compare methods across compression ratios and emit a CSV.
    Bench(bench::BenchArgs),
    /// Generate a synthetic NDV test volume.
    Phantom(PhantomArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Learned,
}

#[derive(Clone, Copy, ValueEnum)]
enum GuidanceArg {
    None,
    Seg,
    Perceptual,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    None,
    Codec,
}

#[derive(Parser)]
struct CompressArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output file, or output directory when --chunk-mem-bytes is set.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    ratio: f64,
    /// Training steps; defaults to 2000, or 500 with a codec prior.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: OptimizerArg,
    /// Controller weight bundle for the learned optimizer; without it a
    /// seeded fallback controller is used.
    #[arg(long)]
    opt_weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "none")]
    guidance: GuidanceArg,
    #[arg(long, default_value_t = 0.1)]
    seg_weight: f64,
    #[arg(long, default_value_t = 0.01)]
    perc_weight: f64,
    /// Guidance patch edge in pixels.
    #[arg(long, default_value_t = 16)]
    patch: usize,
    /// Clean reference NDV for perceptual guidance.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "none")]
    prior: PriorArg,
    #[arg(long, default_value_t = DEFAULT_PRIOR_SPLIT)]
    prior_split: f64,
    /// Enable chunked mode with this per-chunk working-memory budget.
    #[arg(long)]
    chunk_mem_bytes: Option<usize>,
    /// Coordinates per training step; 0 picks the default.
    #[arg(long, default_value_t = 0)]
    batch: usize,
    #[arg(long, default_value = "")]
    comment: String,
}

#[derive(Parser)]
struct DecompressArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Per-axis half-open ranges "t0:t1,c0:c1,z0:z1,y0:y1,x0:x1";
    /// "-" keeps a full axis.
    #[arg(long, allow_hyphen_values = true)]
    roi: Option<String>,
    /// Per-axis strides "1,1,1,4,4".
    #[arg(long)]
    stride: Option<String>,
    /// NDV mask (nonzero = keep); decoded voxels land in an otherwise
    /// zero volume of the full shape.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Parser)]
struct InspectArgs {
    #[arg(long)]
    input: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Blobs,
    Stripes,
    Shells,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    U8,
    U16,
    F32,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Dtype {
        match d {
            DtypeArg::U8 => Dtype::U8,
            DtypeArg::U16 => Dtype::U16,
            DtypeArg::F32 => Dtype::F32,
        }
    }
}

#[derive(Parser)]
struct PhantomArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Comma-separated (t,c,z,y,x) extents, e.g. "1,1,16,64,64".
    #[arg(long)]
    shape: String,
    #[arg(long, value_enum, default_value = "u16")]
    dtype: DtypeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 3)]
    blob_count: usize,
    #[arg(long, default_value_t = 8)]
    stripe_period: usize,
    #[arg(long, default_value_t = 12)]
    shell_period: usize,
}

/// CLI-level failure, split by exit code: usage errors exit 1, library
/// errors exit 2, divergence exits 3.
pub enum CliError {
    Usage(String),
    Lib(InifError),
}

impl From<InifError> for CliError {
    fn from(e: InifError) -> Self {
        CliError::Lib(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

fn is_divergence(e: &InifError) -> bool {
    match e {
        InifError::Diverged { .. } => true,
        InifError::ChunkFailed { source, .. } => is_divergence(source),
        _ => false,
    }
}

fn exit_code(e: &CliError) -> i32 {
    match e {
        CliError::Usage(_) => 1,
        CliError::Lib(e) if is_divergence(e) => 3,
        CliError::Lib(_) => 2,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            if e.use_stderr() {
                eprint!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            return;
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Compress(args) => cmd_compress(args),
        Cmd::Decompress(args) => cmd_decompress(args),
        Cmd::Inspect(args) => cmd_inspect(args),
        Cmd::Bench(args) => bench::cmd_bench(args),
        Cmd::Phantom(args) => cmd_phantom(args),
    }
}

fn build_job(args: &CompressArgs) -> Result<CompressionJob, CliError> {
    let volume = Volume::load_ndv(&args.input)?;
    let mut job = CompressionJob::new(volume, args.ratio)?;
    job.seed = args.seed;
    job.batch = args.batch;
    job.comment = args.comment.clone();
    if matches!(args.prior, PriorArg::Codec) {
        job.prior_split = Some(args.prior_split);
    }
    job.steps = args.steps.unwrap_or(if job.prior_split.is_some() {
        DEFAULT_STEPS_PRIOR
    } else {
        DEFAULT_STEPS_PLAIN
    });
    job.optimizer = match args.optimizer {
        OptimizerArg::Adam => OptimizerChoice::Adam,
        OptimizerArg::Learned => {
            let weights = match &args.opt_weights {
                Some(path) => load_learned_weights(path)?,
                None => {
                    println!("learned optimizer: no weight bundle given, using the seeded fallback controller");
                    LearnedOptWeights::fallback(FALLBACK_SEED)
                }
            };
            OptimizerChoice::Learned(weights)
        }
    };
    job.guidance = match args.guidance {
        GuidanceArg::None => GuidanceSpec::None,
        GuidanceArg::Seg => GuidanceSpec::Segmentation {
            cfg: SoftSegConfig::default(),
            weight: args.seg_weight,
            patch: args.patch,
        },
        GuidanceArg::Perceptual => {
            let path = args.reference.as_ref().ok_or_else(|| {
                CliError::Usage("perceptual guidance needs --reference".into())
            })?;
            GuidanceSpec::Perceptual {
                reference: Volume::load_ndv(path)?,
                extractor_seed: args.seed,
                weight: args.perc_weight,
                patch: args.patch,
            }
        }
    };
    job.validate()?;
    Ok(job)
}

fn cmd_compress(args: CompressArgs) -> Result<(), CliError> {
    let job = build_job(&args)?;
    let raw = job.volume.raw_bytes();
    match args.chunk_mem_bytes {
        None => {
            let (file, log) = pipeline::compress(&job)?;
            file.save(&args.output)?;
            let bytes = file.total_bytes();
            println!("output={}", args.output.display());
            println!("bytes={bytes}");
            println!(
                "ratio_achieved={:.3}",
                format::compression_ratio(raw, bytes)?
            );
            println!("{}", log.report.to_key_value());
        }
        Some(mem) => {
            let plan = pipeline::plan_chunks(&job.volume.shape, mem)?;
            let out = pipeline::compress_chunked(&job, &plan)?;
            out.write_to_dir(&args.output)?;
            println!("output={}", args.output.join("manifest.txt").display());
            println!("bytes={}", out.total_bytes());
            println!(
                "ratio_achieved={:.3}",
                format::compression_ratio(raw, out.total_bytes())?
            );
            for part in &out.parts {
                println!(
                    "part={} z0={} z1={} bytes={} psnr_db={:.4}",
                    part.name,
                    part.z0,
                    part.z1,
                    part.file.total_bytes(),
                    part.log.report.psnr_db
                );
            }
        }
    }
    Ok(())
}

fn cmd_decompress(args: DecompressArgs) -> Result<(), CliError> {
    let file = InifFile::load(&args.input)?;
    let shape = file.header.shape;
    if args.mask.is_some() && (args.roi.is_some() || args.stride.is_some()) {
        return Err(CliError::Usage("--mask excludes --roi/--stride".into()));
    }
    let out = match &args.mask {
        Some(path) => {
            let mask_vol = Volume::load_ndv(path)?;
            if mask_vol.shape != shape {
                return Err(InifError::ShapeMismatch(format!(
                    "mask {:?} vs volume {:?}",
                    mask_vol.shape, shape
                ))
                .into());
            }
            let mask: Vec<bool> = mask_vol.data.iter().map(|&v| v != 0.0).collect();
            let (values, flats) = format::decode_mask(&file, &mask)?;
            let mut data = vec![0.0; mask.len()];
            for (&flat, &v) in flats.iter().zip(&values) {
                data[flat] = v;
            }
            Volume::new(shape, file.header.dtype, data)?
        }
        None => {
            let (lo, hi) = match &args.roi {
                Some(s) => roi::parse_roi(s, &shape).map_err(CliError::Usage)?,
                None => ([0; AXES], shape),
            };
            let stride = match &args.stride {
                Some(s) => roi::parse_stride(s).map_err(CliError::Usage)?,
                None => [1; AXES],
            };
            format::decode(&file, &RoiSpec::Range { lo, hi, stride })?
        }
    };
    out.save_ndv(&args.output)?;
    println!("output={}", args.output.display());
    println!("shape={:?}", out.shape);
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), CliError> {
    let path = if args.input.is_dir() {
        args.input.join("manifest.txt")
    } else {
        args.input.clone()
    };
    let bytes = std::fs::read(&path).map_err(InifError::Io)?;
    if bytes.starts_with(b"raw_bytes=") {
        return inspect_manifest(&path, &bytes);
    }
    let file = format::deserialize(&bytes)?;
    let h = &file.header;
    println!("shape={:?}", h.shape);
    println!("dtype={:?}", h.dtype);
    for (c, (lo, hi)) in h.channel_ranges.iter().enumerate() {
        println!("channel_range[{c}]=({lo}, {hi})");
    }
    println!("depth={}", h.arch.depth);
    println!("hidden={}", h.arch.hidden);
    println!("in_dim={}", h.arch.in_dim);
    println!("out_dim={}", h.arch.out_dim);
    println!("param_count={}", h.arch.param_count());
    println!("optimizer_id={}", h.optimizer_id);
    println!("total_steps={}", h.total_steps);
    println!("seed={}", h.seed);
    match &h.prior {
        Some(p) => {
            println!("prior=codec bytes={}", p.bitstream.len());
            println!(
                "residual_range=({}, {})",
                p.residual_range.0, p.residual_range.1
            );
        }
        None => println!("prior=none"),
    }
    println!("comment={:?}", h.comment);
    let raw: usize = h.shape.iter().product::<usize>() * h.dtype.bytes_per_voxel();
    println!("file_bytes={}", bytes.len());
    println!(
        "ratio_achieved={:.3}",
        format::compression_ratio(raw, bytes.len())?
    );
    Ok(())
}

fn inspect_manifest(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| InifError::CorruptStream("manifest is not UTF-8".into()))?;
    let (raw, ratio, parts) = pipeline::parse_manifest(text)?;
    println!("manifest={}", path.display());
    println!("raw_bytes={raw}");
    println!("ratio={ratio}");
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut total = bytes.len();
    for (name, z0, z1) in &parts {
        let size = std::fs::metadata(dir.join(name)).map(|m| m.len()).unwrap_or(0);
        total += size as usize;
        println!("part={name} z0={z0} z1={z1} bytes={size}");
    }
    println!("total_bytes={total}");
    Ok(())
}

fn cmd_phantom(args: PhantomArgs) -> Result<(), CliError> {
    let dims: Vec<usize> = args
        .shape
        .split(',')
        .map(|f| f.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad shape {:?}", args.shape)))?;
    if dims.len() != AXES {
        return Err(CliError::Usage(format!(
            "shape needs {AXES} comma-separated extents, got {}",
            dims.len()
        )));
    }
    let shape = [dims[0], dims[1], dims[2], dims[3], dims[4]];
    let kind = match args.kind {
        KindArg::Blobs => PhantomKind::GaussianBlobs,
        KindArg::Stripes => PhantomKind::Stripes,
        KindArg::Shells => PhantomKind::Shells,
    };
    let config = PhantomConfig {
        blob_count: args.blob_count,
        stripe_period: args.stripe_period,
        shell_period: args.shell_period,
    };
    let v = generate_phantom(kind, shape, args.dtype.into(), args.seed, &config)?;
    v.save_ndv(&args.output)?;
    println!("output={}", args.output.display());
    println!("shape={shape:?}");
    println!("bytes={}", v.raw_bytes());
    Ok(())
}

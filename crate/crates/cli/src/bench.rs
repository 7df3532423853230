//! Method-versus-ratio comparison harness emitting CSV rows.

use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;

use inif_core::codec::{decode_volume, rate_control_encode};
use inif_core::format::{self, compression_ratio};
use inif_core::metrics::quality_report;
use inif_core::pipeline::{self, CompressionJob, DEFAULT_PRIOR_SPLIT};
use inif_core::volume::{
    generate_phantom, normalize_value, Dtype, PhantomConfig, PhantomKind, RoiSpec, Volume,
};

use crate::CliError;

pub const CSV_HEADER: &str = "method,ratio_target,ratio_achieved,psnr_db,ssim,iou,train_s,decode_s";
const METHODS: [&str; 3] = ["inif", "inif+prior", "codec-only"];

#[derive(Parser)]
pub struct BenchArgs {
    /// NDV volume to benchmark on; omitted, a seeded blob phantom.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "128,256,512")]
    ratios: String,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates per training step; 0 picks the default.
    #[arg(long, default_value_t = 0)]
    batch: usize,
    /// CSV destination; the table always goes to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

struct RowData {
    ratio_achieved: f64,
    psnr_db: f64,
    psnr_infinite: bool,
    ssim: f64,
    iou: Option<f64>,
    train_s: f64,
    decode_s: f64,
}

struct BenchRow {
    method: &'static str,
    ratio_target: f64,
    data: Option<RowData>,
}

impl BenchRow {
    fn to_csv(&self) -> String {
        match &self.data {
            None => format!("{},{},failed,,,,,", self.method, self.ratio_target),
            Some(d) => {
                let psnr = if d.psnr_infinite {
                    "inf".to_string()
                } else {
                    format!("{:.4}", d.psnr_db)
                };
                let iou = d.iou.map(|v| format!("{v:.6}")).unwrap_or_default();
                format!(
                    "{},{},{:.3},{},{:.6},{},{:.3},{:.3}",
                    self.method,
                    self.ratio_target,
                    d.ratio_achieved,
                    psnr,
                    d.ssim,
                    iou,
                    d.train_s,
                    d.decode_s
                )
            }
        }
    }
}

fn normalized(v: &Volume) -> Vec<f64> {
    (0..v.voxel_count())
        .map(|flat| {
            let c = v.channel_of_flat(flat);
            normalize_value(v.data[flat], v.channel_range[c])
        })
        .collect()
}

fn run_inif(v: &Volume, ratio: f64, args: &BenchArgs, prior: bool) -> Result<RowData, CliError> {
    let mut job = CompressionJob::new(v.clone(), ratio)?;
    job.steps = args.steps;
    job.seed = args.seed;
    job.batch = args.batch;
    if prior {
        job.prior_split = Some(DEFAULT_PRIOR_SPLIT);
    }
    let t0 = Instant::now();
    let (file, log) = pipeline::compress(&job)?;
    let train_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    format::decode(&file, &RoiSpec::full(&v.shape))?;
    let decode_s = t1.elapsed().as_secs_f64();
    Ok(RowData {
        ratio_achieved: compression_ratio(v.raw_bytes(), file.total_bytes())?,
        psnr_db: log.report.psnr_db,
        psnr_infinite: log.report.psnr_infinite,
        ssim: log.report.ssim,
        iou: log.report.iou,
        train_s,
        decode_s,
    })
}

fn run_codec_only(v: &Volume, ratio: f64) -> Result<RowData, CliError> {
    let target = (v.raw_bytes() as f64 / ratio).floor() as usize;
    let t0 = Instant::now();
    let bs = rate_control_encode(v, target, 8)?;
    let train_s = t0.elapsed().as_secs_f64();
    let bytes = bs.total_bytes();
    let t1 = Instant::now();
    let decoded = decode_volume(&bs)?;
    let decode_s = t1.elapsed().as_secs_f64();
    let report = quality_report(&normalized(&decoded), &normalized(v), &v.shape, None)?;
    Ok(RowData {
        ratio_achieved: compression_ratio(v.raw_bytes(), bytes)?,
        psnr_db: report.psnr_db,
        psnr_infinite: report.psnr_infinite,
        ssim: report.ssim,
        iou: None,
        train_s,
        decode_s,
    })
}

pub fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let volume = match &args.input {
        Some(path) => Volume::load_ndv(path)?,
        None => generate_phantom(
            PhantomKind::GaussianBlobs,
            [1, 1, 16, 64, 64],
            Dtype::U16,
            args.seed,
            &PhantomConfig::default(),
        )?,
    };
    let ratios: Vec<f64> = args
        .ratios
        .split(',')
        .map(|f| f.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad ratio list {:?}", args.ratios)))?;
    if ratios.is_empty() || ratios.iter().any(|&r| !(r > 1.0)) {
        return Err(CliError::Usage("ratios must all exceed 1".into()));
    }

    let mut rows = Vec::new();
    for &ratio in &ratios {
        for method in METHODS {
            let data = match method {
                "inif" => run_inif(&volume, ratio, &args, false),
                "inif+prior" => run_inif(&volume, ratio, &args, true),
                _ => run_codec_only(&volume, ratio),
            };
            let data = match data {
                Ok(d) => Some(d),
                Err(e) => {
                    eprintln!("bench: {method} at ratio {ratio} failed: {e}");
                    None
                }
            };
            rows.push(BenchRow {
                method,
                ratio_target: ratio,
                data,
            });
        }
    }

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    if let Some(path) = &args.output {
        std::fs::write(path, &csv).map_err(inif_core::InifError::Io)?;
    }

    println!(
        "{:<12} {:>8} {:>10} {:>9} {:>8} {:>8} {:>8} {:>8}",
        "method", "target", "achieved", "psnr_db", "ssim", "iou", "train_s", "decode_s"
    );
    for row in &rows {
        match &row.data {
            None => println!("{:<12} {:>8} {:>10}", row.method, row.ratio_target, "failed"),
            Some(d) => println!(
                "{:<12} {:>8} {:>10.3} {:>9.4} {:>8.4} {:>8} {:>8.3} {:>8.3}",
                row.method,
                row.ratio_target,
                d.ratio_achieved,
                d.psnr_db,
                d.ssim,
                d.iou.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                d.train_s,
                d.decode_s
            ),
        }
    }
    Ok(())
}

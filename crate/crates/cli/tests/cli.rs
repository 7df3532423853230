//! End-to-end checks of the `inif` binary against the library.

use std::path::Path;
use std::process::{Command, Output};

use inif_core::format::{self, InifFile};
use inif_core::volume::{RoiSpec, Volume};

fn inif(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inif"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = inif(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn make_phantom(dir: &Path, name: &str, shape: &str, seed: &str) {
    ok(
        dir,
        &[
            "phantom", "--kind", "blobs", "--shape", shape, "--dtype", "u16", "--seed", seed,
            "--output", name,
        ],
    );
}

#[test]
fn phantom_is_deterministic_and_echoes_shape() {
    let dir = tempfile::tempdir().unwrap();
    make_phantom(dir.path(), "a.ndv", "1,1,8,16,16", "3");
    make_phantom(dir.path(), "b.ndv", "1,1,8,16,16", "3");
    let a = std::fs::read(dir.path().join("a.ndv")).unwrap();
    let b = std::fs::read(dir.path().join("b.ndv")).unwrap();
    assert_eq!(a, b);
    let v = Volume::load_ndv(&dir.path().join("a.ndv")).unwrap();
    assert_eq!(v.shape, [1, 1, 8, 16, 16]);
}

#[test]
fn compress_honors_ratio_and_inspect_echoes_args() {
    let dir = tempfile::tempdir().unwrap();
    make_phantom(dir.path(), "p.ndv", "1,1,8,16,16", "3");
    ok(
        dir.path(),
        &[
            "compress", "--input", "p.ndv", "--output", "p.inif", "--ratio", "8", "--steps",
            "10", "--batch", "256", "--seed", "5",
        ],
    );
    let raw = Volume::load_ndv(&dir.path().join("p.ndv")).unwrap().raw_bytes();
    let file_bytes = std::fs::metadata(dir.path().join("p.inif")).unwrap().len() as usize;
    assert!(file_bytes <= raw / 8, "{file_bytes} vs {raw}");
    let inspect = ok(dir.path(), &["inspect", "--input", "p.inif"]);
    assert!(inspect.contains("total_steps=10"));
    assert!(inspect.contains("seed=5"));
    assert!(inspect.contains("optimizer_id=0"));
    assert!(inspect.contains("prior=none"));
    assert!(inspect.contains("ratio_achieved="));
}

#[test]
fn full_decompress_equals_library_decode() {
    let dir = tempfile::tempdir().unwrap();
    make_phantom(dir.path(), "p.ndv", "1,1,8,16,16", "3");
    ok(
        dir.path(),
        &[
            "compress", "--input", "p.ndv", "--output", "p.inif", "--ratio", "6", "--steps",
            "8", "--batch", "256",
        ],
    );
    ok(
        dir.path(),
        &["decompress", "--input", "p.inif", "--output", "cli.ndv"],
    );
    let file = InifFile::load(&dir.path().join("p.inif")).unwrap();
    let lib = format::decode(&file, &RoiSpec::full(&file.header.shape)).unwrap();
    let cli = std::fs::read(dir.path().join("cli.ndv")).unwrap();
    assert_eq!(cli, lib.to_ndv_bytes());
}

#[test]
fn roi_slice_and_stride_shape_the_output() {
    let dir = tempfile::tempdir().unwrap();
    make_phantom(dir.path(), "p.ndv", "1,1,8,16,16", "3");
    ok(
        dir.path(),
        &[
            "compress", "--input", "p.ndv", "--output", "p.inif", "--ratio", "6", "--steps",
            "5", "--batch", "256",
        ],
    );
    ok(
        dir.path(),
        &[
            "decompress", "--input", "p.inif", "--output", "slice.ndv", "--roi", "-,-,3:4,-,-",
        ],
    );
    let slice = Volume::load_ndv(&dir.path().join("slice.ndv")).unwrap();
    assert_eq!(slice.shape, [1, 1, 1, 16, 16]);
    ok(
        dir.path(),
        &[
            "decompress", "--input", "p.inif", "--output", "quarter.ndv", "--stride",
            "1,1,1,1,4",
        ],
    );
    let quarter = Volume::load_ndv(&dir.path().join("quarter.ndv")).unwrap();
    assert_eq!(quarter.shape, [1, 1, 8, 16, 4]);
}

#[test]
fn mask_decode_zeroes_everything_outside() {
    let dir = tempfile::tempdir().unwrap();
    make_phantom(dir.path(), "p.ndv", "1,1,1,16,16", "3");
    ok(
        dir.path(),
        &[
            "compress", "--input", "p.ndv", "--output", "p.inif", "--ratio", "2", "--steps",
            "5", "--batch", "256",
        ],
    );
    let shape = [1, 1, 1, 16, 16];
    let mut mask_data = vec![0.0; 256];
    for i in 40..60 {
        mask_data[i] = 1.0;
    }
    Volume::new(shape, inif_core::volume::Dtype::U8, mask_data.clone())
        .unwrap()
        .save_ndv(&dir.path().join("mask.ndv"))
        .unwrap();
    ok(
        dir.path(),
        &[
            "decompress", "--input", "p.inif", "--output", "masked.ndv", "--mask", "mask.ndv",
        ],
    );
    let masked = Volume::load_ndv(&dir.path().join("masked.ndv")).unwrap();
    let file = InifFile::load(&dir.path().join("p.inif")).unwrap();
    let full = format::decode(&file, &RoiSpec::full(&shape)).unwrap();
    for i in 0..256 {
        if mask_data[i] != 0.0 {
            assert_eq!(masked.data[i], full.data[i]);
        } else {
            assert_eq!(masked.data[i], 0.0);
        }
    }
}

#[test]
fn exit_codes_distinguish_usage_from_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    make_phantom(dir.path(), "p.ndv", "1,1,1,16,16", "3");
    ok(
        dir.path(),
        &[
            "compress", "--input", "p.ndv", "--output", "p.inif", "--ratio", "2", "--steps",
            "2", "--batch", "64",
        ],
    );
    // Bad ROI syntax is a usage error.
    let out = inif(
        dir.path(),
        &[
            "decompress", "--input", "p.inif", "--output", "x.ndv", "--roi", "nope",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    // Corrupt input is a data error.
    std::fs::write(dir.path().join("bad.inif"), b"not a file").unwrap();
    let out = inif(
        dir.path(),
        &["inspect", "--input", "bad.inif"],
    );
    assert_eq!(out.status.code(), Some(2));
    // Unknown flags are usage errors too.
    let out = inif(dir.path(), &["compress", "--nonsense"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn learned_optimizer_without_bundle_notes_the_fallback() {
    let dir = tempfile::tempdir().unwrap();
    make_phantom(dir.path(), "p.ndv", "1,1,1,16,16", "3");
    let stdout = ok(
        dir.path(),
        &[
            "compress", "--input", "p.ndv", "--output", "p.inif", "--ratio", "2", "--steps",
            "2", "--batch", "64", "--optimizer", "learned",
        ],
    );
    assert!(stdout.contains("fallback"));
    let inspect = ok(dir.path(), &["inspect", "--input", "p.inif"]);
    assert!(inspect.contains("optimizer_id=1"));
}

#[test]
fn chunked_compress_writes_manifest_and_inspects() {
    let dir = tempfile::tempdir().unwrap();
    make_phantom(dir.path(), "p.ndv", "1,1,16,16,16", "3");
    // One 16x16 slice costs 16*16*8*4 bytes; budget for half the stack.
    let budget = (16 * 16 * 8 * 4 * 8).to_string();
    ok(
        dir.path(),
        &[
            "compress", "--input", "p.ndv", "--output", "parts", "--ratio", "8", "--steps",
            "5", "--batch", "256", "--chunk-mem-bytes", &budget,
        ],
    );
    let manifest = std::fs::read_to_string(dir.path().join("parts/manifest.txt")).unwrap();
    assert!(manifest.contains("part=part_000.inif z0=0 z1=8"));
    assert!(manifest.contains("part=part_001.inif z0=8 z1=16"));
    let inspect = ok(dir.path(), &["inspect", "--input", "parts"]);
    assert!(inspect.contains("part=part_000.inif"));
    assert!(inspect.contains("total_bytes="));
    // Manifest plus parts stay under the target ratio.
    let total: u64 = std::fs::read_dir(dir.path().join("parts"))
        .unwrap()
        .map(|e| e.unwrap().metadata().unwrap().len())
        .sum();
    assert!(total <= 16 * 16 * 16 * 2 / 8);
}

/// Strip the wall-clock columns; they are hardware-dependent by design.
fn strip_times(csv: &str) -> String {
    csv.lines()
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 8, "row {line:?}");
            fields[..6].join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn bench_csv_is_reproducible_under_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    make_phantom(dir.path(), "p.ndv", "1,1,8,16,16", "3");
    let args = [
        "bench", "--input", "p.ndv", "--ratios", "4,8", "--steps", "5", "--batch", "128",
        "--seed", "9", "--output",
    ];
    let mut a1 = args.to_vec();
    a1.push("one.csv");
    ok(dir.path(), &a1);
    let mut a2 = args.to_vec();
    a2.push("two.csv");
    ok(dir.path(), &a2);
    let one = std::fs::read_to_string(dir.path().join("one.csv")).unwrap();
    let two = std::fs::read_to_string(dir.path().join("two.csv")).unwrap();
    assert_eq!(strip_times(&one), strip_times(&two));
    assert!(one.starts_with(
        "method,ratio_target,ratio_achieved,psnr_db,ssim,iou,train_s,decode_s\n"
    ));
    // Three methods per ratio, two ratios, plus the header.
    assert_eq!(one.lines().count(), 7);
}

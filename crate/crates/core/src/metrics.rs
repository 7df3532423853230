//! Full-reference quality metrics on normalized intensities.

use crate::error::{InifError, Result};
use crate::volume::AXES;

/// SSIM window edge length along each non-singleton spatial axis.
pub const SSIM_WINDOW: usize = 7;
/// Peak of the normalized intensity range used for SSIM stabilizers.
pub const SSIM_PEAK: f64 = 100.0;

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(InifError::ShapeMismatch(format!(
            "mse over {} vs {} values",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (t - p) * (t - p))
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    pub infinite: bool,
}

/// 10 log10(peak^2 / MSE); identical inputs set the infinite flag.
pub fn psnr(pred: &[f64], truth: &[f64], peak: f64) -> Result<Psnr> {
    let err = mse(pred, truth)?;
    if err == 0.0 {
        return Ok(Psnr {
            db: f64::INFINITY,
            infinite: true,
        });
    }
    Ok(Psnr {
        db: 10.0 * (peak * peak / err).log10(),
        infinite: false,
    })
}

/// Mean structural similarity over sliding windows within each (t, c)
/// plane. Windows span every spatial axis with more than one sample;
/// luminance, contrast and structure terms use the standard stabilizers
/// with c3 = c2 / 2 at peak 100.
pub fn ssim(pred: &[f64], truth: &[f64], shape: &[usize; AXES]) -> Result<f64> {
    let voxels: usize = shape.iter().product();
    if pred.len() != voxels || truth.len() != voxels {
        return Err(InifError::ShapeMismatch(format!(
            "ssim buffers {} / {} vs shape {shape:?}",
            pred.len(),
            truth.len()
        )));
    }
    // Window extent per spatial axis: full window where the axis is
    // non-singleton, a single sample otherwise.
    let mut win = [1usize; 3];
    for (k, &len) in shape[2..].iter().enumerate() {
        if len > 1 {
            if len < SSIM_WINDOW {
                return Err(InifError::InvalidArgument(format!(
                    "ssim window {SSIM_WINDOW} exceeds axis length {len}"
                )));
            }
            win[k] = SSIM_WINDOW;
        }
    }
    let c1 = (0.01 * SSIM_PEAK).powi(2);
    let c2 = (0.03 * SSIM_PEAK).powi(2);
    let c3 = c2 / 2.0;
    let n_win = (win[0] * win[1] * win[2]) as f64;
    let plane = shape[2] * shape[3] * shape[4];
    let (sy, sx) = (shape[3] * shape[4], shape[4]);
    let mut total = 0.0;
    let mut count = 0usize;
    for tc in 0..shape[0] * shape[1] {
        let base = tc * plane;
        for z0 in 0..=(shape[2] - win[0]) {
            for y0 in 0..=(shape[3] - win[1]) {
                for x0 in 0..=(shape[4] - win[2]) {
                    let (mut sx_, mut sy_, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dz in 0..win[0] {
                        for dy in 0..win[1] {
                            for dx in 0..win[2] {
                                let at = base + (z0 + dz) * sy + (y0 + dy) * sx + x0 + dx;
                                let a = pred[at];
                                let b = truth[at];
                                sx_ += a;
                                sy_ += b;
                                sxx += a * a;
                                syy += b * b;
                                sxy += a * b;
                            }
                        }
                    }
                    let mx = sx_ / n_win;
                    let my = sy_ / n_win;
                    let vx = (sxx / n_win - mx * mx).max(0.0);
                    let vy = (syy / n_win - my * my).max(0.0);
                    let cov = sxy / n_win - mx * my;
                    let (dx_, dy_) = (vx.sqrt(), vy.sqrt());
                    let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                    let c = (2.0 * dx_ * dy_ + c2) / (vx + vy + c2);
                    let s = (cov + c3) / (dx_ * dy_ + c3);
                    total += l * c * s;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Metrics bundle written into reports and the bench CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub mse: f64,
    pub psnr_db: f64,
    pub psnr_infinite: bool,
    pub ssim: f64,
    pub iou: Option<f64>,
    pub voxels: usize,
}

impl QualityReport {
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("voxels={}\n", self.voxels));
        out.push_str(&format!("mse={:.6}\n", self.mse));
        if self.psnr_infinite {
            out.push_str("psnr_db=inf\n");
        } else {
            out.push_str(&format!("psnr_db={:.4}\n", self.psnr_db));
        }
        out.push_str(&format!("ssim={:.6}\n", self.ssim));
        if let Some(iou) = self.iou {
            out.push_str(&format!("iou={iou:.6}\n"));
        }
        out
    }
}

/// Compare normalized reconstructions against normalized truth at peak 100.
pub fn quality_report(
    pred: &[f64],
    truth: &[f64],
    shape: &[usize; AXES],
    iou: Option<f64>,
) -> Result<QualityReport> {
    let err = mse(pred, truth)?;
    let p = psnr(pred, truth, SSIM_PEAK)?;
    let s = ssim(pred, truth, shape)?;
    Ok(QualityReport {
        mse: err,
        psnr_db: p.db,
        psnr_infinite: p.infinite,
        ssim: s,
        iou,
        voxels: pred.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_plane(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0.0..100.0)).collect()
    }

    #[test]
    fn mse_basics() {
        let a = random_plane(1, 64);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 3.0).collect();
        assert!((mse(&a, &b).unwrap() - 9.0).abs() < 1e-12);
        assert!(mse(&a, &b[..10]).is_err());
        assert!(mse(&[], &[]).is_err());
    }

    #[test]
    fn mse_matches_naive_loop() {
        let a = random_plane(2, 256);
        let b = random_plane(3, 256);
        let mut acc = 0.0;
        for i in 0..a.len() {
            let d = b[i] - a[i];
            acc += d * d;
        }
        acc /= a.len() as f64;
        assert!((mse(&a, &b).unwrap() - acc).abs() < 1e-12);
    }

    #[test]
    fn psnr_flags_and_scaling() {
        let a = random_plane(4, 128);
        let p = psnr(&a, &a, 100.0).unwrap();
        assert!(p.infinite && p.db.is_infinite());
        // MSE == peak^2 gives exactly 0 dB.
        let zeros = vec![0.0; 16];
        let peaky = vec![100.0; 16];
        let p = psnr(&zeros, &peaky, 100.0).unwrap();
        assert!(p.db.abs() < 1e-12 && !p.infinite);
        // Halving RMSE adds about 6.02 dB.
        let b: Vec<f64> = a.iter().map(|v| v + 2.0).collect();
        let c: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        let gain = psnr(&a, &c, 100.0).unwrap().db - psnr(&a, &b, 100.0).unwrap().db;
        assert!((gain - 20.0 * 2.0f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_is_one() {
        let shape = [1, 1, 1, 16, 16];
        let a = random_plane(5, 256);
        assert_eq!(ssim(&a, &a, &shape).unwrap(), 1.0);
    }

    #[test]
    fn ssim_anticorrelated_patch_negative() {
        // y = -x + 2*mean keeps luminance and contrast at 1 but flips the
        // sign of the covariance; with variance well above c3 the mean
        // similarity goes negative.
        let shape = [1, 1, 1, 16, 16];
        let x: Vec<f64> = (0..256)
            .map(|i| 50.0 + 30.0 * ((i % 16) as f64 / 15.0 * std::f64::consts::TAU).sin())
            .collect();
        let mean = x.iter().sum::<f64>() / 256.0;
        let y: Vec<f64> = x.iter().map(|v| 2.0 * mean - v).collect();
        assert!(ssim(&x, &y, &shape).unwrap() < 0.0);
    }

    #[test]
    fn ssim_matches_naive_double_loop() {
        let shape = [1, 1, 1, 16, 16];
        let a = random_plane(6, 256);
        let b = random_plane(7, 256);
        // Independent reimplementation with centered per-window loops.
        let c1 = 1.0;
        let c2 = 9.0;
        let c3 = 4.5;
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=(16 - SSIM_WINDOW) {
            for x0 in 0..=(16 - SSIM_WINDOW) {
                let mut wx = Vec::new();
                let mut wy = Vec::new();
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        wx.push(a[(y0 + dy) * 16 + x0 + dx]);
                        wy.push(b[(y0 + dy) * 16 + x0 + dx]);
                    }
                }
                let n = wx.len() as f64;
                let mx = wx.iter().sum::<f64>() / n;
                let my = wy.iter().sum::<f64>() / n;
                let vx = wx.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / n;
                let vy = wy.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n;
                let cov = wx
                    .iter()
                    .zip(&wy)
                    .map(|(p, q)| (p - mx) * (q - my))
                    .sum::<f64>()
                    / n;
                let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                let c = (2.0 * vx.sqrt() * vy.sqrt() + c2) / (vx + vy + c2);
                let s = (cov + c3) / (vx.sqrt() * vy.sqrt() + c3);
                total += l * c * s;
                count += 1;
            }
        }
        let naive = total / count as f64;
        assert!((ssim(&a, &b, &shape).unwrap() - naive).abs() < 1e-9);
    }

    #[test]
    fn ssim_3d_window_runs() {
        let shape = [1, 1, 8, 8, 8];
        let a = random_plane(8, 512);
        let b = random_plane(9, 512);
        let v = ssim(&a, &b, &shape).unwrap();
        assert!((-1.0..=1.0).contains(&v));
        // 2x2x2 valid window positions.
        assert_eq!(ssim(&a, &a, &shape).unwrap(), 1.0);
    }

    #[test]
    fn ssim_window_too_large() {
        let shape = [1, 1, 1, 4, 16];
        let a = random_plane(10, 64);
        assert!(matches!(
            ssim(&a, &a, &shape),
            Err(InifError::InvalidArgument(_))
        ));
    }

    #[test]
    fn ssim_in_range_randomized() {
        for seed in 0..20 {
            let shape = [1, 1, 1, 16, 16];
            let a = random_plane(100 + seed, 256);
            let b = random_plane(200 + seed, 256);
            let v = ssim(&a, &b, &shape).unwrap();
            assert!((-1.0..=1.0).contains(&v), "ssim {v} out of range");
        }
    }

    #[test]
    fn report_text_shape() {
        let a = random_plane(11, 256);
        let b: Vec<f64> = a.iter().map(|v| v + 0.5).collect();
        let r = quality_report(&b, &a, &[1, 1, 1, 16, 16], Some(0.9)).unwrap();
        let text = r.to_key_value();
        assert!(text.contains("psnr_db="));
        assert!(text.contains("iou=0.9"));
        let exact = quality_report(&a, &a, &[1, 1, 1, 16, 16], None).unwrap();
        assert!(exact.to_key_value().contains("psnr_db=inf"));
    }
}

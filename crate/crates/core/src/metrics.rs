//! PSNR and SSIM on the luma (Y) channel.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{luma, ColorImage};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Single-channel `f64` image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} samples do not fill {height}x{width}",
                data.len()
            )));
        }
        Ok(GrayImage { height, width, data })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }
}

/// Full-range BT.601 luma `Y = 0.299R + 0.587G + 0.114B`.
pub fn rgb_to_y(img: &ColorImage) -> Result<GrayImage> {
    img.check_unit_range()?;
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| luma(p[0] as f64, p[1] as f64, p[2] as f64))
        .collect();
    GrayImage::new(img.height(), img.width(), data)
}

fn check_same(x: &GrayImage, y: &GrayImage) -> Result<()> {
    if x.height != y.height || x.width != y.width {
        return Err(Error::Shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            x.height, x.width, y.height, y.width
        )));
    }
    Ok(())
}

/// `10·log10(peak²/MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &GrayImage, y: &GrayImage, peak: f64) -> Result<f64> {
    check_same(x, y)?;
    let n = x.data.len().max(1) as f64;
    let mse = compensated_sum(x.data.iter().zip(&y.data).map(|(a, b)| (a - b) * (a - b))) / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Neumaier summation.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = s + v;
        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    s + c
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter keeping only fully covered ("valid") positions.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// `K₁ = 0.01`, `K₂ = 0.03` and unit peak, over valid window positions.
pub fn ssim(x: &GrayImage, y: &GrayImage) -> Result<f64> {
    check_same(x, y)?;
    if x.height < SSIM_WINDOW || x.width < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            x.height, x.width
        )));
    }
    let (h, w) = (x.height, x.width);
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_x = filter_valid(&x.data, h, w, &k);
    let mu_y = filter_valid(&y.data, h, w, &k);
    let exx = filter_valid(&prod(&x.data, &x.data), h, w, &k);
    let eyy = filter_valid(&prod(&y.data, &y.data), h, w, &k);
    let exy = filter_valid(&prod(&x.data, &y.data), h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sxx = exx[i] - mx * mx;
        let syy = eyy[i] - my * my;
        let sxy = exy[i] - mx * my;
        let num = (2.0 * (mx * my) + c1) * (2.0 * sxy + c2);
        let den = (mx * mx + my * my + c1) * (sxx + syy + c2);
        total += num / den;
    }
    Ok(total / mu_x.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricEntry {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
    /// Pairs that could not be scored, with the reason.
    pub failures: Vec<(String, String)>,
}

impl MetricReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.entries.iter().map(|e| e.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.entries.iter().map(|e| e.ssim))
    }

    /// `filename,psnr_db,ssim` rows followed by a `MEAN` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("filename,psnr_db,ssim\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{:.6},{:.6}", e.name, e.psnr_db, e.ssim);
        }
        let _ = writeln!(s, "MEAN,{:.6},{:.6}", self.mean_psnr(), self.mean_ssim());
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Scores one restored/ground-truth pair on the Y channel.
pub fn score_pair(name: &str, restored: &ColorImage, truth: &ColorImage) -> Result<MetricEntry> {
    let (a, b) = (rgb_to_y(restored)?, rgb_to_y(truth)?);
    Ok(MetricEntry {
        name: name.to_string(),
        psnr_db: psnr(&a, &b, 1.0)?,
        ssim: ssim(&a, &b)?,
    })
}

/// Scores every pair; a pair that fails is recorded and skipped.
pub fn evaluate<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a ColorImage, &'a ColorImage)>) -> MetricReport {
    let mut report = MetricReport::default();
    for (name, restored, truth) in pairs {
        match score_pair(name, restored, truth) {
            Ok(e) => report.entries.push(e),
            Err(e) => report.failures.push((name.to_string(), e.to_string())),
        }
    }
    report
}

/// Pairs `restored/<name>.png` with `clean/<name>.png` and scores them.
/// Files missing from `clean` are reported as failures.
pub fn evaluate_dirs(restored: &Path, clean: &Path) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for name in crate::data::list_pngs(restored)? {
        let outcome = (|| -> Result<MetricEntry> {
            let r = ColorImage::load_png(&restored.join(&name))?;
            let c = ColorImage::load_png(&clean.join(&name))?;
            score_pair(&name, &r, &c)
        })();
        match outcome {
            Ok(e) => report.entries.push(e),
            Err(e) => report.failures.push((name, e.to_string())),
        }
    }
    Ok(report)
}

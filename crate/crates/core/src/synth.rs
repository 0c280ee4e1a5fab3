//! Procedural rain streaks: `I = clip(J + S, 0, 1)` with a gray streak layer `S`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{list_pngs, PairedDataset};
use crate::error::{Error, Result};
use crate::image::ColorImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RainParams {
    pub streaks_per_mpx: f64,
    pub length: (f64, f64),
    pub width: (f64, f64),
    /// Maximum deviation from vertical, in degrees, on either side.
    pub angle_range_deg: f64,
    pub intensity: (f64, f64),
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for RainParams {
    fn default() -> Self {
        RainParams {
            streaks_per_mpx: 2000.0,
            length: (10.0, 40.0),
            width: (1.0, 2.0),
            angle_range_deg: 20.0,
            intensity: (0.2, 0.6),
            blur_sigma: 0.8,
            seed: 0,
        }
    }
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64), min: f64, max: f64| {
            if !(lo >= min && hi >= lo && hi <= max) {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is invalid")));
            }
            Ok(())
        };
        if !(self.streaks_per_mpx >= 0.0 && self.streaks_per_mpx.is_finite()) {
            return Err(Error::Config("streak density must be non-negative".into()));
        }
        range("length", self.length, f64::MIN_POSITIVE, f64::MAX)?;
        range("width", self.width, f64::MIN_POSITIVE, f64::MAX)?;
        range("intensity", self.intensity, 0.0, 1.0)?;
        if !(0.0..=90.0).contains(&self.angle_range_deg) {
            return Err(Error::Config(format!(
                "angle range {} is outside [0, 90] degrees",
                self.angle_range_deg
            )));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::Config("blur sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub rainy: ColorImage,
    /// Row-major `H×W` streak layer, added equally to every color channel.
    pub streaks: Vec<f32>,
}

fn sample(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Synthesizes rain on `clean` using the generator seeded from `p.seed`.
pub fn synthesize(clean: &ColorImage, p: &RainParams) -> Result<Synthesis> {
    synthesize_with(clean, p, &mut ChaCha8Rng::seed_from_u64(p.seed))
}

pub fn synthesize_with(clean: &ColorImage, p: &RainParams, rng: &mut impl Rng) -> Result<Synthesis> {
    p.validate()?;
    clean.check_unit_range()?;
    let (h, w) = (clean.height(), clean.width());
    let expected = p.streaks_per_mpx * (h * w) as f64 / 1e6;
    let mut count = expected.floor() as usize;
    if rng.gen::<f64>() < expected.fract() {
        count += 1;
    }

    let mut s = vec![0f32; h * w];
    for _ in 0..count {
        let len = sample(rng, p.length);
        let width = sample(rng, p.width);
        let angle = sample(rng, (-p.angle_range_deg, p.angle_range_deg)).to_radians();
        let intensity = sample(rng, p.intensity);
        let cx = rng.gen_range(-0.1..1.1) * w as f64;
        let cy = rng.gen_range(-0.1..1.1) * h as f64;
        let (dx, dy) = (angle.sin() * len / 2.0, angle.cos() * len / 2.0);
        draw_segment(&mut s, h, w, (cx - dx, cy - dy), (cx + dx, cy + dy), width, intensity);
    }
    if p.blur_sigma > 0.0 {
        s = gaussian_blur(&s, h, w, p.blur_sigma);
    }

    let mut rainy = clean.clone();
    for (px, &v) in rainy.data_mut().chunks_exact_mut(3).zip(&s) {
        for c in px {
            *c = (*c + v).clamp(0.0, 1.0);
        }
    }
    Ok(Synthesis { rainy, streaks: s })
}

fn draw_segment(s: &mut [f32], h: usize, w: usize, a: (f64, f64), b: (f64, f64), width: f64, intensity: f64) {
    let reach = width / 2.0 + 0.5;
    let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + reach).ceil().max(0.0) as usize).min(w);
    let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + reach).ceil().max(0.0) as usize).min(h);
    let (ux, uy) = (b.0 - a.0, b.1 - a.1);
    let len2 = ux * ux + uy * uy;
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((px - a.0) * ux + (py - a.1) * uy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let dist = ((px - a.0 - t * ux).powi(2) + (py - a.1 - t * uy).powi(2)).sqrt();
            let cover = (reach - dist).clamp(0.0, 1.0);
            if cover > 0.0 {
                s[y * w + x] += (cover * intensity) as f32;
            }
        }
    }
}

/// Separable Gaussian blur; taps falling outside the image are dropped and the rest renormalized.
pub fn gaussian_blur(src: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let pass = |src: &[f32], horizontal: bool| {
        let mut out = vec![0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (i, kv) in k.iter().enumerate() {
                    let d = i as isize - r;
                    let (yy, xx) = if horizontal {
                        (y as isize, x as isize + d)
                    } else {
                        (y as isize + d, x as isize)
                    };
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += kv * src[yy as usize * w + xx as usize] as f64;
                        norm += kv;
                    }
                }
                out[y * w + x] = (acc / norm) as f32;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// A smooth synthetic scene: a color gradient with a few flat shapes and a faint texture.
pub fn procedural_scene(height: usize, width: usize, seed: u64) -> ColorImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] { [(); 3].map(|_| rng.gen_range(0.05..0.75)) };
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let shapes: Vec<([f64; 3], [f64; 4], bool)> = (0..4)
        .map(|_| {
            let col = color(&mut rng);
            let geom = [rng.gen(), rng.gen(), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4)];
            (col, geom, rng.gen())
        })
        .collect();
    let (fx, fy, phase) = (rng.gen_range(2.0..8.0), rng.gen_range(2.0..8.0), rng.gen_range(0.0..std::f64::consts::TAU));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::FRAC_PI_2);

    let mut img = ColorImage::filled(height, width, [0.0; 3]);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = ((x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64);
            let t = (u * angle.cos() + v * angle.sin()).clamp(0.0, 1.0);
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = c0[c] + (c1[c] - c0[c]) * t;
            }
            for (col, g, disc) in &shapes {
                let inside = if *disc {
                    ((u - g[0]) / g[2]).powi(2) + ((v - g[1]) / g[3]).powi(2) < 1.0
                } else {
                    (u - g[0]).abs() < g[2] / 2.0 && (v - g[1]).abs() < g[3] / 2.0
                };
                if inside {
                    px = *col;
                }
            }
            let tex = 0.04 * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
            img.set_pixel(y, x, px.map(|p| (p + tex).clamp(0.0, 1.0) as f32));
        }
    }
    img
}

/// Generator for pair `index` of a dataset seeded with `seed`.
pub fn pair_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// Writes `n_pairs` pairs under `out/rainy` and `out/clean`, cycling through `clean`.
pub fn make_dataset_from_images(clean: &[ColorImage], p: &RainParams, n_pairs: usize, out: &Path) -> Result<PairedDataset> {
    p.validate()?;
    if clean.is_empty() && n_pairs > 0 {
        return Err(Error::Dataset("no clean images to synthesize from".into()));
    }
    let (rainy_dir, clean_dir) = (out.join("rainy"), out.join("clean"));
    for d in [&rainy_dir, &clean_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for i in 0..n_pairs {
        let j = &clean[i % clean.len()];
        let syn = synthesize_with(j, p, &mut pair_rng(p.seed, i as u64))?;
        let name = format!("{i:05}.png");
        syn.rainy.save_png(&rainy_dir.join(&name))?;
        j.save_png(&clean_dir.join(&name))?;
    }
    PairedDataset::load(out)
}

/// Reads every PNG in `clean_dir` and writes a paired dataset under `out`.
pub fn make_dataset(clean_dir: &Path, p: &RainParams, n_pairs: usize, out: &Path) -> Result<PairedDataset> {
    let names = list_pngs(clean_dir)?;
    if names.is_empty() {
        return Err(Error::Dataset(format!("no PNG images in {}", clean_dir.display())));
    }
    let images = names
        .iter()
        .map(|n| ColorImage::load_png(&clean_dir.join(n)))
        .collect::<Result<Vec<_>>>()?;
    make_dataset_from_images(&images, p, n_pairs, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, v: f32) -> ColorImage {
        ColorImage::filled(h, w, [v; 3])
    }

    #[test]
    fn zero_density_is_identity() {
        let j = procedural_scene(32, 48, 3);
        let p = RainParams {
            streaks_per_mpx: 0.0,
            ..Default::default()
        };
        let s = synthesize(&j, &p).unwrap();
        assert_eq!(s.rainy, j);
        assert!(s.streaks.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn additive_model_holds() {
        let j = procedural_scene(64, 64, 9);
        for seed in 0..5 {
            let p = RainParams {
                seed,
                streaks_per_mpx: 6000.0,
                ..Default::default()
            };
            let s = synthesize(&j, &p).unwrap();
            assert!(s.streaks.iter().all(|&v| v >= 0.0));
            for (i, (r, c)) in s.rainy.data().iter().zip(j.data()).enumerate() {
                assert!(r >= c);
                assert_eq!(*r, (c + s.streaks[i / 3]).clamp(0.0, 1.0));
            }
        }
    }

    #[test]
    fn coverage_in_frozen_band() {
        let j = gray(256, 256, 0.5);
        let s = synthesize(&j, &RainParams::default()).unwrap();
        let frac = s.streaks.iter().filter(|&&v| v > 0.05).count() as f64 / (256.0 * 256.0);
        assert!((0.08..0.16).contains(&frac), "coverage {frac}");
    }

    #[test]
    fn invalid_params_rejected() {
        let j = gray(8, 8, 0.5);
        for p in [
            RainParams { intensity: (0.2, 1.5), ..Default::default() },
            RainParams { length: (0.0, 4.0), ..Default::default() },
            RainParams { width: (3.0, 2.0), ..Default::default() },
            RainParams { streaks_per_mpx: -1.0, ..Default::default() },
        ] {
            assert!(synthesize(&j, &p).is_err());
        }
        assert!(synthesize(&gray(8, 8, 1.2), &RainParams::default()).is_err());
    }

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let a = procedural_scene(40, 40, 5);
        assert_eq!(a, procedural_scene(40, 40, 5));
        assert_ne!(a, procedural_scene(40, 40, 6));
        a.check_unit_range().unwrap();
    }
}

//! Paired rainy/clean datasets and patch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ColorImage;

/// Sorted file names of the `.png` files directly inside `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

#[derive(Debug, Clone)]
pub struct Pair {
    pub name: String,
    pub rainy: ColorImage,
    pub clean: ColorImage,
}

/// Rainy/clean image pairs matched by file name, held in memory.
#[derive(Debug, Clone, Default)]
pub struct PairedDataset {
    root: Option<PathBuf>,
    pairs: Vec<Pair>,
}

impl PairedDataset {
    /// Loads `root/rainy/*.png` and the same-named files from `root/clean`.
    pub fn load(root: &Path) -> Result<Self> {
        let (rainy_dir, clean_dir) = (root.join("rainy"), root.join("clean"));
        let mut pairs = Vec::new();
        for name in list_pngs(&rainy_dir)? {
            let clean_path = clean_dir.join(&name);
            if !clean_path.is_file() {
                return Err(Error::Dataset(format!("{name} has no clean partner in {}", clean_dir.display())));
            }
            let rainy = ColorImage::load_png(&rainy_dir.join(&name))?;
            let clean = ColorImage::load_png(&clean_path)?;
            pairs.push(Pair { name, rainy, clean });
        }
        let mut ds = Self::from_pairs(pairs)?;
        ds.root = Some(root.to_path_buf());
        Ok(ds)
    }

    pub fn from_pairs(pairs: Vec<Pair>) -> Result<Self> {
        for p in &pairs {
            if (p.rainy.height(), p.rainy.width()) != (p.clean.height(), p.clean.width()) {
                return Err(Error::Dataset(format!(
                    "{}: rainy is {}x{} but clean is {}x{}",
                    p.name,
                    p.rainy.height(),
                    p.rainy.width(),
                    p.clean.height(),
                    p.clean.width()
                )));
            }
        }
        Ok(PairedDataset { root: None, pairs })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn get(&self, i: usize) -> &Pair {
        &self.pairs[i]
    }

    /// Splits off the last `n` pairs.
    pub fn split_tail(mut self, n: usize) -> (Self, Self) {
        let tail = self.pairs.split_off(self.pairs.len().saturating_sub(n));
        (self, PairedDataset { root: None, pairs: tail })
    }
}

/// Crop position and flip decision shared by both images of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchDraw {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

impl PatchDraw {
    pub fn sample(height: usize, width: usize, patch: usize, rng: &mut impl Rng) -> Self {
        let top = rng.gen_range(0..=height.saturating_sub(patch));
        let left = rng.gen_range(0..=width.saturating_sub(patch));
        PatchDraw {
            top,
            left,
            flip: rng.gen_bool(0.5),
        }
    }

    pub fn apply(&self, img: &ColorImage, patch: usize) -> Result<ColorImage> {
        let padded = img.reflect_pad_to(patch, patch);
        let crop = padded.crop(self.top, self.left, patch, patch)?;
        Ok(if self.flip { crop.flip_horizontal() } else { crop })
    }
}

/// Random aligned `patch×patch` crops of both images, flipped together half the time.
/// Images smaller than the patch are reflect-padded first.
pub fn sample_patch(pair: &Pair, patch: usize, rng: &mut impl Rng) -> Result<(ColorImage, ColorImage, PatchDraw)> {
    let h = pair.rainy.height().max(patch);
    let w = pair.rainy.width().max(patch);
    let d = PatchDraw::sample(h, w, patch, rng);
    Ok((d.apply(&pair.rainy, patch)?, d.apply(&pair.clean, patch)?, d))
}

//! RGB images, their quaternion encoding `(L, R, G, B)`, and PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{QTensor, Real};

/// BT.601 luma weights, shared by the quaternion encoding and the Y-channel metrics.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Interleaved `H×W×3` RGB image with `f32` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ColorImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::from_interleaved(height, width, 3, data)
    }

    pub fn from_interleaved(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if channels != 3 {
            return Err(Error::Shape(format!(
                "expected a 3-channel RGB image, got {channels} channels"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} samples do not fill a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(ColorImage {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        ColorImage {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Fails if any sample is outside `[0, 1]` or not a number.
    pub fn check_unit_range(&self) -> Result<()> {
        match self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            Some(i) => Err(Error::InvalidValue(format!(
                "sample {} at pixel {} is outside [0, 1]",
                self.data[i],
                i / 3
            ))),
            None => Ok(()),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width * 3) {
            let w = self.width;
            for x in 0..w / 2 {
                for c in 0..3 {
                    row.swap(x * 3 + c, (w - 1 - x) * 3 + c);
                }
            }
        }
        out
    }

    /// Copies the `height×width` window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let s = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[s..s + width * 3]);
        }
        Ok(ColorImage {
            height,
            width,
            data,
        })
    }

    /// Mirror-pads (edge pixel not repeated) to at least the given size.
    /// Padding goes on the bottom and right edges.
    pub fn reflect_pad_to(&self, height: usize, width: usize) -> Self {
        let (h, w) = (height.max(self.height), width.max(self.width));
        let mut out = ColorImage::filled(h, w, [0.0; 3]);
        for y in 0..h {
            let sy = reflect_index(y, self.height);
            for x in 0..w {
                out.set_pixel(y, x, self.pixel(sy, reflect_index(x, self.width)));
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        ColorImage::new(h as usize, w as usize, data)
    }

    /// Writes an 8-bit PNG; samples are clamped to `[0, 1]` and rounded.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Rounds every sample to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantize_8bit(&self) -> Self {
        ColorImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Index into `0..n` for a mirrored extension without edge repetition.
pub(crate) fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Encodes one RGB image as a `1×1×H×W` quaternion tensor with components `(L, R, G, B)`.
pub fn encode_image<T: Real>(rgb: &ColorImage) -> Result<QTensor<T>> {
    encode_batch(std::slice::from_ref(rgb))
}

/// Encodes equally sized images into one `B×1×H×W` quaternion batch.
pub fn encode_batch<T: Real>(images: &[ColorImage]) -> Result<QTensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut q = QTensor::zeros(images.len(), 1, h, w);
    for (b, img) in images.iter().enumerate() {
        if img.height != h || img.width != w {
            return Err(Error::Shape(format!(
                "batch image {b} is {}x{}, expected {h}x{w}",
                img.height, img.width
            )));
        }
        img.check_unit_range()?;
        for comp in 0..4 {
            let plane = q.component_plane_mut(b, comp, 0);
            for (p, px) in img.data.chunks_exact(3).enumerate() {
                let v = if comp == 0 {
                    luma(px[0] as f64, px[1] as f64, px[2] as f64)
                } else {
                    px[comp - 1] as f64
                };
                plane[p] = T::from_f64_lossy(v);
            }
        }
    }
    Ok(q)
}

/// BT.601 full-range luma.
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
}

/// Extracts the RGB (i, j, k) components of quaternion channel 0 of batch item
/// `index`, clamped to `[0, 1]`. The real (luminosity) component is dropped.
pub fn decode_image<T: Real>(q: &QTensor<T>, index: usize) -> ColorImage {
    let (h, w) = (q.height(), q.width());
    let mut data = vec![0.0f32; h * w * 3];
    for comp in 1..4 {
        let plane = q.component_plane(index, comp, 0);
        for (p, &v) in plane.iter().enumerate() {
            data[p * 3 + comp - 1] = v.as_f64().clamp(0.0, 1.0) as f32;
        }
    }
    ColorImage {
        height: h,
        width: w,
        data,
    }
}

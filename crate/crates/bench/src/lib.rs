//! Deterministic inputs shared by the benchmarks.

use qsam_core::metrics::GrayImage;
use qsam_core::{QTensor, Quaternion, Real, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor<T: Real>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
}

pub fn random_qtensor<T: Real>(batch: usize, channels: usize, size: usize, seed: u64) -> QTensor<T> {
    QTensor::from_real(random_tensor(Shape::new(batch, 4 * channels, size, size), seed)).unwrap()
}

pub fn random_quaternions(n: usize, seed: u64) -> Vec<Quaternion<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Quaternion::new(rng.gen(), rng.gen(), rng.gen(), rng.gen()))
        .collect()
}

/// Smooth gradient plus noise, so SSIM windows see structure.
pub fn textured_gray(size: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            (0.5 + 0.3 * (x / 9.0).sin() * (y / 13.0).cos() + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)
        })
        .collect();
    GrayImage::new(size, size, data).unwrap()
}

//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use qsam_core::data::Pair;
use qsam_core::metrics::GrayImage;
use qsam_core::synth::{pair_rng, procedural_scene, synthesize_with};
use qsam_core::{QTensor, Quaternion, RainParams};

/// The sixteen-term Hamilton product written out from the basis table.
pub fn hamilton_oracle(x: [f64; 4], y: [f64; 4]) -> [f64; 4] {
    let [a1, b1, c1, d1] = x;
    let [a2, b2, c2, d2] = y;
    [
        a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
        a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
        a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
        a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
    ]
}

pub fn norm(q: [f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn comps<T: qsam_core::Real>(q: Quaternion<T>) -> [f64; 4] {
    q.components().map(|v| v.as_f64())
}

/// Quaternion convolution evaluated pixel by pixel: for every output position,
/// `bias + Σ_c Σ_taps W[o,c,tap] ⊗ x[c, position]` with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn qconv_oracle(
    x: &QTensor<f64>,
    banks: &[Vec<f64>; 4],
    bias: &[f64],
    out_ch: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<[f64; 4]> {
    let (n, cin, h, w) = (x.batch(), x.channels(), x.height(), x.width());
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let mut out = Vec::with_capacity(n * out_ch * ho * wo);
    for b in 0..n {
        for o in 0..out_ch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = [bias[o], bias[out_ch + o], bias[2 * out_ch + o], bias[3 * out_ch + o]];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wi = ((o * cin + c) * k + ky) * k + kx;
                                let wq = [banks[0][wi], banks[1][wi], banks[2][wi], banks[3][wi]];
                                let xq = comps(x.get(b, c, iy as usize, ix as usize));
                                let p = hamilton_oracle(wq, xq);
                                for i in 0..4 {
                                    acc[i] += p[i];
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// PSNR straight from the definition, summing squared errors in order.
pub fn psnr_oracle(x: &GrayImage, y: &GrayImage) -> f64 {
    let mut sse = 0.0;
    for i in 0..x.height {
        for j in 0..x.width {
            let d = x.at(i, j) - y.at(i, j);
            sse += d * d;
        }
    }
    let mse = sse / (x.height * x.width) as f64;
    10.0 * (1.0 / mse).log10()
}

/// Mean SSIM with a full 2-D Gaussian window evaluated at every valid position.
pub fn ssim_oracle(x: &GrayImage, y: &GrayImage) -> f64 {
    let (k1, k2) = (0.01f64, 0.03f64);
    let (c1, c2) = ((k1 * k1), (k2 * k2));
    let size = 11;
    let sigma: f64 = 1.5;
    let mut win = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            win[i * size + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let mut sum = 0.0;
    let mut count = 0;
    for top in 0..=x.height - size {
        for left in 0..=x.width - size {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let wv = win[i * size + j];
                    mx += wv * x.at(top + i, left + j);
                    my += wv * y.at(top + i, left + j);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let wv = win[i * size + j];
                    let (a, b) = (x.at(top + i, left + j) - mx, y.at(top + i, left + j) - my);
                    vx += wv * a * a;
                    vy += wv * b * b;
                    cxy += wv * a * b;
                }
            }
            sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

/// Scene `scene_offset + i` with rain drawn from `pair_rng(rain_seed, i)`.
pub fn synthetic_pairs(n: usize, scene_offset: u64, rain_seed: u64, size: usize) -> Vec<Pair> {
    let p = RainParams::default();
    (0..n)
        .map(|i| {
            let clean = procedural_scene(size, size, scene_offset + i as u64);
            let s = synthesize_with(&clean, &p, &mut pair_rng(rain_seed, i as u64)).unwrap();
            Pair {
                name: format!("{i:05}.png"),
                rainy: s.rainy,
                clean,
            }
        })
        .collect()
}

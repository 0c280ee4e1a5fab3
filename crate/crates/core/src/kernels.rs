//! Forward and backward kernels over plain tensors.
//!
//! These are the numeric building blocks of the autodiff graph. They hold no
//! state; backward kernels take whatever forward values they need explicitly.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::Shape(format!(
                "input extent {input} with padding {} is smaller than kernel {}",
                self.padding, self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], ci: usize, h: usize, w: usize, g: ConvGeometry, ho: usize, wo: usize, cols: &mut [T]) {
    let k = g.kernel;
    let p = ho * wo;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], ci: usize, h: usize, w: usize, g: ConvGeometry, ho: usize, wo: usize, dx: &mut [T]) {
    let k = g.kernel;
    let p = ho * wo;
    for c in 0..ci {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv(x: Shape, w: Shape, bias: Option<&Tensor<impl Real>>, g: ConvGeometry) -> Result<()> {
    if g.stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    if g.kernel.is_multiple_of(2) {
        return Err(Error::Shape(format!("kernel size {} is not odd", g.kernel)));
    }
    if w.h != g.kernel || w.w != g.kernel {
        return Err(Error::Shape(format!("weight {w} does not match kernel {}", g.kernel)));
    }
    if w.c != x.c {
        return Err(Error::Shape(format!(
            "weight expects {} input channels, input {x} has {}",
            w.c, x.c
        )));
    }
    if let Some(b) = bias {
        if b.len() != w.n {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} output channels",
                b.len(),
                w.n
            )));
        }
    }
    Ok(())
}

/// Real 2-D convolution (cross-correlation) with zero padding.
/// `weight` has shape `[out, in, k, k]`; `bias`, when present, holds one value per output channel.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeometry,
) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), weight.shape());
    check_conv(xs, ws, bias, g)?;
    let (ho, wo) = (g.output_size(xs.h)?, g.output_size(xs.w)?);
    let out_shape = Shape::new(xs.n, ws.n, ho, wo);
    let mut out = Tensor::zeros(out_shape);
    let kk = ws.c * g.kernel * g.kernel;
    let p = ho * wo;
    let mut cols = vec![T::zero(); kk * p];
    let in_len = xs.c * xs.plane();
    let out_len = ws.n * p;
    for n in 0..xs.n {
        im2col(&x.data()[n * in_len..(n + 1) * in_len], xs.c, xs.h, xs.w, g, ho, wo, &mut cols);
        let dst = &mut out.data_mut()[n * out_len..(n + 1) * out_len];
        T::gemm(ws.n, kk, p, T::one(), weight.data(), false, &cols, false, T::zero(), dst);
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                let bv = b.data()[o];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of a real convolution.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: ConvGeometry,
    need_input_grad: bool,
) -> ConvGrads<T> {
    let (xs, ws, os) = (x.shape(), weight.shape(), grad_out.shape());
    let (ho, wo) = (os.h, os.w);
    let kk = ws.c * g.kernel * g.kernel;
    let p = ho * wo;
    let mut cols = vec![T::zero(); kk * p];
    let mut dcols = vec![T::zero(); kk * p];
    let mut dw = Tensor::zeros(ws);
    let mut db = Tensor::zeros(Shape::new(1, ws.n, 1, 1));
    let mut dx = need_input_grad.then(|| Tensor::zeros(xs));
    let in_len = xs.c * xs.plane();
    let out_len = ws.n * p;
    for n in 0..xs.n {
        let go = &grad_out.data()[n * out_len..(n + 1) * out_len];
        im2col(&x.data()[n * in_len..(n + 1) * in_len], xs.c, xs.h, xs.w, g, ho, wo, &mut cols);
        // dW += dY · colsᵀ
        T::gemm(ws.n, p, kk, T::one(), go, false, &cols, true, T::one(), dw.data_mut());
        for (o, chunk) in go.chunks(p).enumerate() {
            db.data_mut()[o] += chunk.iter().copied().sum::<T>();
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · dY
            T::gemm(kk, ws.n, p, T::one(), weight.data(), true, go, false, T::zero(), &mut dcols);
            col2im(&dcols, xs.c, xs.h, xs.w, g, ho, wo, &mut dx.data_mut()[n * in_len..(n + 1) * in_len]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// `(bank, sign)` of block `(out component, in component)` in the real form of `Ŵ ⊗ q̂`:
///
/// ```text
/// [ W0 -W1 -W2 -W3 ]
/// [ W1  W0 -W3  W2 ]
/// [ W2  W3  W0 -W1 ]
/// [ W3 -W2  W1  W0 ]
/// ```
pub const HAMILTON_BLOCKS: [[(usize, i8); 4]; 4] = [
    [(0, 1), (1, -1), (2, -1), (3, -1)],
    [(1, 1), (0, 1), (3, -1), (2, 1)],
    [(2, 1), (3, 1), (0, 1), (1, -1)],
    [(3, 1), (2, -1), (1, 1), (0, 1)],
];

/// Expands four `[out, in, k, k]` kernel banks into the `[4·out, 4·in, k, k]`
/// real weight that realizes the quaternion convolution on planar features.
pub fn quaternion_block_weight<T: Real>(banks: [&Tensor<T>; 4]) -> Result<Tensor<T>> {
    let s = banks[0].shape();
    if banks.iter().any(|b| b.shape() != s) {
        return Err(Error::Shape("quaternion kernel banks differ in shape".into()));
    }
    let (co, ci, taps) = (s.n, s.c, s.plane());
    let mut out = Tensor::zeros(Shape::new(4 * co, 4 * ci, s.h, s.w));
    let data = out.data_mut();
    for (r, row) in HAMILTON_BLOCKS.iter().enumerate() {
        for (c, &(bank, sign)) in row.iter().enumerate() {
            let src = banks[bank].data();
            for o in 0..co {
                for i in 0..ci {
                    let dst = (((r * co + o) * 4 * ci) + c * ci + i) * taps;
                    let from = (o * ci + i) * taps;
                    for t in 0..taps {
                        let v = src[from + t];
                        data[dst + t] = if sign > 0 { v } else { -v };
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`quaternion_block_weight`]: folds a gradient on the real block
/// weight back onto the four banks.
pub fn fold_block_weight_grad<T: Real>(grad: &Tensor<T>) -> [Tensor<T>; 4] {
    let s = grad.shape();
    let (co, ci, taps) = (s.n / 4, s.c / 4, s.plane());
    let bank_shape = Shape::new(co, ci, s.h, s.w);
    let mut banks: [Tensor<T>; 4] = std::array::from_fn(|_| Tensor::zeros(bank_shape));
    for (r, row) in HAMILTON_BLOCKS.iter().enumerate() {
        for (c, &(bank, sign)) in row.iter().enumerate() {
            let dst = banks[bank].data_mut();
            for o in 0..co {
                for i in 0..ci {
                    let from = (((r * co + o) * 4 * ci) + c * ci + i) * taps;
                    let to = (o * ci + i) * taps;
                    for t in 0..taps {
                        let v = grad.data()[from + t];
                        dst[to + t] += if sign > 0 { v } else { -v };
                    }
                }
            }
        }
    }
    banks
}

/// How instance normalization pools channel planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NormGroups {
    /// The four component planes of each quaternion channel share one variance
    /// and one scale; each plane keeps its own mean and shift.
    Quaternion,
    /// Every real channel is normalized on its own.
    Real,
}

impl NormGroups {
    /// `(group count, planes per group)` for a tensor with `channels` real channels.
    pub fn layout(self, channels: usize) -> Result<(usize, usize)> {
        match self {
            NormGroups::Quaternion if !channels.is_multiple_of(4) => Err(Error::Shape(format!(
                "{channels} channels is not a quaternion feature map"
            ))),
            NormGroups::Quaternion => Ok((channels / 4, 4)),
            NormGroups::Real => Ok((channels, 1)),
        }
    }

    /// Real channel index of member `m` of group `g`.
    #[inline]
    pub fn plane(self, groups: usize, g: usize, m: usize) -> usize {
        match self {
            NormGroups::Quaternion => m * groups + g,
            NormGroups::Real => g,
        }
    }
}

/// Saved forward state of an instance normalization.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub normalized: Tensor<T>,
    /// `1/sqrt(σ² + ε)` per `(batch item, group)`.
    pub inv_std: Vec<T>,
}

/// `y = (x − μ)/sqrt(σ² + ε)·γ + β` with per-plane means `μ`, a variance pooled
/// over each group's planes, one `γ` per group and one `β` per plane.
pub fn instance_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    mode: NormGroups,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let s = x.shape();
    let (groups, members) = mode.layout(s.c)?;
    if gamma.len() != groups || beta.len() != s.c {
        return Err(Error::Shape(format!(
            "norm parameters γ[{}], β[{}] do not fit {groups} groups over {} channels",
            gamma.len(),
            beta.len(),
            s.c
        )));
    }
    if s.plane() == 0 {
        return Err(Error::Shape("instance norm over an empty plane".into()));
    }
    let hw = T::from_usize(s.plane()).unwrap();
    let count = T::from_usize(s.plane() * members).unwrap();
    let mut normalized = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    let mut inv_std = Vec::with_capacity(s.n * groups);
    for n in 0..s.n {
        for g in 0..groups {
            let mut means = [T::zero(); 4];
            let mut var = T::zero();
            for (m, mean) in means.iter_mut().enumerate().take(members) {
                let plane = x.plane(n, mode.plane(groups, g, m));
                *mean = plane.iter().copied().sum::<T>() / hw;
                var += plane.iter().map(|&v| (v - *mean) * (v - *mean)).sum::<T>();
            }
            let istd = T::one() / (var / count + eps).sqrt();
            inv_std.push(istd);
            let gm = gamma.data()[g];
            for (m, &mean) in means.iter().enumerate().take(members) {
                let c = mode.plane(groups, g, m);
                let b = beta.data()[c];
                let src = x.plane(n, c);
                let nrm = normalized.plane_mut(n, c);
                for (d, &v) in nrm.iter_mut().zip(src) {
                    *d = (v - mean) * istd;
                }
                let nrm = normalized.plane(n, c).to_vec();
                for (d, v) in out.plane_mut(n, c).iter_mut().zip(nrm) {
                    *d = v * gm + b;
                }
            }
        }
    }
    Ok((out, NormCache { normalized, inv_std }))
}

pub struct NormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn instance_norm_backward<T: Real>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
    mode: NormGroups,
) -> NormGrads<T> {
    let s = grad_out.shape();
    let (groups, members) = mode.layout(s.c).expect("validated in forward");
    let hw = T::from_usize(s.plane()).unwrap();
    let count = T::from_usize(s.plane() * members).unwrap();
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    for n in 0..s.n {
        for g in 0..groups {
            let gm = gamma.data()[g];
            let istd = cache.inv_std[n * groups + g];
            // Σ over the group of dx̂·x̂, and per-plane means of dx̂.
            let mut dot = T::zero();
            let mut dmeans = [T::zero(); 4];
            for (m, dmean) in dmeans.iter_mut().enumerate().take(members) {
                let c = mode.plane(groups, g, m);
                let go = grad_out.plane(n, c);
                let xh = cache.normalized.plane(n, c);
                let mut sum_go = T::zero();
                let mut sum_go_xh = T::zero();
                for (&d, &v) in go.iter().zip(xh) {
                    sum_go += d;
                    sum_go_xh += d * v;
                }
                dbeta.data_mut()[c] += sum_go;
                dgamma.data_mut()[g] += sum_go_xh;
                dot += sum_go_xh * gm;
                *dmean = sum_go * gm / hw;
            }
            let proj = dot / count;
            for (m, &dmean) in dmeans.iter().enumerate().take(members) {
                let c = mode.plane(groups, g, m);
                let go = grad_out.plane(n, c).to_vec();
                let xh = cache.normalized.plane(n, c).to_vec();
                for ((d, gv), xv) in dx.plane_mut(n, c).iter_mut().zip(go).zip(xh) {
                    *d = istd * (gv * gm - dmean - xv * proj);
                }
            }
        }
    }
    NormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { slope * v })
}

pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>, slope: T) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (d, &v) in g.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *d *= slope;
        }
    }
    g
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Backward of the logistic sigmoid given its forward output.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (d, &s) in g.data_mut().iter_mut().zip(y.data()) {
        *d *= s * (T::one() - s);
    }
    g
}

/// Nearest-neighbour 2× spatial enlargement.
pub fn upsample_nearest2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let os = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c).to_vec();
            let dst = out.plane_mut(n, c);
            for y in 0..os.h {
                for xx in 0..os.w {
                    dst[y * os.w + xx] = src[(y / 2) * s.w + xx / 2];
                }
            }
        }
    }
    out
}

pub fn upsample_nearest2x_backward<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    let os = grad_out.shape();
    let s = Shape::new(os.n, os.c, os.h / 2, os.w / 2);
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = grad_out.plane(n, c).to_vec();
            let dst = dx.plane_mut(n, c);
            for y in 0..os.h {
                for xx in 0..os.w {
                    dst[(y / 2) * s.w + xx / 2] += src[y * os.w + xx];
                }
            }
        }
    }
    dx
}

/// Mean of squared differences over every element.
pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mse operands differ: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let n = T::from_usize(a.len().max(1)).unwrap();
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(shape, f)
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeometry) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let ho = g.output_size(xs.h).unwrap();
        let wo = g.output_size(xs.w).unwrap();
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, ho, wo));
        for n in 0..xs.n {
            for o in 0..ws.n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for i in 0..xs.c {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                        acc += w.at(o, i, ky, kx) * x.at(n, i, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        let idx = out.index(n, o, oy, ox);
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_for_strides_and_padding() {
        for &(stride, padding) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let g = ConvGeometry { kernel: 3, stride, padding };
            let x = t(Shape::new(2, 3, 7, 6), |i| ((i * 37 % 17) as f64 - 8.0) / 5.0);
            let w = t(Shape::new(4, 3, 3, 3), |i| ((i * 11 % 13) as f64 - 6.0) / 7.0);
            let got = conv2d_forward(&x, &w, None, g).unwrap();
            let want = naive_conv(&x, &w, g);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {padding}");
            }
        }
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 2));
        let even = ConvGeometry { kernel: 2, stride: 1, padding: 0 };
        assert!(conv2d_forward(&x, &w, None, even).is_err());
        let w3 = Tensor::<f32>::zeros(Shape::new(1, 2, 3, 3));
        let zero_stride = ConvGeometry { kernel: 3, stride: 0, padding: 1 };
        assert!(conv2d_forward(&x, &w3, None, zero_stride).is_err());
        let w_wrong_in = Tensor::<f32>::zeros(Shape::new(1, 3, 3, 3));
        let ok = ConvGeometry { kernel: 3, stride: 1, padding: 1 };
        assert!(conv2d_forward(&x, &w_wrong_in, None, ok).is_err());
    }

    #[test]
    fn block_fold_is_adjoint_of_expand() {
        // <expand(W), G> == <W, fold(G)> for arbitrary W, G.
        let s = Shape::new(2, 3, 3, 3);
        let banks: Vec<Tensor<f64>> = (0..4)
            .map(|b| t(s, |i| ((i * 7 + b * 5) % 11) as f64 - 5.0))
            .collect();
        let big = quaternion_block_weight([&banks[0], &banks[1], &banks[2], &banks[3]]).unwrap();
        let gsig = t(big.shape(), |i| ((i * 13) % 17) as f64 / 3.0 - 2.0);
        let lhs: f64 = big.data().iter().zip(gsig.data()).map(|(a, b)| a * b).sum();
        let folded = fold_block_weight_grad(&gsig);
        let rhs: f64 = banks
            .iter()
            .zip(&folded)
            .map(|(w, g)| w.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn upsample_duplicates_into_blocks() {
        let x = t(Shape::new(1, 1, 2, 2), |i| i as f64);
        let y = upsample_nearest2x(&x);
        assert_eq!(y.plane(0, 0)[..4], [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(y.plane(0, 0)[4..8], [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(y.at(0, 0, 3, 3), 3.0);
        let back = upsample_nearest2x_backward(&Tensor::full(y.shape(), 1.0));
        assert!(back.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn mse_closed_form() {
        let a = Tensor::<f64>::full(Shape::new(1, 4, 3, 3), 0.5);
        let b = Tensor::<f64>::full(Shape::new(1, 4, 3, 3), 0.6);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!(mse(&a, &Tensor::zeros(Shape::new(1, 4, 3, 2))).is_err());
    }
}

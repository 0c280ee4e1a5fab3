//! Quaternion layers: convolution, split activations, instance normalization,
//! resampling and the residual block.
//!
//! Each parameterized layer records [`ParamId`]s into a [`ParamStore`] at
//! construction and reads them back through a [`Graph`] in `forward`. Layers
//! can also be built over the real algebra, producing the structurally matched
//! real-valued twin used as a baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, NormGroups};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{QTensor, Real, Shape, Tensor};

/// Number system of a network's convolutions and normalizations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Algebra {
    #[default]
    Quaternion,
    /// Each `C → C'` quaternion conv becomes a dense `4C → 4C'` real conv.
    Real,
}

impl Algebra {
    pub fn norm_groups(self) -> NormGroups {
        match self {
            Algebra::Quaternion => NormGroups::Quaternion,
            Algebra::Real => NormGroups::Real,
        }
    }
}

/// Parameter initialization policy.
pub enum Init<'a> {
    /// Every weight, bias, scale and shift is zero.
    Zeros,
    /// Kernel banks uniform in `±1/sqrt(4·C_in·k²)`, biases and shifts zero, scales one.
    Uniform(&'a mut dyn rand::RngCore),
}

impl Init<'_> {
    fn kernel<T: Real>(&mut self, shape: Shape, cin: usize, k: usize) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Uniform(rng) => {
                let bound = 1.0 / ((4 * cin * k * k) as f64).sqrt();
                Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
            }
        }
    }

    fn scale<T: Real>(&mut self, shape: Shape) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Uniform(_) => Tensor::full(shape, T::one()),
        }
    }
}

fn column(len: usize) -> Shape {
    Shape::new(1, len, 1, 1)
}

#[derive(Debug, Clone)]
enum ConvWeights {
    Quaternion([ParamId; 4]),
    Real(ParamId),
}

/// 3×3 (or any odd k) convolution between quaternion feature maps.
/// Channel counts are in quaternions for both algebras.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    name: String,
    weights: ConvWeights,
    bias: ParamId,
    in_channels: usize,
    out_channels: usize,
    geom: ConvGeometry,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        algebra: Algebra,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        init: &mut Init,
    ) -> Result<Self> {
        if geom.kernel.is_multiple_of(2) || geom.stride == 0 {
            return Err(Error::Config(format!(
                "{name}: kernel must be odd and stride positive"
            )));
        }
        let k = geom.kernel;
        let weights = match algebra {
            Algebra::Quaternion => {
                let shape = Shape::new(out_channels, in_channels, k, k);
                let mut ids = [ParamId(0); 4];
                for (i, id) in ids.iter_mut().enumerate() {
                    *id = store.register(format!("{name}.W{i}"), init.kernel(shape, in_channels, k))?;
                }
                ConvWeights::Quaternion(ids)
            }
            Algebra::Real => {
                let shape = Shape::new(4 * out_channels, 4 * in_channels, k, k);
                ConvWeights::Real(store.register(format!("{name}.W"), init.kernel(shape, in_channels, k))?)
            }
        };
        let bias = store.register(format!("{name}.b"), Tensor::zeros(column(4 * out_channels)))?;
        Ok(ConvLayer {
            name: name.to_string(),
            weights,
            bias,
            in_channels,
            out_channels,
            geom,
        })
    }

    pub fn forward<'p, T: Real>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, x: Var) -> Result<Var> {
        let b = g.param(store, self.bias);
        match &self.weights {
            ConvWeights::Quaternion(ids) => {
                let banks = ids.map(|id| g.param(store, id));
                g.qconv2d(x, banks, Some(b), self.geom)
            }
            ConvWeights::Real(id) => {
                let w = g.param(store, *id);
                g.conv2d(x, w, Some(b), self.geom)
            }
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }

    pub fn algebra(&self) -> Algebra {
        match self.weights {
            ConvWeights::Quaternion(_) => Algebra::Quaternion,
            ConvWeights::Real(_) => Algebra::Real,
        }
    }

    /// Real kernel scalars of this layer as a quaternion conv: `4·C_out·C_in·k²`.
    pub fn quaternion_weight_count(&self) -> usize {
        4 * self.out_channels * self.in_channels * self.geom.kernel * self.geom.kernel
    }

    /// Kernel scalars of the matching real conv `4·C_in → 4·C_out`: `16·C_out·C_in·k²`.
    pub fn real_weight_count(&self) -> usize {
        4 * self.quaternion_weight_count()
    }

    pub fn bias_count(&self) -> usize {
        4 * self.out_channels
    }
}

/// Instance normalization with a real scale per group and a shift per plane.
#[derive(Debug, Clone)]
pub struct NormLayer {
    gamma: ParamId,
    beta: ParamId,
    eps: f64,
    groups: NormGroups,
    channels: usize,
}

impl NormLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        algebra: Algebra,
        channels: usize,
        eps: f64,
        init: &mut Init,
    ) -> Result<Self> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("{name}: epsilon must be positive")));
        }
        let groups = algebra.norm_groups();
        let gamma_len = match groups {
            NormGroups::Quaternion => channels,
            NormGroups::Real => 4 * channels,
        };
        let gamma = store.register(format!("{name}.gamma"), init.scale(column(gamma_len)))?;
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(column(4 * channels)))?;
        Ok(NormLayer {
            gamma,
            beta,
            eps,
            groups,
            channels,
        })
    }

    pub fn forward<'p, T: Real>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.instance_norm(x, gamma, beta, T::from_f64_lossy(self.eps), self.groups)
    }

    pub fn param_count(&self) -> usize {
        match self.groups {
            NormGroups::Quaternion => 5 * self.channels,
            NormGroups::Real => 8 * self.channels,
        }
    }
}

pub fn same_conv(kernel: usize) -> ConvGeometry {
    ConvGeometry {
        kernel,
        stride: 1,
        padding: kernel / 2,
    }
}

/// `x + f(x)` with `f = conv → norm → LeakyReLU → conv → norm`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: ConvLayer,
    pub norm1: NormLayer,
    pub conv2: ConvLayer,
    pub norm2: NormLayer,
    slope: f64,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        algebra: Algebra,
        channels: usize,
        kernel: usize,
        slope: f64,
        eps: f64,
        init: &mut Init,
    ) -> Result<Self> {
        let geom = same_conv(kernel);
        Ok(ResidualBlock {
            conv1: ConvLayer::new(store, &format!("{name}.conv1"), algebra, channels, channels, geom, init)?,
            norm1: NormLayer::new(store, &format!("{name}.norm1"), algebra, channels, eps, init)?,
            conv2: ConvLayer::new(store, &format!("{name}.conv2"), algebra, channels, channels, geom, init)?,
            norm2: NormLayer::new(store, &format!("{name}.norm2"), algebra, channels, eps, init)?,
            slope,
        })
    }

    pub fn forward<'p, T: Real>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = self.norm1.forward(g, store, h)?;
        let h = g.leaky_relu(h, T::from_f64_lossy(self.slope));
        let h = self.conv2.forward(g, store, h)?;
        let h = self.norm2.forward(g, store, h)?;
        g.add(x, h)
    }

    pub fn convs(&self) -> [&ConvLayer; 2] {
        [&self.conv1, &self.conv2]
    }

    pub fn norms(&self) -> [&NormLayer; 2] {
        [&self.norm1, &self.norm2]
    }
}

/// Halves the spatial size and doubles the channels with a 3×3 stride-2 conv.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub conv: ConvLayer,
}

impl Downsample {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        algebra: Algebra,
        channels: usize,
        kernel: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let geom = ConvGeometry {
            kernel,
            stride: 2,
            padding: kernel / 2,
        };
        Ok(Downsample {
            conv: ConvLayer::new(store, name, algebra, channels, 2 * channels, geom, init)?,
        })
    }

    pub fn forward<'p, T: Real>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(Error::Shape(format!("downsample needs even spatial size, got {s}")));
        }
        self.conv.forward(g, store, x)
    }
}

/// Doubles the spatial size by nearest duplication, then halves the channels with a 3×3 conv.
#[derive(Debug, Clone)]
pub struct Upsample {
    pub conv: ConvLayer,
}

impl Upsample {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        algebra: Algebra,
        channels: usize,
        kernel: usize,
        init: &mut Init,
    ) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{name}: upsample needs an even channel count, got {channels}"
            )));
        }
        Ok(Upsample {
            conv: ConvLayer::new(store, name, algebra, channels, channels / 2, same_conv(kernel), init)?,
        })
    }

    pub fn forward<'p, T: Real>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, x: Var) -> Result<Var> {
        let up = g.upsample_nearest2x(x);
        self.conv.forward(g, store, up)
    }
}

// Eager forms over plain quaternion tensors.

/// Kernel banks `W0..W3` (each `C_out×C_in×k×k`), one bias quaternion per
/// output channel (planar, length `4·C_out`), stride and zero padding.
#[derive(Debug, Clone)]
pub struct QConv2dParams<T> {
    pub banks: [Tensor<T>; 4],
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> QConv2dParams<T> {
    pub fn kernel(&self) -> usize {
        self.banks[0].shape().h
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            kernel: self.kernel(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// `q̂' = Σ Ŵ ⊗ q̂ + bias` over each receptive field, evaluated as a single
/// real convolution with the Hamilton block weight.
pub fn qconv2d<T: Real>(x: &QTensor<T>, p: &QConv2dParams<T>) -> Result<QTensor<T>> {
    let s = p.banks[0].shape();
    if s.h != s.w {
        return Err(Error::Shape("kernel must be square".into()));
    }
    if s.c != x.channels() {
        return Err(Error::Shape(format!(
            "kernel expects {} input quaternion channels, got {}",
            s.c,
            x.channels()
        )));
    }
    if p.bias.len() != 4 * s.n {
        return Err(Error::Shape(format!(
            "bias has {} values for {} output quaternions",
            p.bias.len(),
            s.n
        )));
    }
    let w = kernels::quaternion_block_weight([&p.banks[0], &p.banks[1], &p.banks[2], &p.banks[3]])?;
    let b = Tensor::from_vec(column(4 * s.n), p.bias.clone())?;
    QTensor::from_real(kernels::conv2d_forward(x.real(), &w, Some(&b), p.geometry())?)
}

/// Real scale per channel, quaternion shift per channel (planar, length `4·C`).
#[derive(Debug, Clone)]
pub struct QInstanceNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps: T,
}

pub fn qinstance_norm<T: Real>(x: &QTensor<T>, p: &QInstanceNormParams<T>) -> Result<QTensor<T>> {
    if p.eps <= T::zero() {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let c = x.channels();
    let gamma = Tensor::from_vec(column(c), p.gamma.clone())?;
    let beta = Tensor::from_vec(column(4 * c), p.beta.clone())?;
    let (y, _) = kernels::instance_norm_forward(x.real(), &gamma, &beta, p.eps, NormGroups::Quaternion)?;
    QTensor::from_real(y)
}

/// LeakyReLU applied to every real component independently.
pub fn leaky_relu_split<T: Real>(x: &QTensor<T>, slope: T) -> QTensor<T> {
    QTensor::from_real(kernels::leaky_relu(x.real(), slope)).expect("shape preserved")
}

/// Logistic sigmoid applied to every real component independently.
pub fn sigmoid_split<T: Real>(x: &QTensor<T>) -> QTensor<T> {
    QTensor::from_real(kernels::sigmoid(x.real())).expect("shape preserved")
}

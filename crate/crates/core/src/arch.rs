//! The two-stage QSAM-Net.
//!
//! ```text
//!            ┌────────── stage 1 ──────────┐
//!  I ─ head1 ─ encoder ─ decoder ─ F ─ QSAM ─ X₁ = I + conv2(F)
//!                 │         │           │
//!                 │  CSFF   │           │ attended features A
//!                 ▼         ▼           ▼
//!  I ─ head2 ──────────── (+ A) ─ encoder ─ decoder ─ tail2 ─ X₂ = I + S₂
//!            └────────── stage 2 ──────────┘
//! ```
//!
//! Every stage predicts a signed residual that is added to the rainy input,
//! so a network whose parameters are all zero is exactly the identity.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{same_conv, Algebra, ConvLayer, Downsample, Init, NormLayer, ResidualBlock, Upsample};
use crate::params::ParamStore;
use crate::tensor::{QTensor, Real};

/// Parameter total reported for the original QSAM-Net implementation.
pub const REFERENCE_QSAMNET_PARAMS: u64 = 22_278_819;
/// Parameter total reported for HINet, the real-valued baseline QSAM-Net is compared against.
pub const REFERENCE_HINET_PARAMS: u64 = 88_669_702;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Quaternion channel width at each scale; each entry doubles the previous.
    pub widths: Vec<usize>,
    /// Residual blocks per scale, in both encoder and decoder.
    pub blocks: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
    #[serde(default)]
    pub algebra: Algebra,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            widths: vec![16, 32, 64, 128, 256],
            blocks: 2,
            kernel: 3,
            leaky_slope: 0.2,
            norm_eps: 1e-5,
            algebra: Algebra::Quaternion,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths[0] == 0 {
            return Err(Error::Config("at least one non-zero scale width is required".into()));
        }
        if let Some(w) = self.widths.windows(2).find(|w| w[1] != 2 * w[0]) {
            return Err(Error::Config(format!(
                "scale widths must double, got {} then {}",
                w[0], w[1]
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {} is not odd", self.kernel)));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("normalization epsilon must be positive".into()));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Config("leaky slope must be finite".into()));
        }
        Ok(())
    }

    pub fn scales(&self) -> usize {
        self.widths.len()
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.scales() - 1)
    }

    /// The same topology over the real algebra.
    pub fn real_twin(&self) -> Self {
        NetConfig {
            algebra: Algebra::Real,
            ..self.clone()
        }
    }
}

/// One feature map per scale, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid(pub Vec<Var>);

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scale(&self, s: usize) -> Var {
        self.0[s]
    }
}

#[derive(Debug, Clone)]
struct EncoderScale {
    blocks: Vec<ResidualBlock>,
    down: Option<Downsample>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    scales: Vec<EncoderScale>,
}

/// Stage-1 pyramids injected into a stage-2 encoder.
#[derive(Clone, Copy)]
pub struct CsffInputs<'a> {
    pub csff: &'a Csff,
    pub encoder: &'a FeaturePyramid,
    pub decoder: &'a FeaturePyramid,
}

fn blocks<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &NetConfig,
    width: usize,
    init: &mut Init,
) -> Result<Vec<ResidualBlock>> {
    (0..cfg.blocks)
        .map(|b| {
            ResidualBlock::new(
                store,
                &format!("{prefix}.block{b}"),
                cfg.algebra,
                width,
                cfg.kernel,
                cfg.leaky_slope,
                cfg.norm_eps,
                init,
            )
        })
        .collect()
}

impl Encoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &NetConfig, init: &mut Init) -> Result<Self> {
        let mut scales = Vec::with_capacity(cfg.scales());
        for (s, &w) in cfg.widths.iter().enumerate() {
            let name = format!("{prefix}.{s}");
            let blocks = blocks(store, &name, cfg, w, init)?;
            let down = if s + 1 < cfg.scales() {
                Some(Downsample::new(store, &format!("{name}.down"), cfg.algebra, w, cfg.kernel, init)?)
            } else {
                None
            };
            scales.push(EncoderScale { blocks, down });
        }
        Ok(Encoder { scales })
    }

    /// Runs the residual blocks of each scale, records the features, then
    /// downsamples. Cross-stage features, when given, are added on entry to
    /// each scale.
    pub fn forward<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        x: Var,
        csff: Option<CsffInputs<'_>>,
    ) -> Result<FeaturePyramid> {
        let multiple = 1 << (self.scales.len() - 1);
        let s = g.shape(x);
        if !s.h.is_multiple_of(multiple) || !s.w.is_multiple_of(multiple) {
            return Err(Error::Shape(format!(
                "encoder input {}x{} is not divisible by {multiple}",
                s.h, s.w
            )));
        }
        let mut x = x;
        let mut feats = Vec::with_capacity(self.scales.len());
        for (s, scale) in self.scales.iter().enumerate() {
            if let Some(c) = csff {
                x = c.csff.inject(g, store, s, x, c.encoder, c.decoder)?;
            }
            for b in &scale.blocks {
                x = b.forward(g, store, x)?;
            }
            feats.push(x);
            if let Some(down) = &scale.down {
                x = down.forward(g, store, x)?;
            }
        }
        Ok(FeaturePyramid(feats))
    }

    fn for_each_layer<'a>(&'a self, convs: &mut Vec<&'a ConvLayer>, norms: &mut Vec<&'a NormLayer>) {
        for scale in &self.scales {
            for b in &scale.blocks {
                convs.extend(b.convs());
                norms.extend(b.norms());
            }
            if let Some(d) = &scale.down {
                convs.push(&d.conv);
            }
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderScale {
    blocks: Vec<ResidualBlock>,
    up: Option<Upsample>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    widths: Vec<usize>,
    scales: Vec<DecoderScale>,
}

impl Decoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &NetConfig, init: &mut Init) -> Result<Self> {
        let mut scales = Vec::with_capacity(cfg.scales());
        for (s, &w) in cfg.widths.iter().enumerate() {
            let name = format!("{prefix}.{s}");
            let blocks = blocks(store, &name, cfg, w, init)?;
            let up = if s > 0 {
                Some(Upsample::new(store, &format!("{name}.up"), cfg.algebra, w, cfg.kernel, init)?)
            } else {
                None
            };
            scales.push(DecoderScale { blocks, up });
        }
        Ok(Decoder {
            widths: cfg.widths.clone(),
            scales,
        })
    }

    /// From the deepest scale upward: residual blocks, upsample, add the
    /// same-scale encoder feature. Returns the full-resolution features and
    /// the per-scale decoder features (after each scale's blocks).
    pub fn forward<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        pyramid: &FeaturePyramid,
    ) -> Result<(Var, FeaturePyramid)> {
        if pyramid.len() != self.scales.len() {
            return Err(Error::Shape(format!(
                "decoder expects {} scales, pyramid has {}",
                self.scales.len(),
                pyramid.len()
            )));
        }
        for (s, (&v, &w)) in pyramid.0.iter().zip(&self.widths).enumerate() {
            if g.shape(v).c != 4 * w {
                return Err(Error::Shape(format!(
                    "skip feature at scale {s} has {} real channels, decoder expects {}",
                    g.shape(v).c,
                    4 * w
                )));
            }
        }
        let depth = self.scales.len();
        let mut y = pyramid.scale(depth - 1);
        let mut feats = vec![y; depth];
        for s in (0..depth).rev() {
            let scale = &self.scales[s];
            for b in &scale.blocks {
                y = b.forward(g, store, y)?;
            }
            feats[s] = y;
            if let Some(up) = &scale.up {
                let u = up.forward(g, store, y)?;
                y = g.add(u, pyramid.scale(s - 1))?;
            }
        }
        Ok((y, FeaturePyramid(feats)))
    }

    fn for_each_layer<'a>(&'a self, convs: &mut Vec<&'a ConvLayer>, norms: &mut Vec<&'a NormLayer>) {
        for scale in &self.scales {
            for b in &scale.blocks {
                convs.extend(b.convs());
                norms.extend(b.norms());
            }
            if let Some(u) = &scale.up {
                convs.push(&u.conv);
            }
        }
    }
}

/// Cross-stage feature fusion: width-preserving 3×3 convs carrying stage-1
/// encoder and decoder features into the stage-2 encoder at every scale.
#[derive(Debug, Clone)]
pub struct Csff {
    enc: Vec<ConvLayer>,
    dec: Vec<ConvLayer>,
}

impl Csff {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &NetConfig, init: &mut Init) -> Result<Self> {
        let mut enc = Vec::new();
        let mut dec = Vec::new();
        for (s, &w) in cfg.widths.iter().enumerate() {
            let geom = same_conv(cfg.kernel);
            enc.push(ConvLayer::new(store, &format!("{prefix}.{s}.enc"), cfg.algebra, w, w, geom, init)?);
            dec.push(ConvLayer::new(store, &format!("{prefix}.{s}.dec"), cfg.algebra, w, w, geom, init)?);
        }
        Ok(Csff { enc, dec })
    }

    /// `x + conv_e(enc₁[s]) + conv_d(dec₁[s])`.
    pub fn inject<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        scale: usize,
        x: Var,
        encoder: &FeaturePyramid,
        decoder: &FeaturePyramid,
    ) -> Result<Var> {
        if encoder.len() != self.enc.len() || decoder.len() != self.dec.len() {
            return Err(Error::Shape(format!(
                "cross-stage fusion spans {} scales, got pyramids of depth {} and {}",
                self.enc.len(),
                encoder.len(),
                decoder.len()
            )));
        }
        let e = self.enc[scale].forward(g, store, encoder.scale(scale))?;
        let d = self.dec[scale].forward(g, store, decoder.scale(scale))?;
        let x = g.add(x, e)?;
        g.add(x, d)
    }
}

/// Quaternion self-attention module bridging the two stages.
#[derive(Debug, Clone)]
pub struct Qsam {
    /// Feature enrichment, `C → C`.
    pub conv1: ConvLayer,
    /// Residual image head, `C → 1`. Always starts at zero so that `X₁ = I` initially.
    pub conv2: ConvLayer,
    /// Guidance from the restored image, `1 → C`.
    pub conv3: ConvLayer,
}

impl Qsam {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &NetConfig, init: &mut Init) -> Result<Self> {
        let c = cfg.widths[0];
        let geom = same_conv(cfg.kernel);
        Ok(Qsam {
            conv1: ConvLayer::new(store, &format!("{prefix}.conv1"), cfg.algebra, c, c, geom, init)?,
            conv2: ConvLayer::new(store, &format!("{prefix}.conv2"), cfg.algebra, c, 1, geom, &mut Init::Zeros)?,
            conv3: ConvLayer::new(store, &format!("{prefix}.conv3"), cfg.algebra, 1, c, geom, init)?,
        })
    }

    /// Returns `(E ⊙ σ(conv3(X₁)) + F, X₁)` where `E = conv1(F)` and `X₁ = I + conv2(F)`.
    pub fn forward<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        features: Var,
        image: Var,
    ) -> Result<(Var, Var)> {
        let (fs, is) = (g.shape(features), g.shape(image));
        if fs.h != is.h || fs.w != is.w || fs.n != is.n {
            return Err(Error::Shape(format!(
                "attention features {fs} and image {is} are not aligned"
            )));
        }
        let enriched = self.conv1.forward(g, store, features)?;
        let residual = self.conv2.forward(g, store, features)?;
        let restored = g.add(image, residual)?;
        let guide = self.conv3.forward(g, store, restored)?;
        let mask = g.sigmoid(guide);
        let gated = g.mul(enriched, mask)?;
        let attended = g.add(gated, features)?;
        Ok((attended, restored))
    }
}

/// Restored images of both stages.
#[derive(Debug, Clone, Copy)]
pub struct StageOutputs {
    pub stage1: Var,
    pub stage2: Var,
}

#[derive(Debug, Clone)]
pub struct QsamNet {
    config: NetConfig,
    pub head1: ConvLayer,
    pub encoder1: Encoder,
    pub decoder1: Decoder,
    pub qsam: Qsam,
    pub head2: ConvLayer,
    pub csff: Csff,
    pub encoder2: Encoder,
    pub decoder2: Decoder,
    pub tail2: ConvLayer,
}

impl QsamNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &NetConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let c = config.widths[0];
        let geom = same_conv(config.kernel);
        let a = config.algebra;
        Ok(QsamNet {
            head1: ConvLayer::new(store, "stage1.head", a, 1, c, geom, init)?,
            encoder1: Encoder::new(store, "stage1.enc", config, init)?,
            decoder1: Decoder::new(store, "stage1.dec", config, init)?,
            qsam: Qsam::new(store, "qsam", config, init)?,
            head2: ConvLayer::new(store, "stage2.head", a, 1, c, geom, init)?,
            csff: Csff::new(store, "csff", config, init)?,
            encoder2: Encoder::new(store, "stage2.enc", config, init)?,
            decoder2: Decoder::new(store, "stage2.dec", config, init)?,
            tail2: ConvLayer::new(store, "stage2.tail", a, c, 1, geom, &mut Init::Zeros)?,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// `image` is a `B×4×H×W` real tensor holding one quaternion channel.
    pub fn forward<'p, T: Real>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, image: Var) -> Result<StageOutputs> {
        let s = g.shape(image);
        let m = self.config.size_multiple();
        if s.c != 4 {
            return Err(Error::Shape(format!(
                "network input must hold one quaternion channel, got {} real channels",
                s.c
            )));
        }
        if !s.h.is_multiple_of(m) || !s.w.is_multiple_of(m) || s.h == 0 || s.w == 0 {
            return Err(Error::Shape(format!(
                "input {}x{} is not a positive multiple of {m}",
                s.h, s.w
            )));
        }

        let f = self.head1.forward(g, store, image)?;
        let enc1 = self.encoder1.forward(g, store, f, None)?;
        let (features1, dec1) = self.decoder1.forward(g, store, &enc1)?;
        let (attended, stage1) = self.qsam.forward(g, store, features1, image)?;

        let h2 = self.head2.forward(g, store, image)?;
        let x2 = g.add(h2, attended)?;
        let cross = CsffInputs {
            csff: &self.csff,
            encoder: &enc1,
            decoder: &dec1,
        };
        let enc2 = self.encoder2.forward(g, store, x2, Some(cross))?;
        let (features2, _) = self.decoder2.forward(g, store, &enc2)?;
        let residual = self.tail2.forward(g, store, features2)?;
        let stage2 = g.add(image, residual)?;
        Ok(StageOutputs { stage1, stage2 })
    }

    /// Inference without gradient bookkeeping: returns `(X₁, X₂)`.
    pub fn restore<T: Real>(&self, store: &ParamStore<T>, image: &QTensor<T>) -> Result<(QTensor<T>, QTensor<T>)> {
        let mut g = Graph::new();
        let x = g.constant(image.real().clone());
        let out = self.forward(&mut g, store, x)?;
        Ok((
            QTensor::from_real(g.value(out.stage1).clone())?,
            QTensor::from_real(g.value(out.stage2).clone())?,
        ))
    }

    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        let mut convs = vec![&self.head1];
        let mut norms = Vec::new();
        self.encoder1.for_each_layer(&mut convs, &mut norms);
        self.decoder1.for_each_layer(&mut convs, &mut norms);
        convs.extend([&self.qsam.conv1, &self.qsam.conv2, &self.qsam.conv3, &self.head2]);
        convs.extend(self.csff.enc.iter().chain(&self.csff.dec));
        self.encoder2.for_each_layer(&mut convs, &mut norms);
        self.decoder2.for_each_layer(&mut convs, &mut norms);
        convs.push(&self.tail2);
        convs
    }

    pub fn norm_layers(&self) -> Vec<&NormLayer> {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        self.encoder1.for_each_layer(&mut convs, &mut norms);
        self.decoder1.for_each_layer(&mut convs, &mut norms);
        self.encoder2.for_each_layer(&mut convs, &mut norms);
        self.decoder2.for_each_layer(&mut convs, &mut norms);
        norms
    }

    pub fn count_params(&self) -> ParamReport {
        ParamReport::new(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvCount {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub quaternion_weights: usize,
    pub real_weights: usize,
}

impl ConvCount {
    pub fn ratio(&self) -> f64 {
        self.real_weights as f64 / self.quaternion_weights as f64
    }
}

/// Parameter accounting for a network and its real-valued twin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamReport {
    /// Scalars in the quaternion network.
    pub total: usize,
    /// Scalars in the structurally matched real network.
    pub real_twin_total: usize,
    pub convs: Vec<ConvCount>,
}

impl ParamReport {
    /// Counts every kernel bank, bias, scale and shift of a quaternion network.
    pub fn new(net: &QsamNet) -> Self {
        let mut total = 0;
        let mut twin = 0;
        let mut convs = Vec::new();
        for c in net.conv_layers() {
            total += c.quaternion_weight_count() + c.bias_count();
            twin += c.real_weight_count() + c.bias_count();
            convs.push(ConvCount {
                name: c.name().to_string(),
                in_channels: c.in_channels(),
                out_channels: c.out_channels(),
                quaternion_weights: c.quaternion_weight_count(),
                real_weights: c.real_weight_count(),
            });
        }
        for n in net.norm_layers() {
            // γ per quaternion channel + β per component vs γ, β per real channel.
            let c = n.param_count() / 5;
            total += 5 * c;
            twin += 8 * c;
        }
        ParamReport {
            total,
            real_twin_total: twin,
            convs,
        }
    }

    pub fn overall_ratio(&self) -> f64 {
        self.real_twin_total as f64 / self.total as f64
    }

    /// Sum of conv kernel scalars only.
    pub fn conv_weights(&self) -> (usize, usize) {
        self.convs
            .iter()
            .fold((0, 0), |(q, r), c| (q + c.quaternion_weights, r + c.real_weights))
    }
}

/// Builds a zero-initialized network only to count its parameters.
pub fn count_params(config: &NetConfig) -> Result<ParamReport> {
    let mut store = ParamStore::<f32>::new();
    let net = QsamNet::new(&mut store, &NetConfig { algebra: Algebra::Quaternion, ..config.clone() }, &mut Init::Zeros)?;
    let report = net.count_params();
    debug_assert_eq!(report.total, store.num_elements());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetConfig {
        NetConfig {
            widths: vec![2, 4, 8],
            blocks: 1,
            ..NetConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::default().validate().is_ok());
        assert_eq!(NetConfig::default().size_multiple(), 16);
        let bad = NetConfig {
            widths: vec![16, 24],
            ..NetConfig::default()
        };
        assert!(bad.validate().is_err());
        let even = NetConfig {
            kernel: 4,
            ..NetConfig::default()
        };
        assert!(even.validate().is_err());
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = NetConfig {
            widths: vec![2, 4, 8, 16, 32],
            blocks: 1,
            ..NetConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(&mut store, "e", &cfg, &mut Init::Zeros).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(Shape::new(2, 8, 32, 32)));
        let pyr = enc.forward(&mut g, &store, x, None).unwrap();
        let dims: Vec<_> = pyr.0.iter().map(|&v| g.shape(v)).collect();
        assert_eq!(
            dims,
            vec![
                Shape::new(2, 8, 32, 32),
                Shape::new(2, 16, 16, 16),
                Shape::new(2, 32, 8, 8),
                Shape::new(2, 64, 4, 4),
                Shape::new(2, 128, 2, 2)
            ]
        );
        let bad = g.constant(Tensor::zeros(Shape::new(1, 8, 24, 24)));
        assert!(enc.forward(&mut g, &store, bad, None).is_err());
    }

    #[test]
    fn zero_network_is_identity() {
        let cfg = small();
        let mut store = ParamStore::<f32>::new();
        let net = QsamNet::new(&mut store, &cfg, &mut Init::Zeros).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = QTensor::from_real(Tensor::from_fn(Shape::new(2, 4, 8, 12), |_| rng.gen::<f32>())).unwrap();
        let (x1, x2) = net.restore(&store, &img).unwrap();
        assert_eq!(x1, img);
        assert_eq!(x2, img);
    }

    #[test]
    fn input_size_must_divide() {
        let cfg = small();
        let mut store = ParamStore::<f32>::new();
        let net = QsamNet::new(&mut store, &cfg, &mut Init::Zeros).unwrap();
        let img = QTensor::zeros(1, 1, 6, 8);
        assert!(net.restore(&store, &img).is_err());
    }

    #[test]
    fn report_matches_store_and_twin() {
        let cfg = small();
        let mut store = ParamStore::<f32>::new();
        let net = QsamNet::new(&mut store, &cfg, &mut Init::Zeros).unwrap();
        let report = net.count_params();
        assert_eq!(report.total, store.num_elements());

        let mut twin_store = ParamStore::<f32>::new();
        QsamNet::new(&mut twin_store, &cfg.real_twin(), &mut Init::Zeros).unwrap();
        assert_eq!(report.real_twin_total, twin_store.num_elements());
        for c in &report.convs {
            assert_eq!(c.real_weights, 4 * c.quaternion_weights);
        }
        assert!(report.overall_ratio() < 4.0);
    }

    #[test]
    fn zero_layer_store_counts_zero() {
        assert_eq!(ParamStore::<f32>::new().num_elements(), 0);
    }
}

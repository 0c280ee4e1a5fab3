//! Finite-difference verification of analytic gradients.
//!
//! Everything that is differentiated is placed in a [`ParamStore<f64>`]; the
//! function under test builds a scalar loss from it. Plain inputs are checked
//! by registering them as parameters of a scratch store.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{NetConfig, Qsam, QsamNet};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::kernels::ConvGeometry;
use crate::layers::{same_conv, Algebra, ConvLayer, Downsample, Init, NormLayer, ResidualBlock, Upsample};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Upper bound on sampled coordinates per parameter.
    pub coords_per_param: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            coords_per_param: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over sampled coordinates of `|a − n| / max(|a|, |n|, δ/tol, 1e-8)`,
    /// where `δ = 64·ε·|f| / h` is the resolution of the difference quotient.
    /// The estimate assumes `f` is not a heavily cancelling sum.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Coordinates skipped because a perturbation crossed a LeakyReLU kink.
    pub kinks_skipped: usize,
    /// Name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Set when any analytic or numeric derivative was NaN or infinite.
    pub non_finite: bool,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.non_finite && self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, 0.0)
}

/// Like [`relative_error`] with the denominator also bounded below by `floor`.
pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Round-off in a loss value `f`, in units of `ε·|f|`. Differences below the
/// resulting resolution of the difference quotient always pass.
const ROUNDOFF_ULPS: f64 = 64.0;

/// Compares the analytic gradient of `loss_fn` with respect to every parameter
/// in `store` against central differences on randomly sampled coordinates.
/// The store is perturbed in place and restored before returning.
///
/// A coordinate whose `±step` perturbation moves any LeakyReLU input across
/// zero is not differentiable at that resolution; it is skipped and another
/// coordinate of the same parameter is drawn instead.
pub fn grad_check<F, R>(store: &mut ParamStore<f64>, loss_fn: F, cfg: GradCheckConfig, rng: &mut R) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Graph<'p, f64>, &'p ParamStore<f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let (analytic, base_pattern) = {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, store)?;
        let grads = g.backward(loss)?;
        let mut out: Vec<Option<Tensor<f64>>> = vec![None; store.len()];
        for (id, t) in grads.param_grads() {
            match out[id.index()].as_mut() {
                Some(acc) => acc.add_assign(t),
                None => out[id.index()] = Some(t.clone()),
            }
        }
        (out, g.kink_pattern())
    };

    let eval = |store: &ParamStore<f64>| -> Result<(f64, bool)> {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, store)?;
        Ok((g.scalar(loss)?, g.kink_pattern() == base_pattern))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        kinks_skipped: 0,
        worst: None,
        non_finite: false,
        tolerance: cfg.tolerance,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let len = store.value(id).len();
        let want = cfg.coords_per_param.min(len);
        let mut order = sample(rng, len, len).into_iter();
        let mut done = 0;
        while done < want {
            let Some(idx) = order.next() else { break };
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[idx]);
            let orig = store.value(id).data()[idx];
            store.value_mut(id).data_mut()[idx] = orig + cfg.step;
            let (plus, smooth_plus) = eval(store)?;
            store.value_mut(id).data_mut()[idx] = orig - cfg.step;
            let (minus, smooth_minus) = eval(store)?;
            store.value_mut(id).data_mut()[idx] = orig;
            if !(smooth_plus && smooth_minus) {
                report.kinks_skipped += 1;
                continue;
            }
            done += 1;
            let n = (plus - minus) / (2.0 * cfg.step);
            report.coords_checked += 1;
            if !a.is_finite() || !n.is_finite() {
                report.non_finite = true;
                report.worst = Some((store.get(id).name.clone(), idx));
                continue;
            }
            let noise = ROUNDOFF_ULPS * f64::EPSILON * plus.abs().max(minus.abs()) / cfg.step;
            let e = relative_error_floored(a, n, noise / cfg.tolerance);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = Some((store.get(id).name.clone(), idx));
            }
        }
    }
    Ok(report)
}

/// Random tensor with entries uniform in `±scale`, resampling any entry whose
/// magnitude is below `margin` so probes stay away from activation kinks.
pub fn probe_tensor<R: Rng + ?Sized>(rng: &mut R, shape: Shape, scale: f64, margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.gen_range(-scale..scale);
        if v.abs() >= margin {
            break v;
        }
    })
}

/// Reduces `y` to `Σ y ⊙ r` for a fixed random `r`, so every output element
/// contributes with a distinct weight.
pub fn weighted_sum<R: Rng + ?Sized>(g: &mut Graph<'_, f64>, y: Var, rng: &mut R) -> Result<Var> {
    let r = probe_tensor(rng, g.shape(y), 1.0, 0.0);
    let r = g.constant(r);
    let prod = g.mul(y, r)?;
    Ok(g.sum(prod))
}

type LossFn = Box<dyn for<'p> Fn(&mut Graph<'p, f64>, &'p ParamStore<f64>) -> Result<Var>>;

/// One row of [`layer_suite`]: the worst result over all probe points.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub probes: usize,
    pub report: GradCheckReport,
}

fn merge(acc: &mut GradCheckReport, r: GradCheckReport) {
    acc.coords_checked += r.coords_checked;
    acc.kinks_skipped += r.kinks_skipped;
    acc.non_finite |= r.non_finite;
    if r.max_rel_error > acc.max_rel_error || (r.non_finite && acc.worst.is_none()) {
        acc.max_rel_error = acc.max_rel_error.max(r.max_rel_error);
        acc.worst = r.worst;
    }
}

#[derive(Debug, Clone, Copy)]
enum Probe {
    /// Every value redrawn uniformly from `±1`, away from zero.
    Redraw,
    /// Every value shifted by a uniform draw from `±amount`.
    Jitter(f64),
}

/// Checks `build` at `probes` independent random points. `build` registers
/// the layer and its inputs in the store and returns the loss; the store is
/// then moved to a random point according to `mode`.
fn check_case(
    name: &'static str,
    cfg: GradCheckConfig,
    seed: u64,
    probes: usize,
    mode: Probe,
    build: impl Fn(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Result<LossFn>,
) -> Result<SuiteEntry> {
    let mut total = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        kinks_skipped: 0,
        worst: None,
        non_finite: false,
        tolerance: cfg.tolerance,
    };
    for p in 0..probes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64 + 1);
        let mut store = ParamStore::new();
        let loss = build(&mut store, &mut rng)?;
        let margin = (10.0 * cfg.step).max(1e-3);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape();
            let v = match mode {
                Probe::Redraw => probe_tensor(&mut rng, shape, 1.0, margin),
                Probe::Jitter(amount) => {
                    let mut v = probe_tensor(&mut rng, shape, amount, 0.0);
                    v.add_assign(store.value(id));
                    v
                }
            };
            store.set_value(id, v)?;
        }
        merge(&mut total, grad_check(&mut store, &*loss, cfg, &mut rng)?);
    }
    Ok(SuiteEntry {
        name,
        probes,
        report: total,
    })
}

fn input(store: &mut ParamStore<f64>, name: &str, shape: Shape) -> Result<crate::params::ParamId> {
    store.register(name, Tensor::zeros(shape))
}

fn readout(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    probe_tensor(rng, shape, 1.0, 0.0)
}

/// `Σ y ⊙ r` for a fixed readout `r`.
fn read(g: &mut Graph<'_, f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = g.constant(r.clone());
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Finite-difference checks of every differentiable layer operation and of a
/// two-scale, width-4 miniature of the whole network.
pub fn layer_suite(cfg: GradCheckConfig, seed: u64, probes: usize) -> Result<Vec<SuiteEntry>> {
    let zeros = || Init::Zeros;
    let mut out = Vec::new();

    out.push(check_case("qconv2d", cfg, seed, probes, Probe::Redraw, |s, rng| {
        let x = input(s, "x", Shape::new(2, 8, 5, 5))?;
        let conv = ConvLayer::new(s, "conv", Algebra::Quaternion, 2, 3, same_conv(3), &mut zeros())?;
        let r = readout(rng, Shape::new(2, 12, 5, 5));
        Ok(Box::new(move |g, st| {
            let xv = g.param(st, x);
            let y = conv.forward(g, st, xv)?;
            read(g, y, &r)
        }))
    })?);

    out.push(check_case("qconv2d stride 2", cfg, seed, probes, Probe::Redraw, |s, rng| {
        let x = input(s, "x", Shape::new(1, 8, 6, 6))?;
        let down = Downsample::new(s, "down", Algebra::Quaternion, 2, 3, &mut zeros())?;
        let r = readout(rng, Shape::new(1, 16, 3, 3));
        Ok(Box::new(move |g, st| {
            let xv = g.param(st, x);
            let y = down.forward(g, st, xv)?;
            read(g, y, &r)
        }))
    })?);

    out.push(check_case("real conv (twin)", cfg, seed, probes, Probe::Redraw, |s, rng| {
        let x = input(s, "x", Shape::new(1, 8, 5, 5))?;
        let geom = ConvGeometry {
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let conv = ConvLayer::new(s, "conv", Algebra::Real, 2, 2, geom, &mut zeros())?;
        let r = readout(rng, Shape::new(1, 8, 5, 5));
        Ok(Box::new(move |g, st| {
            let xv = g.param(st, x);
            let y = conv.forward(g, st, xv)?;
            read(g, y, &r)
        }))
    })?);

    for (name, algebra) in [("quaternion instance norm", Algebra::Quaternion), ("real instance norm (twin)", Algebra::Real)] {
        out.push(check_case(name, cfg, seed, probes, Probe::Redraw, move |s, rng| {
            let x = input(s, "x", Shape::new(2, 8, 4, 4))?;
            let norm = NormLayer::new(s, "norm", algebra, 2, 1e-5, &mut zeros())?;
            let r = readout(rng, Shape::new(2, 8, 4, 4));
            Ok(Box::new(move |g, st| {
                let xv = g.param(st, x);
                let y = norm.forward(g, st, xv)?;
                read(g, y, &r)
            }))
        })?);
    }

    out.push(check_case("split leaky relu", cfg, seed, probes, Probe::Redraw, |s, rng| {
        let x = input(s, "x", Shape::new(2, 8, 4, 4))?;
        let r = readout(rng, Shape::new(2, 8, 4, 4));
        Ok(Box::new(move |g, st| {
            let xv = g.param(st, x);
            let y = g.leaky_relu(xv, 0.2);
            read(g, y, &r)
        }))
    })?);

    out.push(check_case("split sigmoid", cfg, seed, probes, Probe::Redraw, |s, rng| {
        let x = input(s, "x", Shape::new(2, 8, 4, 4))?;
        let r = readout(rng, Shape::new(2, 8, 4, 4));
        Ok(Box::new(move |g, st| {
            let xv = g.param(st, x);
            let y = g.sigmoid(xv);
            read(g, y, &r)
        }))
    })?);

    out.push(check_case("component-wise product", cfg, seed, probes, Probe::Redraw, |s, rng| {
        let a = input(s, "a", Shape::new(1, 8, 3, 3))?;
        let b = input(s, "b", Shape::new(1, 8, 3, 3))?;
        let r = readout(rng, Shape::new(1, 8, 3, 3));
        Ok(Box::new(move |g, st| {
            let (av, bv) = (g.param(st, a), g.param(st, b));
            let y = g.mul(av, bv)?;
            read(g, y, &r)
        }))
    })?);

    out.push(check_case("upsample", cfg, seed, probes, Probe::Redraw, |s, rng| {
        let x = input(s, "x", Shape::new(1, 16, 3, 3))?;
        let up = Upsample::new(s, "up", Algebra::Quaternion, 4, 3, &mut zeros())?;
        let r = readout(rng, Shape::new(1, 8, 6, 6));
        Ok(Box::new(move |g, st| {
            let xv = g.param(st, x);
            let y = up.forward(g, st, xv)?;
            read(g, y, &r)
        }))
    })?);

    out.push(check_case("residual block", cfg, seed, probes, Probe::Redraw, |s, rng| {
        let x = input(s, "x", Shape::new(1, 8, 6, 6))?;
        let block = ResidualBlock::new(s, "block", Algebra::Quaternion, 2, 3, 0.2, 1e-5, &mut zeros())?;
        let r = readout(rng, Shape::new(1, 8, 6, 6));
        Ok(Box::new(move |g, st| {
            let xv = g.param(st, x);
            let y = block.forward(g, st, xv)?;
            read(g, y, &r)
        }))
    })?);

    out.push(check_case("attention module", cfg, seed, probes, Probe::Redraw, |s, rng| {
        let f = input(s, "features", Shape::new(1, 8, 5, 5))?;
        let i = input(s, "image", Shape::new(1, 4, 5, 5))?;
        let net = NetConfig {
            widths: vec![2],
            ..Default::default()
        };
        let qsam = Qsam::new(s, "qsam", &net, &mut zeros())?;
        let (ra, rx) = (readout(rng, Shape::new(1, 8, 5, 5)), readout(rng, Shape::new(1, 4, 5, 5)));
        Ok(Box::new(move |g, st| {
            let (fv, iv) = (g.param(st, f), g.param(st, i));
            let (a, x1) = qsam.forward(g, st, fv, iv)?;
            let la = read(g, a, &ra)?;
            let lx = read(g, x1, &rx)?;
            g.add(la, lx)
        }))
    })?);

    out.push(check_case("mse loss", cfg, seed, probes, Probe::Redraw, |s, rng| {
        let x = input(s, "x", Shape::new(2, 4, 4, 4))?;
        let t = readout(rng, Shape::new(2, 4, 4, 4));
        Ok(Box::new(move |g, st| {
            let xv = g.param(st, x);
            let tv = g.constant(t.clone());
            g.mse(xv, tv)
        }))
    })?);

    // Starts from a trained-scale initialization; the jitter also moves the
    // zero-initialized heads off zero so stage 2 receives gradient.
    out.push(check_case("network (2 scales, width 4)", cfg, seed, probes, Probe::Jitter(0.1), |s, rng| {
        let net = NetConfig {
            widths: vec![4, 8],
            blocks: 1,
            ..Default::default()
        };
        let x = s.register("image", probe_tensor(rng, Shape::new(1, 4, 4, 4), 1.0, 0.0))?;
        let model = QsamNet::new(s, &net, &mut Init::Uniform(rng))?;
        let target = readout(rng, Shape::new(1, 4, 4, 4));
        Ok(Box::new(move |g, st| {
            let xv = g.param(st, x);
            let j = g.constant(target.clone());
            let out = model.forward(g, st, xv)?;
            let l1 = g.mse(out.stage1, j)?;
            let l2 = g.mse(out.stage2, j)?;
            g.add(l1, l2)
        }))
    })?);

    Ok(out)
}

//! Loss, optimizer, learning-rate schedule and the training loop.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{NetConfig, QsamNet};
use crate::autodiff::Graph;
use crate::checkpoint::{save_checkpoint, Checkpoint, RngState};
use crate::data::{sample_patch, PairedDataset};
use crate::error::{Error, Result};
use crate::image::encode_batch;
use crate::layers::Init;
use crate::params::ParamStore;
use crate::tensor::{QTensor, Real, Tensor};

/// Mean of squared differences over every pixel, channel, component and batch item.
pub fn mse_loss<T: Real>(out: &QTensor<T>, target: &QTensor<T>) -> Result<T> {
    crate::kernels::mse(out.real(), target.real())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub patch: usize,
    pub batch: usize,
    pub iterations: u64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch: 256,
            batch: 2,
            iterations: 1000,
            lr_start: 2e-4,
            lr_end: 1e-7,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &NetConfig) -> Result<()> {
        if self.patch == 0 || !self.patch.is_multiple_of(16) {
            return Err(Error::Config(format!("patch size {} is not a positive multiple of 16", self.patch)));
        }
        if !self.patch.is_multiple_of(net.size_multiple()) {
            return Err(Error::Config(format!(
                "patch size {} is not a multiple of {}",
                self.patch,
                net.size_multiple()
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr_end < self.lr_start && self.lr_end >= 0.0) {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 <= end < start, got {} and {}",
                self.lr_end, self.lr_start
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        cosine_lr(t, self.iterations, self.lr_start, self.lr_end)
    }
}

/// Single-cycle cosine annealing from `start` at `t = 0` to `end` at `t = total`.
pub fn cosine_lr(t: u64, total: u64, start: f64, end: f64) -> f64 {
    if t >= total {
        return end;
    }
    end + (start - end) * (1.0 + (PI * t as f64 / total as f64).cos()) / 2.0
}

/// Adam with bias correction. Moments are stored in parameter order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients accumulated in `store`. Parameters without a
    /// gradient see a zero gradient. Nothing is modified if any gradient is non-finite.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors but the model has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (_, p) in store.iter() {
            if p.grad().is_some_and(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of {}", p.name),
                    iteration: self.step + 1,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = |v: f64| T::from_f64_lossy(v);
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let (nb1, nb2) = (c(1.0 - self.beta1), c(1.0 - self.beta2));
        let corr1 = c(1.0 - self.beta1.powi(t));
        let corr2 = c(1.0 - self.beta2.powi(t));
        let (lr, eps) = (c(lr), c(self.eps));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (value, grad) = p.value_and_grad();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in value.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(T::zero(), |g| g.data()[i]);
                m[i] = b1 * m[i] + nb1 * g;
                v[i] = b2 * v[i] + nb2 * g * g;
                let mh = m[i] / corr1;
                let vh = v[i] / corr2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    /// 1-based count of completed updates.
    pub iteration: u64,
    pub lr: f64,
    pub stage1: f64,
    pub stage2: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "iteration,lr,loss_stage1,loss_stage2,loss_total";

pub fn loss_csv_row(r: &LossRecord) -> String {
    format!("{},{:e},{:e},{:e},{:e}", r.iteration, r.lr, r.stage1, r.stage2, r.total)
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{}", loss_csv_row(r));
    }
    s
}

/// Trailing moving average; entry `i` averages records `i+1-window ..= i` (fewer at the start).
pub fn smoothed(records: &[LossRecord], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(records.len());
    let mut acc = 0.0;
    for (i, r) in records.iter().enumerate() {
        acc += r.total;
        if i >= window {
            acc -= records[i - window].total;
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Network, parameters and optimizer state evolving under a fixed configuration.
pub struct Trainer {
    net: QsamNet,
    store: ParamStore<f32>,
    adam: Adam<f32>,
    train: TrainConfig,
    rng_seed: [u8; 32],
    iteration: u64,
}

impl Trainer {
    /// Fresh parameters drawn from the training seed.
    pub fn new(net_config: &NetConfig, train: &TrainConfig) -> Result<Self> {
        train.validate(net_config)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(train.seed);
        let rng_seed = init_rng.get_seed();
        let mut store = ParamStore::new();
        let net = QsamNet::new(&mut store, net_config, &mut Init::Uniform(&mut init_rng))?;
        Ok(Self::assemble(net, store, train.clone(), rng_seed, 0))
    }

    /// Starts from given parameters, e.g. an all-zero network.
    pub fn with_params(net: QsamNet, store: ParamStore<f32>, train: &TrainConfig) -> Result<Self> {
        train.validate(net.config())?;
        let rng_seed = ChaCha8Rng::seed_from_u64(train.seed).get_seed();
        Ok(Self::assemble(net, store, train.clone(), rng_seed, 0))
    }

    fn assemble(net: QsamNet, store: ParamStore<f32>, train: TrainConfig, rng_seed: [u8; 32], iteration: u64) -> Self {
        let adam = Adam::new(&store);
        Trainer {
            net,
            store,
            adam,
            train,
            rng_seed,
            iteration,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = QsamNet::new(&mut store, &ckpt.net, &mut Init::Zeros)?;
        ckpt.fill_params(&mut store)?;
        let mut t = Self::assemble(net, store, ckpt.train.clone(), ckpt.rng.seed, ckpt.iteration);
        t.adam = ckpt.optimizer_for(&t.store)?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            self.net.config(),
            &self.train,
            &self.store,
            &self.adam,
            self.iteration,
            self.rng_state(),
        )
    }

    /// Generator state used by the next iteration.
    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.rng_seed,
            stream: self.iteration + 1,
            word_pos: 0,
        }
    }

    pub fn net(&self) -> &QsamNet {
        &self.net
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn config(&self) -> &TrainConfig {
        &self.train
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn set_checkpoint_every(&mut self, every: u64) {
        self.train.checkpoint_every = every;
    }

    pub fn optimizer(&self) -> &Adam<f32> {
        &self.adam
    }

    /// Draws the batch for the next iteration; a pure function of seed and iteration.
    pub fn next_batch(&self, data: &PairedDataset) -> Result<(QTensor<f32>, QTensor<f32>)> {
        if data.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let mut rng = self.rng_state().generator();
        let mut rainy = Vec::with_capacity(self.train.batch);
        let mut clean = Vec::with_capacity(self.train.batch);
        for _ in 0..self.train.batch {
            let pair = data.get(rng.gen_range(0..data.len()));
            let (r, c, _) = sample_patch(pair, self.train.patch, &mut rng)?;
            rainy.push(r);
            clean.push(c);
        }
        Ok((encode_batch(&rainy)?, encode_batch(&clean)?))
    }

    /// Runs one optimization step.
    pub fn step(&mut self, data: &PairedDataset) -> Result<LossRecord> {
        let (rainy, clean) = self.next_batch(data)?;
        let lr = self.train.lr_at(self.iteration);
        let (stage1, stage2, grads) = {
            let mut g = Graph::new();
            let x = g.constant(rainy.into_real());
            let j = g.constant(clean.into_real());
            let out = self.net.forward(&mut g, &self.store, x)?;
            let l1 = g.mse(out.stage1, j)?;
            let l2 = g.mse(out.stage2, j)?;
            let total = g.add(l1, l2)?;
            let (s1, s2) = (g.scalar(l1)?.as_f64(), g.scalar(l2)?.as_f64());
            if !(s1 + s2).is_finite() {
                return Err(Error::NonFinite {
                    what: "loss".into(),
                    iteration: self.iteration + 1,
                });
            }
            (s1, s2, g.backward(total)?)
        };
        self.store.zero_grads();
        self.store.accumulate(&grads);
        self.adam.update(&mut self.store, lr).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite {
                what,
                iteration: self.iteration + 1,
            },
            e => e,
        })?;
        self.store.zero_grads();
        self.iteration += 1;
        Ok(LossRecord {
            iteration: self.iteration,
            lr,
            stage1,
            stage2,
            total: stage1 + stage2,
        })
    }

    /// Steps until `until` updates have been applied in total.
    pub fn run_until(
        &mut self,
        data: &PairedDataset,
        until: u64,
        mut on_step: impl FnMut(&Trainer, &LossRecord) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        let mut records = Vec::new();
        while self.iteration < until {
            let r = self.step(data)?;
            on_step(self, &r)?;
            records.push(r);
        }
        Ok(records)
    }
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub records: Vec<LossRecord>,
    pub final_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

/// Trains to `cfg.iterations`, writing `loss.csv`, periodic `ckpt_NNNNNN.qsam`
/// files and `final.qsam` into `out`. A resumed trainer appends to an existing trace.
pub fn train(trainer: &mut Trainer, data: &PairedDataset, out: &Path) -> Result<TrainOutputs> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let loss_path = out.join("loss.csv");
    let mut csv = if trainer.iteration() > 0 && loss_path.is_file() {
        let prev = fs::read_to_string(&loss_path).map_err(|e| Error::io(&loss_path, e))?;
        truncate_trace(&prev, trainer.iteration())
    } else {
        format!("{LOSS_CSV_HEADER}\n")
    };
    let every = trainer.config().checkpoint_every;
    let total = trainer.config().iterations;
    let records = trainer.run_until(data, total, |t, r| {
        let _ = writeln!(csv, "{}", loss_csv_row(r));
        if every > 0 && r.iteration % every == 0 && r.iteration < total {
            fs::write(&loss_path, &csv).map_err(|e| Error::io(&loss_path, e))?;
            save_checkpoint(&out.join(format!("ckpt_{:06}.qsam", r.iteration)), &t.checkpoint())?;
        }
        Ok(())
    })?;
    fs::write(&loss_path, &csv).map_err(|e| Error::io(&loss_path, e))?;
    let final_checkpoint = out.join("final.qsam");
    save_checkpoint(&final_checkpoint, &trainer.checkpoint())?;
    Ok(TrainOutputs {
        records,
        final_checkpoint,
        loss_csv: loss_path,
    })
}

/// Keeps the header and rows with iteration `<= last`.
fn truncate_trace(csv: &str, last: u64) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for line in csv.lines().skip(1) {
        let keep = line
            .split(',')
            .next()
            .and_then(|v| v.parse::<u64>().ok())
            .is_some_and(|i| i <= last);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "QSAM" | version u32 | header_len u64 | header JSON
//! | parameter table | optimizer table | iteration u64
//! | rng_len u64 | rng bytes | CRC-32 of everything before it (u32)
//! ```
//!
//! A table is `count u64` followed by, per tensor, `name_len u16`, the UTF-8
//! name, `rank u8`, `rank` dims as u64 and the `f32` payload.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::arch::{NetConfig, QsamNet};
use crate::error::{CheckpointError, Error, Result};
use crate::layers::Init;
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};
use crate::train::{Adam, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QSAM";
pub const CHECKPOINT_VERSION: u32 = 1;

const RNG_STATE_LEN: usize = 32 + 8 + 16;

/// Position of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn generator(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    fn to_bytes(self) -> Vec<u8> {
        let mut b = self.seed.to_vec();
        b.extend_from_slice(&self.stream.to_le_bytes());
        b.extend_from_slice(&self.word_pos.to_le_bytes());
        b
    }

    fn from_bytes(b: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if b.len() != RNG_STATE_LEN {
            return Err(CheckpointError::Malformed(format!("rng state has {} bytes", b.len())));
        }
        Ok(RngState {
            seed: b[..32].try_into().expect("slice length checked"),
            stream: u64::from_le_bytes(b[32..40].try_into().expect("slice length checked")),
            word_pos: u128::from_le_bytes(b[40..56].try_into().expect("slice length checked")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerInfo {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    net: NetConfig,
    train: TrainConfig,
    optimizer: OptimizerInfo,
}

pub type NamedTensor = (String, Tensor<f32>);

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub params: Vec<NamedTensor>,
    pub optimizer: OptimizerInfo,
    /// `adam.m.<param>` and `adam.v.<param>` entries.
    pub moments: Vec<NamedTensor>,
    pub iteration: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn capture(
        net: &NetConfig,
        train: &TrainConfig,
        store: &ParamStore<f32>,
        adam: &Adam<f32>,
        iteration: u64,
        rng: RngState,
    ) -> Self {
        let params = store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        let mut moments = Vec::with_capacity(2 * store.len());
        for (kind, table) in [("m", &adam.m), ("v", &adam.v)] {
            for ((_, p), t) in store.iter().zip(table) {
                moments.push((format!("adam.{kind}.{}", p.name), t.clone()));
            }
        }
        Checkpoint {
            net: net.clone(),
            train: train.clone(),
            params,
            optimizer: OptimizerInfo {
                beta1: adam.beta1,
                beta2: adam.beta2,
                eps: adam.eps,
                step: adam.step,
            },
            moments,
            iteration,
            rng,
        }
    }

    /// Copies stored tensors into `store`; names and shapes must match exactly.
    pub fn fill_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(CheckpointError::Malformed(format!(
                "checkpoint holds {} tensors, the network has {}",
                self.params.len(),
                store.len()
            ))
            .into());
        }
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| CheckpointError::Malformed(format!("unknown parameter {name}")))?;
            store.set_value(id, t.clone())?;
        }
        Ok(())
    }

    /// Rebuilds the network and its parameters.
    pub fn build(&self) -> Result<(QsamNet, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let net = QsamNet::new(&mut store, &self.net, &mut Init::Zeros)?;
        self.fill_params(&mut store)?;
        Ok((net, store))
    }

    /// Optimizer state laid out for `store`.
    pub fn optimizer_for(&self, store: &ParamStore<f32>) -> Result<Adam<f32>> {
        let mut adam = Adam::new(store);
        adam.beta1 = self.optimizer.beta1;
        adam.beta2 = self.optimizer.beta2;
        adam.eps = self.optimizer.eps;
        adam.step = self.optimizer.step;
        if self.moments.len() != 2 * store.len() {
            return Err(CheckpointError::Malformed(format!(
                "expected {} optimizer tensors, found {}",
                2 * store.len(),
                self.moments.len()
            ))
            .into());
        }
        for (name, t) in &self.moments {
            let (table, pname) = if let Some(p) = name.strip_prefix("adam.m.") {
                (&mut adam.m, p)
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                (&mut adam.v, p)
            } else {
                return Err(CheckpointError::Malformed(format!("unexpected optimizer tensor {name}")).into());
            };
            let id = store
                .id(pname)
                .ok_or_else(|| CheckpointError::Malformed(format!("optimizer tensor for unknown parameter {pname}")))?;
            let slot = &mut table[id.index()];
            if slot.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "optimizer tensor {name} has shape {}, parameter has {}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(adam)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            net: self.net.clone(),
            train: self.train.clone(),
            optimizer: self.optimizer,
        })
        .expect("header serializes");
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&(header.len() as u64).to_le_bytes());
        b.extend_from_slice(&header);
        write_table(&mut b, &self.params);
        write_table(&mut b, &self.moments);
        b.extend_from_slice(&self.iteration.to_le_bytes());
        let rng = self.rng.to_bytes();
        b.extend_from_slice(&(rng.len() as u64).to_le_bytes());
        b.extend_from_slice(&rng);
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let parsed = parse_body(&mut r);
        let body_end = bytes.len().saturating_sub(4);
        let crc_ok = bytes.len() >= 12 && {
            let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
            stored == crc32fast::hash(&bytes[..body_end])
        };
        if crc_ok {
            let ckpt = parsed?;
            if r.pos != body_end {
                return Err(CheckpointError::Malformed(format!(
                    "{} unexpected bytes before the checksum",
                    body_end as i64 - r.pos as i64
                )));
            }
            return Ok(ckpt);
        }
        match parsed {
            Err(CheckpointError::Truncated(what)) => Err(CheckpointError::Truncated(what)),
            _ if r.pos + 4 > bytes.len() => Err(CheckpointError::Truncated("checksum")),
            _ => {
                let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
                Err(CheckpointError::Checksum {
                    stored,
                    computed: crc32fast::hash(&bytes[..body_end]),
                })
            }
        }
    }
}

fn parse_body(r: &mut Reader) -> std::result::Result<Checkpoint, CheckpointError> {
    let header_len = r.len("header length")?;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    let params = read_table(r, "parameter table")?;
    let moments = read_table(r, "optimizer table")?;
    let iteration = r.u64("iteration")?;
    let rng_len = r.len("rng length")?;
    let rng = RngState::from_bytes(r.take(rng_len, "rng state")?)?;
    Ok(Checkpoint {
        net: header.net,
        train: header.train,
        params,
        optimizer: header.optimizer,
        moments,
        iteration,
        rng,
    })
}

fn write_table(b: &mut Vec<u8>, table: &[NamedTensor]) {
    b.extend_from_slice(&(table.len() as u64).to_le_bytes());
    for (name, t) in table {
        b.extend_from_slice(&(name.len() as u16).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        let dims = t.shape().dims();
        b.push(dims.len() as u8);
        for d in dims {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_table(r: &mut Reader, what: &'static str) -> std::result::Result<Vec<NamedTensor>, CheckpointError> {
    let count = r.len(what)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2, what)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(name_len, what)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, what)?[0] as usize;
        if !(1..=4).contains(&rank) {
            return Err(CheckpointError::Malformed(format!("tensor {name} has rank {rank}")));
        }
        let mut dims = [1usize; 4];
        for i in 0..rank {
            dims[4 - rank + i] = r.len(what)?;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?;
        let data = r
            .take(n, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(shape, data).expect("length matches shape")));
    }
    Ok(out)
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &'static str) -> std::result::Result<usize, CheckpointError> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| CheckpointError::Truncated(what))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Algebra;

    fn small() -> Checkpoint {
        let net = NetConfig {
            widths: vec![1, 2],
            blocks: 1,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        QsamNet::new(&mut store, &net, &mut Init::Uniform(&mut rng)).unwrap();
        let mut adam = Adam::new(&store);
        adam.step = 7;
        adam.m[0].data_mut()[0] = 0.25;
        Checkpoint::capture(&net, &TrainConfig::default(), &store, &adam, 7, RngState::capture(&rng))
    }

    #[test]
    fn bytes_round_trip() {
        let c = small();
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"QSAM");
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), c);
        let (_, store) = c.build().unwrap();
        let adam = c.optimizer_for(&store).unwrap();
        assert_eq!(adam.step, 7);
        assert_eq!(adam.m[0].data()[0], 0.25);
    }

    #[test]
    fn rng_state_round_trip() {
        use rand::RngCore;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(5);
        rng.next_u32();
        let s = RngState::capture(&rng);
        let mut again = s.generator();
        assert_eq!(RngState::from_bytes(&s.to_bytes()).unwrap(), s);
        assert_eq!(rng.next_u64(), again.next_u64());
    }

    #[test]
    fn damage_is_classified() {
        let b = small().to_bytes();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));

        let mut future = b.clone();
        future[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&future),
            Err(CheckpointError::Version { found: 2, supported: 1 })
        ));

        for cut in [3, 10, 30, b.len() / 2, b.len() - 5, b.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&b[..cut]), Err(CheckpointError::Truncated(_))), "cut {cut}");
        }

        let header_len = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
        let name_at = 16 + header_len + 8;
        let name_len = u16::from_le_bytes(b[name_at..name_at + 2].try_into().unwrap()) as usize;
        let payload = name_at + 2 + name_len + 1 + 4 * 8;
        let mut flipped = b.clone();
        flipped[payload + 1] ^= 0x01;
        let got = Checkpoint::from_bytes(&flipped);
        assert!(matches!(got, Err(CheckpointError::Checksum { .. })), "{got:?}");
    }

    #[test]
    fn mismatched_network_rejected() {
        let c = small();
        let mut other = c.clone();
        other.net.algebra = Algebra::Real;
        assert!(other.build().is_err());
        let mut missing = c.clone();
        missing.params.pop();
        assert!(missing.build().is_err());
    }
}

//! Checkpoint files.
//!
//! Layout: the 8 magic bytes `LTTDCKPT`, a little-endian `u64` header
//! length, a JSON header, then every tensor listed in the header as raw
//! little-endian `f64`s, in header order. Tensors are the encoder and
//! ranker parameters (`tte.*`, `lt.*`), both optimisers' moments
//! (`adam.{tte,lt}.{m,v}.*`) and the item cache (`cache.emb`, `cache.res`).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::listwise::LtModel;
use crate::numerics::{AdamState, ParamStore, Rng, RngState, Tensor};
use crate::trainer::{NegativePool, SystemKind, TrainerState};
use crate::tte::{ItemIndex, TteModel};
use crate::world::World;

pub const MAGIC: &[u8; 8] = b"LTTDCKPT";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    system: SystemKind,
    step: usize,
    phase: String,
    config: RunConfig,
    rng: RngState,
    pool: Option<NegativePool>,
    adam_tte: AdamMeta,
    adam_lt: AdamMeta,
    tensors: Vec<TensorEntry>,
}

/// A resumable training snapshot.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainerState,
    /// Item embeddings under `state.tte`.
    pub index: ItemIndex,
    /// Phase name of the next step.
    pub phase: String,
}

fn meta(a: &AdamState) -> AdamMeta {
    AdamMeta { step: a.step, lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps }
}

fn bad(m: impl Into<String>) -> Error {
    Error::Checkpoint(m.into())
}

impl Checkpoint {
    pub fn new(config: RunConfig, state: TrainerState, index: ItemIndex, phase: &str) -> Self {
        Self { config, state, index, phase: phase.to_string() }
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        let s = &self.state;
        for (prefix, store) in [("tte", s.tte.params()), ("lt", s.lt.params())] {
            for (n, t) in store.names().iter().zip(store.tensors()) {
                out.push((format!("{prefix}.{n}"), t));
            }
        }
        for (prefix, store, adam) in [("tte", s.tte.params(), &s.tte_adam), ("lt", s.lt.params(), &s.lt_adam)] {
            for (moment, ts) in [("m", &adam.m), ("v", &adam.v)] {
                for (n, t) in store.names().iter().zip(ts) {
                    out.push((format!("adam.{prefix}.{moment}.{n}"), t));
                }
            }
        }
        out.push(("cache.emb".into(), &self.index.emb));
        out.push(("cache.res".into(), &self.index.res));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.named_tensors();
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            system: self.state.system,
            step: self.state.step,
            phase: self.phase.clone(),
            config: self.config.clone(),
            rng: self.state.rng.state(),
            pool: self.state.pool.clone(),
            adam_tte: meta(&self.state.tte_adam),
            adam_lt: meta(&self.state.lt_adam),
            tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let payload: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let mut cursor = 16 + len;
        let mut tensors = std::collections::HashMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes.get(cursor..cursor + n * 8).ok_or_else(|| bad(format!("truncated payload at {}", e.name)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            cursor += n * 8;
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        let mut take = |name: &str| tensors.remove(name).ok_or_else(|| bad(format!("missing tensor {name}")));

        let config = header.config;
        config.validate()?;
        let tc = &config.training;
        // construct with throwaway weights, then overwrite every tensor
        let mut scratch = Rng::seed_from_u64(0);
        let mut tte = TteModel::new(tc.tte_config(config.world.vocab_size), &mut scratch);
        let mut lt = LtModel::new(tc.lt_config(), &mut scratch)?;
        fill(tte.params_mut(), "tte", &mut take)?;
        fill(lt.params_mut(), "lt", &mut take)?;
        let mut adam = |prefix: &str, store: &ParamStore, m: &AdamMeta| -> Result<AdamState> {
            let mut a = AdamState::new(m.lr, store.tensors());
            a.step = m.step;
            a.beta1 = m.beta1;
            a.beta2 = m.beta2;
            a.eps = m.eps;
            for (i, n) in store.names().iter().enumerate() {
                a.m[i] = take(&format!("adam.{prefix}.m.{n}"))?;
                a.v[i] = take(&format!("adam.{prefix}.v.{n}"))?;
                if a.m[i].shape() != store.tensors()[i].shape() || a.v[i].shape() != store.tensors()[i].shape() {
                    return Err(bad(format!("moment shape of {n} differs from the parameter")));
                }
            }
            Ok(a)
        };
        let tte_adam = adam("tte", tte.params(), &header.adam_tte)?;
        let lt_adam = adam("lt", lt.params(), &header.adam_lt)?;
        let index = ItemIndex { emb: take("cache.emb")?, res: take("cache.res")? };
        drop(take);
        if let Some(extra) = tensors.keys().min() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        let rng = Rng::from_state(&header.rng).ok_or_else(|| bad("bad rng state"))?;
        let state = TrainerState {
            system: header.system,
            tte,
            lt,
            tte_adam,
            lt_adam,
            rng,
            step: header.step,
            pool: header.pool,
        };
        Ok(Self { config, state, index, phase: header.phase })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Check that the checkpoint fits `world`: vocabulary and corpus size.
    pub fn check_world(&self, world: &World) -> Result<()> {
        let vocab = self.state.tte.config().vocab_size;
        if vocab != world.spec().vocab_size {
            return Err(Error::DimensionMismatch {
                what: "vocab_size",
                left: vocab,
                left_src: "checkpoint",
                right: world.spec().vocab_size,
                right_src: "world",
            });
        }
        if self.index.len() != world.n_items() {
            return Err(Error::DimensionMismatch {
                what: "n_items",
                left: self.index.len(),
                left_src: "checkpoint",
                right: world.n_items(),
                right_src: "world",
            });
        }
        Ok(())
    }
}

fn fill(store: &mut ParamStore, prefix: &str, take: &mut impl FnMut(&str) -> Result<Tensor>) -> Result<()> {
    let names = store.names().to_vec();
    for (n, slot) in names.iter().zip(store.tensors_mut()) {
        let t = take(&format!("{prefix}.{n}"))?;
        if t.shape() != slot.shape() {
            return Err(Error::DimensionMismatch {
                what: "parameter size",
                left: t.len(),
                left_src: "checkpoint",
                right: slot.len(),
                right_src: "config",
            });
        }
        *slot = t;
    }
    Ok(())
}

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

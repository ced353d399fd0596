//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` in header order. The
//! header carries dims, the config hash, the tensor directory, optimizer
//! scalars, RNG position and training progress.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::{Dims, ParamStore};
use crate::rl::{Adam, AdamConfig, CurveRecord, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer, RNG and curve of an unfinished or finished run.
#[derive(Clone, Debug)]
pub struct Progress {
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub update: usize,
    pub curve: Vec<CurveRecord>,
    pub pending_reward: (f64, usize),
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: String,
    pub store: ParamStore,
    pub progress: Option<Progress>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Group {
    Param,
    AdamM,
    AdamV,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: Group,
    name: String,
    shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    frozen: Option<bool>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct ProgressHeader {
    adam: AdamConfig,
    adam_step: u64,
    rng: RngState,
    update: usize,
    curve: Vec<CurveRecord>,
    pending_reward: (f64, usize),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config_hash: String,
    dims: Dims,
    seed: u64,
    tensors: Vec<Entry>,
    progress: Option<ProgressHeader>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// A frozen base model without training progress.
    pub fn base(config_hash: String, store: ParamStore) -> Self {
        Self {
            config_hash,
            store,
            progress: None,
        }
    }

    pub fn from_state(config_hash: String, state: &TrainState) -> Self {
        Self {
            config_hash,
            store: state.store.clone(),
            progress: Some(Progress {
                adam: state.adam.clone(),
                rng: state.rng.clone(),
                update: state.update,
                curve: state.curve.clone(),
                pending_reward: state.pending_reward(),
            }),
        }
    }

    pub fn into_state(self) -> Result<TrainState> {
        let p = self
            .progress
            .ok_or_else(|| bad("checkpoint holds no training progress"))?;
        let mut st = TrainState::from_parts(self.store, p.adam, p.rng, p.update, p.curve);
        st.set_pending_reward(p.pending_reward.0, p.pending_reward.1);
        Ok(st)
    }

    /// Rejects a checkpoint written for other dims or another config.
    pub fn verify(&self, dims: Dims, config_hash: &str) -> Result<()> {
        let have = self.store.dims();
        if have.vocab != dims.vocab {
            return Err(bad(format!(
                "vocabulary size mismatch: checkpoint has {}, config requests {}",
                have.vocab, dims.vocab
            )));
        }
        if have != dims {
            return Err(bad(format!(
                "dims mismatch: checkpoint has {have:?}, config requests {dims:?}"
            )));
        }
        if self.config_hash != config_hash {
            return Err(bad(format!(
                "config hash mismatch: checkpoint was written for {}, config is {config_hash}; rerun the producing command",
                self.config_hash
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = vec![];
        let mut offset = 0;
        let mut push =
            |group: Group, name: &str, t: &Tensor, frozen: Option<bool>, data: &mut Vec<Tensor>| {
                tensors.push(Entry {
                    group,
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    frozen,
                    offset,
                });
                offset += t.numel();
                data.push(t.clone());
            };
        let mut owned = vec![];
        for (name, p) in self.store.iter() {
            push(Group::Param, name, &p.tensor, Some(p.frozen), &mut owned);
        }
        let progress = match &self.progress {
            None => None,
            Some(p) => {
                for (name, t) in &p.adam.m {
                    push(Group::AdamM, name, t, None, &mut owned);
                }
                for (name, t) in &p.adam.v {
                    push(Group::AdamV, name, t, None, &mut owned);
                }
                Some(ProgressHeader {
                    adam: p.adam.config.clone(),
                    adam_step: p.adam.step,
                    rng: RngState {
                        seed: hex::encode(p.rng.get_seed()),
                        stream: p.rng.get_stream(),
                        word_pos: p.rng.get_word_pos().to_string(),
                    },
                    update: p.update,
                    curve: p.curve.clone(),
                    pending_reward: p.pending_reward,
                })
            }
        };
        let header = Header {
            config_hash: self.config_hash.clone(),
            dims: self.store.dims(),
            seed: self.store.seed(),
            tensors,
            progress,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &owned {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version} (this build reads version {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..)
            .filter(|b| b.len() >= hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let raw = &body[hlen..];
        if raw.len() % 8 != 0 {
            return Err(bad("tensor data is not a whole number of f64 values"));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        header.dims.validate()?;
        let mut store = ParamStore::empty(header.dims, header.seed);
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut expected = 0;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + n > values.len() {
                return Err(bad(format!(
                    "tensor `{}` lies outside the data section",
                    e.name
                )));
            }
            expected += n;
            let t = Tensor::new(e.shape, values[e.offset..e.offset + n].to_vec())?;
            match e.group {
                Group::Param => store.insert(&e.name, t, e.frozen.unwrap_or(true))?,
                Group::AdamM => {
                    m.insert(e.name, t);
                }
                Group::AdamV => {
                    v.insert(e.name, t);
                }
            }
        }
        if expected != values.len() {
            return Err(bad("trailing data after the last tensor"));
        }
        let progress = match header.progress {
            None => None,
            Some(p) => {
                let seed = parse_seed(&p.rng.seed)?;
                let mut rng = ChaCha8Rng::from_seed(seed);
                rng.set_stream(p.rng.stream);
                rng.set_word_pos(
                    p.rng
                        .word_pos
                        .parse()
                        .map_err(|_| bad("bad RNG word position"))?,
                );
                Some(Progress {
                    adam: Adam {
                        config: p.adam,
                        step: p.adam_step,
                        m,
                        v,
                    },
                    rng,
                    update: p.update,
                    curve: p.curve,
                    pending_reward: p.pending_reward,
                })
            }
        };
        Ok(Self {
            config_hash: header.config_hash,
            store,
            progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|source| Error::File {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::File {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))
    }
}

fn parse_seed(s: &str) -> Result<[u8; 32]> {
    let mut out = [0u8; 32];
    hex::decode_to_slice(s, &mut out).map_err(|_| bad("bad RNG seed"))?;
    Ok(out)
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|source| Error::File {
        path: path.display().to_string(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Parameters, Tensor};
use crate::error::{Error, Result};

/// Prefix of every base language model parameter.
pub const LM_PREFIX: &str = "lm.";
pub const ADAPTER_PREFIX: &str = "adapter.";
pub const SELECTOR_PREFIX: &str = "selector.";
pub const CRITIC_PREFIX: &str = "critic.";

/// Network widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub adapter: usize,
    pub selector_hidden: usize,
    pub critic_hidden: usize,
}

impl Dims {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            embed: 32,
            hidden: 64,
            adapter: 64,
            selector_hidden: 64,
            critic_hidden: 64,
        }
    }

    /// Very small widths for finite-difference checks.
    pub fn tiny(vocab: usize) -> Self {
        Self {
            vocab,
            embed: 3,
            hidden: 4,
            adapter: 3,
            selector_hidden: 3,
            critic_hidden: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.vocab,
            self.embed,
            self.hidden,
            self.adapter,
            self.selector_hidden,
            self.critic_hidden,
        ];
        if all.contains(&0) {
            return Err(crate::error::invalid(format!(
                "all dims must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Named parameter tensors, each frozen or trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    dims: Dims,
    seed: u64,
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn empty(dims: Dims, seed: u64) -> Self {
        Self {
            dims,
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Adds a parameter. Names are unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor, frozen: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(crate::error::invalid(format!(
                "duplicate parameter `{name}`"
            )));
        }
        self.params
            .insert(name.to_string(), Param { tensor, frozen });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn is_frozen(&self, name: &str) -> Result<bool> {
        self.params
            .get(name)
            .map(|p| p.frozen)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Sets the frozen flag on every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Replaces a parameter's values. The shape may not change.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::Shape {
                op: "set-param",
                lhs: p.tensor.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        p.tensor = tensor;
        Ok(())
    }

    pub(crate) fn tensor_mut_unchecked(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    /// Copies every parameter under `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        for (name, p) in other.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.set(name, p.tensor.clone())?;
        }
        Ok(())
    }

    /// SHA-256 over the names, shapes and exact bits of the parameters
    /// selected by `filter`.
    pub fn checksum_where(&self, filter: impl Fn(&str, &Param) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(n, p)| filter(n, p)) {
            h.update(name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Checksum of the frozen parameter set.
    pub fn frozen_checksum(&self) -> String {
        self.checksum_where(|_, p| p.frozen)
    }

    pub fn prefix_checksum(&self, prefix: &str) -> String {
        self.checksum_where(|n, _| n.starts_with(prefix))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }
}

impl Parameters for ParamStore {
    fn checked_names(&self) -> Vec<String> {
        self.trainable_names()
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensor_mut_unchecked(name)
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    Uniform,
}

/// Layout of every parameter: name, shape, initializer.
fn layout(d: &Dims) -> Vec<(String, Vec<usize>, Init)> {
    use Init::*;
    let lstm = |prefix: &str, input: usize, width: usize| {
        vec![
            (format!("{prefix}.wx"), vec![input, 4 * width], Uniform),
            (format!("{prefix}.wh"), vec![width, 4 * width], Uniform),
            (format!("{prefix}.b"), vec![1, 4 * width], Zero),
        ]
    };
    let mut out = vec![("lm.embed".to_string(), vec![d.vocab, d.embed], Uniform)];
    out.extend(lstm("lm.lstm", d.embed, d.hidden));
    out.push(("lm.out".to_string(), vec![d.hidden, d.vocab], Zero));
    out.extend(lstm("adapter.lstm", d.hidden, d.adapter));
    out.push(("adapter.out".to_string(), vec![d.adapter, d.vocab], Zero));
    out.extend([
        (
            "selector.l1.w".to_string(),
            vec![d.adapter, d.selector_hidden],
            Uniform,
        ),
        (
            "selector.l1.b".to_string(),
            vec![1, d.selector_hidden],
            Zero,
        ),
        (
            "selector.l2.w".to_string(),
            vec![d.selector_hidden, 2],
            Zero,
        ),
        ("selector.l2.b".to_string(), vec![1, 2], Zero),
        (
            "critic.l1.w".to_string(),
            vec![d.adapter, d.critic_hidden],
            Uniform,
        ),
        ("critic.l1.b".to_string(), vec![1, d.critic_hidden], Zero),
        ("critic.l2.w".to_string(), vec![d.critic_hidden, 1], Zero),
        ("critic.l2.b".to_string(), vec![1, 1], Zero),
    ]);
    out
}

/// Initializes every network.
///
/// The base LM output layer, the adapter output projection, and the
/// selector and critic output layers start at zero; everything else is
/// uniform in `±1/sqrt(fan_in)`. All parameters start trainable.
pub fn init_all(dims: Dims, seed: u64) -> Result<ParamStore> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::empty(dims, seed);
    for (name, shape, init) in layout(&dims) {
        let t = match init {
            Init::Zero => Tensor::zeros(&shape),
            Init::Uniform => {
                let fan_in = if name == "lm.embed" {
                    shape[1]
                } else {
                    shape[0]
                };
                let k = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| rng.random_range(-k..k))
            }
        };
        store.insert(&name, t, false)?;
    }
    Ok(store)
}

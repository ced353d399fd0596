//! Synthetic corpora: a task-general successor-rule corpus for pretraining
//! the base LM, and few-shot target tasks that deviate from the base rule at
//! known positions.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
const FIRST_LETTER: usize = 4;

pub const MARKER: &str = "#";
pub const SLOT_NAMES: [&str; 2] = ["name", "price"];

/// Symbol/id bijection over reserved symbols, letters, the marker and the
/// slot placeholders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    ids: BTreeMap<String, usize>,
    letters: usize,
}

impl Vocab {
    /// `<pad> <bos> <eos> |`, then `letters` lowercase letters, `#`, and one
    /// `<slot>` placeholder per slot name.
    pub fn new(letters: usize) -> Result<Self> {
        if letters == 0 || letters > 26 {
            return Err(invalid(format!(
                "alphabet size must be in 1..=26, got {letters}"
            )));
        }
        let mut symbols: Vec<String> = ["<pad>", "<bos>", "<eos>", "|"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        symbols.extend((0..letters).map(|i| ((b'a' + i as u8) as char).to_string()));
        symbols.push(MARKER.to_string());
        symbols.extend(SLOT_NAMES.iter().map(|n| placeholder(n)));
        let ids = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Ok(Self {
            symbols,
            ids,
            letters,
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn letters(&self) -> usize {
        self.letters
    }

    pub fn letter(&self, i: usize) -> usize {
        FIRST_LETTER + (i % self.letters)
    }

    /// Alphabet index of a letter token.
    pub fn letter_index(&self, id: usize) -> Option<usize> {
        (FIRST_LETTER..FIRST_LETTER + self.letters)
            .contains(&id)
            .then(|| id - FIRST_LETTER)
    }

    /// Next letter with wraparound.
    pub fn successor(&self, id: usize) -> Option<usize> {
        self.letter_index(id).map(|i| self.letter(i + 1))
    }

    pub fn marker(&self) -> usize {
        FIRST_LETTER + self.letters
    }

    pub fn slot_placeholder(&self, slot: &str) -> Option<usize> {
        self.ids.get(&placeholder(slot)).copied()
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        matches!(id, PAD | BOS | EOS | SEP)
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.ids.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Whitespace-separated symbols to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .enumerate()
            .map(|(position, s)| {
                self.id(s).ok_or_else(|| Error::UnknownSymbol {
                    symbol: s.to_string(),
                    position,
                })
            })
            .collect()
    }

    /// Ids to whitespace-separated symbols, reserved symbols included.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let parts: Result<Vec<&str>> = ids
            .iter()
            .map(|&id| {
                self.symbol(id).ok_or(Error::TokenOutOfRange {
                    id,
                    vocab: self.len(),
                })
            })
            .collect();
        Ok(parts?.join(" "))
    }

    /// Decodes model output, dropping reserved symbols.
    pub fn decode_output(&self, ids: &[usize]) -> Result<String> {
        let kept: Vec<usize> = ids
            .iter()
            .copied()
            .filter(|&i| !self.is_reserved(i))
            .collect();
        self.decode(&kept)
    }

    /// Metric tokens for model output.
    pub fn tokens(&self, ids: &[usize]) -> Result<Vec<String>> {
        Ok(self
            .decode_output(ids)?
            .split_whitespace()
            .map(str::to_string)
            .collect())
    }
}

pub fn placeholder(slot: &str) -> String {
    format!("<{slot}>")
}

/// One conditioned generation example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    /// Conditioning tokens, starting with BOS.
    pub context: Vec<usize>,
    /// Gold output without the trailing EOS.
    pub target: Vec<usize>,
    /// Slot name to value tokens, for data-to-text examples.
    pub slots: Option<BTreeMap<String, Vec<usize>>>,
    /// `true` where the gold token differs from the base successor rule.
    pub deviation_mask: Option<Vec<bool>>,
}

impl Example {
    /// Target followed by EOS.
    pub fn target_with_eos(&self) -> Vec<usize> {
        let mut t = self.target.clone();
        t.push(EOS);
        t
    }

    fn key(&self) -> (Vec<usize>, Vec<usize>) {
        (self.context.clone(), self.target.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Successor sequences with marker deviations.
    Alphabet,
    /// Slot values embedded in successor filler.
    D2t,
}

/// Where the few-shot task departs from the successor rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum DeviationRule {
    /// Every occurrence of these letters is replaced by the marker.
    Letters { letters: Vec<char> },
    /// These target positions (0-based) are replaced by the marker.
    Positions { positions: Vec<usize> },
    /// The context carries `count` distinct query letters drawn from the
    /// target; each is replaced by the marker.
    Query {
        #[serde(default = "one")]
        count: usize,
    },
}

fn one() -> usize {
    1
}

/// Declarative task description; a pure function of this and a seed
/// determines every corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub alphabet: usize,
    /// Full letter-sequence length range (start letter included).
    pub min_len: usize,
    pub max_len: usize,
    pub rule: DeviationRule,
    /// Probability that a letter in the base corpus is replaced by the
    /// marker.
    pub base_noise: f64,
    /// Letters eligible for base-corpus noise; empty means all.
    pub noise_letters: Vec<char>,
    pub base_size: usize,
    pub train_pool: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Alphabet,
            alphabet: 26,
            min_len: 12,
            max_len: 24,
            rule: DeviationRule::Letters {
                letters: vec!['a', 'e', 'i', 'o', 'u'],
            },
            base_noise: 0.3,
            noise_letters: vec!['a', 'e', 'i', 'o', 'u'],
            base_size: 4000,
            train_pool: 18,
            n_train: 16,
            n_valid: 64,
            n_test: 256,
        }
    }
}

/// Inventory of slot values for the data-to-text variant. No value is a
/// successor pair, so none can occur inside successor filler.
pub fn slot_inventory(slot: &str) -> &'static [&'static str] {
    match slot {
        "name" => &["q m", "k d", "w f", "j t", "r c"],
        "price" => &["x c", "l p", "g v", "n h"],
        _ => &[],
    }
}

impl TaskSpec {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.alphabet)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_len < 2 || self.min_len > self.max_len || self.max_len > self.alphabet {
            return Err(invalid(format!(
                "sequence lengths must satisfy 2 <= min_len <= max_len <= alphabet, got {}..={} for {}",
                self.min_len, self.max_len, self.alphabet
            )));
        }
        if !(0.0..1.0).contains(&self.base_noise) {
            return Err(invalid(format!(
                "base_noise must be in [0, 1), got {}",
                self.base_noise
            )));
        }
        if self.n_train > self.train_pool {
            return Err(invalid(format!(
                "n_train {} exceeds the train pool {}",
                self.n_train, self.train_pool
            )));
        }
        match &self.rule {
            DeviationRule::Letters { letters } => {
                if letters.is_empty() {
                    return Err(invalid("letters rule needs at least one letter"));
                }
                self.check_letters(letters)?;
            }
            DeviationRule::Positions { positions } => {
                if positions.is_empty() {
                    return Err(invalid("positions rule needs at least one position"));
                }
                let target_len = self.min_len - 1;
                if positions.len() > target_len || positions.iter().any(|&p| p >= target_len) {
                    return Err(invalid(format!(
                        "positions rule {positions:?} requires more deviations than the shortest target ({target_len} tokens)"
                    )));
                }
            }
            DeviationRule::Query { count } => {
                if *count == 0 || *count > self.min_len - 1 {
                    return Err(invalid(format!(
                        "query rule needs between 1 and {} queries, got {count}",
                        self.min_len - 1
                    )));
                }
            }
        }
        self.check_letters(&self.noise_letters)?;
        if self.kind == TaskKind::D2t && self.min_len < 10 {
            return Err(invalid(
                "d2t targets need min_len >= 10 to hold two slot segments",
            ));
        }
        Ok(())
    }

    fn check_letters(&self, letters: &[char]) -> Result<()> {
        for &c in letters {
            if !c.is_ascii_lowercase() || (c as usize - 'a' as usize) >= self.alphabet {
                return Err(invalid(format!("letter {c:?} outside the alphabet")));
            }
        }
        Ok(())
    }
}

/// Few-shot splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

struct Gen<'a> {
    spec: &'a TaskSpec,
    vocab: Vocab,
    rng: ChaCha8Rng,
}

impl<'a> Gen<'a> {
    fn new(spec: &'a TaskSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            vocab: spec.vocab()?,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn letter_id(&self, c: char) -> usize {
        self.vocab.letter(c as usize - 'a' as usize)
    }

    /// `(start, letters)` where `letters` runs from start for a random length.
    fn base_sequence(&mut self) -> Vec<usize> {
        let start = self.rng.random_range(0..self.spec.alphabet);
        let len = self.rng.random_range(self.spec.min_len..=self.spec.max_len);
        (0..len).map(|i| self.vocab.letter(start + i)).collect()
    }

    fn random_slots(&mut self) -> BTreeMap<String, Vec<usize>> {
        SLOT_NAMES
            .iter()
            .map(|&slot| {
                let inv = slot_inventory(slot);
                let v = inv[self.rng.random_range(0..inv.len())];
                (
                    slot.to_string(),
                    self.vocab.encode(v).expect("inventory symbols"),
                )
            })
            .collect()
    }

    /// `[BOS] ++ slots ++ [query, SEP]? ++ [end, SEP, start]`.
    fn context(
        &self,
        letters: &[usize],
        slots: Option<&BTreeMap<String, Vec<usize>>>,
        query: Option<&[usize]>,
    ) -> Vec<usize> {
        let mut ctx = vec![BOS];
        if let Some(slots) = slots {
            for slot in SLOT_NAMES {
                ctx.push(self.vocab.slot_placeholder(slot).expect("slot placeholder"));
                ctx.extend(&slots[slot]);
            }
        }
        if let Some(q) = query {
            ctx.extend(q);
            ctx.push(SEP);
        }
        ctx.push(*letters.last().expect("non-empty"));
        ctx.push(SEP);
        ctx.push(letters[0]);
        ctx
    }

    fn base_example(&mut self) -> Example {
        let letters = self.base_sequence();
        let slots = (self.spec.kind == TaskKind::D2t).then(|| self.random_slots());
        let query = match self.spec.rule {
            DeviationRule::Query { count } => {
                let mut q: Vec<usize> =
                    rand::seq::index::sample(&mut self.rng, self.spec.alphabet, count)
                        .into_iter()
                        .map(|i| self.vocab.letter(i))
                        .collect();
                q.sort_unstable();
                Some(q)
            }
            _ => None,
        };
        let context = self.context(&letters, slots.as_ref(), query.as_deref());
        let eligible: HashSet<usize> = self
            .spec
            .noise_letters
            .iter()
            .map(|&c| self.letter_id(c))
            .collect();
        let marker = self.vocab.marker();
        let target: Vec<usize> = letters[1..]
            .iter()
            .map(|&l| {
                let ok = eligible.is_empty() || eligible.contains(&l);
                if ok && self.rng.random::<f64>() < self.spec.base_noise {
                    marker
                } else {
                    l
                }
            })
            .collect();
        let mask = target
            .iter()
            .zip(&letters[1..])
            .map(|(a, b)| a != b)
            .collect();
        Example {
            context,
            target,
            slots: None,
            deviation_mask: Some(mask),
        }
    }

    fn task_example(&mut self) -> Example {
        let letters = self.base_sequence();
        let marker = self.vocab.marker();
        let mut target = letters[1..].to_vec();
        let mut query = None;
        match &self.spec.rule {
            DeviationRule::Letters { letters: set } => {
                let ids: HashSet<usize> = set.iter().map(|&c| self.letter_id(c)).collect();
                for t in target.iter_mut() {
                    if ids.contains(t) {
                        *t = marker;
                    }
                }
            }
            DeviationRule::Positions { positions } => {
                for &p in positions {
                    target[p] = marker;
                }
            }
            DeviationRule::Query { count } => {
                let mut q: Vec<usize> =
                    rand::seq::index::sample(&mut self.rng, target.len(), *count)
                        .into_iter()
                        .map(|i| target[i])
                        .collect();
                q.sort_unstable();
                for t in target.iter_mut() {
                    if q.contains(t) {
                        *t = marker;
                    }
                }
                query = Some(q);
            }
        }
        let slots = if self.spec.kind == TaskKind::D2t {
            let slots = self.random_slots();
            self.embed_slots(&mut target, &slots);
            Some(slots)
        } else {
            None
        };
        let context = self.context(&letters, slots.as_ref(), query.as_deref());
        let mask = target
            .iter()
            .zip(&letters[1..])
            .map(|(a, b)| a != b)
            .collect();
        Example {
            context,
            target,
            slots,
            deviation_mask: Some(mask),
        }
    }

    /// Overwrites two disjoint stretches of the filler with `# value #`.
    fn embed_slots(&mut self, target: &mut [usize], slots: &BTreeMap<String, Vec<usize>>) {
        let marker = self.vocab.marker();
        let segs: Vec<Vec<usize>> = SLOT_NAMES
            .iter()
            .map(|s| {
                let mut seg = vec![marker];
                seg.extend(&slots[*s]);
                seg.push(marker);
                seg
            })
            .collect();
        let (a, b) = (segs[0].len(), segs[1].len());
        // first segment starts at >= 1, one filler letter between segments,
        // at least one filler letter at the end.
        let max_first = target.len() - a - b - 2;
        let p1 = self.rng.random_range(1..=max_first);
        let p2 = self.rng.random_range(p1 + a + 1..=target.len() - b - 1);
        target[p1..p1 + a].copy_from_slice(&segs[0]);
        target[p2..p2 + b].copy_from_slice(&segs[1]);
    }
}

/// Task-general corpus for pretraining the base LM.
pub fn gen_base_corpus(spec: &TaskSpec, seed: u64) -> Result<Vec<Example>> {
    let mut g = Gen::new(spec, seed)?;
    Ok((0..spec.base_size).map(|_| g.base_example()).collect())
}

/// Successor sequence from `start` of `len` letters, as an example with
/// context `[BOS, end, SEP, start]`.
pub fn successor_example(vocab: &Vocab, start: usize, len: usize) -> Example {
    let letters: Vec<usize> = (0..len).map(|i| vocab.letter(start + i)).collect();
    Example {
        context: vec![BOS, letters[len - 1], SEP, letters[0]],
        target: letters[1..].to_vec(),
        slots: None,
        deviation_mask: Some(vec![false; len - 1]),
    }
}

/// Generates disjoint train-pool / valid / test splits and draws `n_train`
/// few-shot examples from the pool with the same seed.
pub fn gen_fewshot_task(spec: &TaskSpec, seed: u64) -> Result<Splits> {
    let mut g = Gen::new(spec, seed ^ 0x5eed_f00d)?;
    let need = spec.train_pool + spec.n_valid + spec.n_test;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(need);
    let mut attempts = 0usize;
    while out.len() < need {
        attempts += 1;
        if attempts > need * 200 {
            return Err(invalid(format!(
                "task space too small: found {} distinct examples, need {need}",
                out.len()
            )));
        }
        let ex = g.task_example();
        if seen.insert(ex.key()) {
            out.push(ex);
        }
    }
    let test = out.split_off(spec.train_pool + spec.n_valid);
    let valid = out.split_off(spec.train_pool);
    let train = sample_split(&out, spec.n_train, seed)?;
    Ok(Splits { train, valid, test })
}

/// Seeds used for three-run averages.
pub const STANDARD_SEEDS: [u64; 3] = [1, 2, 3];

/// Uniform sample without replacement; membership keeps dataset order.
pub fn sample_split(dataset: &[Example], n: usize, seed: u64) -> Result<Vec<Example>> {
    if n > dataset.len() {
        return Err(invalid(format!(
            "cannot sample {n} examples from a dataset of {}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng);
    let mut chosen = idx[..n].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| dataset[i].clone()).collect())
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    symbols: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    context: String,
    target: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    slots: Option<BTreeMap<String, String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    deviation_mask: Option<String>,
}

pub const DATASET_FORMAT: &str = "stg-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Writes a dataset as JSON lines: one header record naming the format,
/// version and vocabulary, then one record per example. Token sequences are
/// space-separated symbols; the deviation mask is a `0`/`1` string.
pub fn write_dataset(path: &Path, vocab: &Vocab, examples: &[Example]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| Error::File {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = std::io::BufWriter::new(file);
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        symbols: vocab.symbols().to_vec(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for ex in examples {
        let rec = Record {
            context: vocab.decode(&ex.context)?,
            target: vocab.decode(&ex.target)?,
            slots: ex
                .slots
                .as_ref()
                .map(|s| {
                    s.iter()
                        .map(|(k, v)| Ok((k.clone(), vocab.decode(v)?)))
                        .collect::<Result<_>>()
                })
                .transpose()?,
            deviation_mask: ex
                .deviation_mask
                .as_ref()
                .map(|m| m.iter().map(|&b| if b { '1' } else { '0' }).collect()),
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path, vocab: &Vocab) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path).map_err(|source| Error::File {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header: Header = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => return Err(invalid(format!("{}: empty dataset file", path.display()))),
    };
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(invalid(format!(
            "{}: unsupported dataset format {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    if header.symbols != vocab.symbols() {
        return Err(invalid(format!(
            "{}: vocabulary does not match",
            path.display()
        )));
    }
    let mut out = vec![];
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let target = vocab.encode(&rec.target)?;
        let deviation_mask = rec
            .deviation_mask
            .map(|m| {
                let mask: Vec<bool> = m.chars().map(|c| c == '1').collect();
                if mask.len() != target.len() {
                    return Err(invalid("deviation mask length differs from target length"));
                }
                Ok(mask)
            })
            .transpose()?;
        out.push(Example {
            context: vocab.encode(&rec.context)?,
            target,
            slots: rec
                .slots
                .map(|s| {
                    s.into_iter()
                        .map(|(k, v)| Ok((k, vocab.encode(&v)?)))
                        .collect::<Result<_>>()
                })
                .transpose()?,
            deviation_mask,
        });
    }
    Ok(out)
}

//! Sequence metrics and reward functions over whitespace tokens.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.iter().map(AsRef::as_ref).collect())
            .or_insert(0) += 1;
    }
    out
}

/// Clipped n-gram matches and hypothesis n-gram total for one order.
fn clipped<S: AsRef<str>>(hyp: &[S], refs: &[Vec<S>], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = h
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`, shorter on ties.
fn closest_ref_len<S>(refs: &[Vec<S>], c: usize) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn combine(matches: &[usize], totals: &[usize], hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 || matches[0] == 0 {
        return 0.0;
    }
    let smooth = matches.contains(&0);
    let mut log_sum = 0.0;
    for (n, (&m, &t)) in matches.iter().zip(totals).enumerate() {
        let (m, t) = if smooth && n >= 1 {
            (m + 1, t + 1)
        } else {
            (m, t)
        };
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * (log_sum / matches.len() as f64).exp()
}

/// Sentence BLEU with uniform weights up to `max_n`.
///
/// When any order has zero matches, orders `n >= 2` use add-one counts.
pub fn bleu<S: AsRef<str>>(hyp: &[S], refs: &[Vec<S>], max_n: usize) -> Result<f64> {
    if refs.is_empty() {
        return Err(invalid("BLEU needs at least one reference"));
    }
    if max_n == 0 {
        return Err(invalid("BLEU order must be >= 1"));
    }
    let (matches, totals): (Vec<usize>, Vec<usize>) =
        (1..=max_n).map(|n| clipped(hyp, refs, n)).unzip();
    Ok(combine(
        &matches,
        &totals,
        hyp.len(),
        closest_ref_len(refs, hyp.len()),
    ))
}

/// Corpus BLEU: counts and lengths are pooled before combining.
pub fn corpus_bleu<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<Vec<S>>)], max_n: usize) -> Result<f64> {
    if max_n == 0 {
        return Err(invalid("BLEU order must be >= 1"));
    }
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    let (mut c, mut r) = (0, 0);
    for (hyp, refs) in pairs {
        if refs.is_empty() {
            return Err(invalid("BLEU needs at least one reference"));
        }
        for n in 1..=max_n {
            let (m, t) = clipped(hyp, refs, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
        c += hyp.len();
        r += closest_ref_len(refs, hyp.len());
    }
    Ok(combine(&matches, &totals, c, r))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeVariant {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "L")]
    L,
}

fn f1(overlap: usize, hyp_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

/// Longest common subsequence length.
pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE F1. For n-gram variants, if either side is too short to contain an
/// n-gram the score is 1 for identical sequences and 0 otherwise.
pub fn rouge<S: AsRef<str>>(hyp: &[S], reference: &[S], variant: RougeVariant) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    match variant {
        RougeVariant::L => f1(lcs_len(hyp, reference), hyp.len(), reference.len()),
        RougeVariant::One | RougeVariant::Two => {
            let n = if variant == RougeVariant::One { 1 } else { 2 };
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            let (ht, rt): (usize, usize) = (h.values().sum(), r.values().sum());
            if ht == 0 || rt == 0 {
                let same = hyp.len() == reference.len()
                    && hyp
                        .iter()
                        .zip(reference)
                        .all(|(a, b)| a.as_ref() == b.as_ref());
                return if same { 1.0 } else { 0.0 };
            }
            let overlap = h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum();
            f1(overlap, ht, rt)
        }
    }
}

/// Slot name and value tokens.
pub type SlotValue = (String, Vec<String>);

fn find(hay: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Replaces every occurrence of a slot value by `<slot>`, longest values
/// first.
pub fn delexicalize<S: AsRef<str>>(tokens: &[S], slots: &[SlotValue]) -> Vec<String> {
    let mut out: Vec<String> = tokens.iter().map(|s| s.as_ref().to_string()).collect();
    let mut order: Vec<&SlotValue> = slots.iter().filter(|(_, v)| !v.is_empty()).collect();
    order.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then_with(|| a.0.cmp(&b.0)));
    for (name, value) in order {
        let ph = crate::tasks::placeholder(name);
        let mut res = Vec::with_capacity(out.len());
        let mut i = 0;
        while i < out.len() {
            if out[i..].starts_with(value) {
                res.push(ph.clone());
                i += value.len();
            } else {
                res.push(out[i].clone());
                i += 1;
            }
        }
        out = res;
    }
    out
}

pub fn delex_bleu<S: AsRef<str>>(hyp: &[S], reference: &[S], slots: &[SlotValue]) -> Result<f64> {
    bleu(
        &delexicalize(hyp, slots),
        &[delexicalize(reference, slots)],
        4,
    )
}

/// `(missing + redundant) / max(1, required)`. Missing counts required values
/// absent from `hyp`; redundant counts distinct inventory values present in
/// `hyp` that are not required.
pub fn slot_error_rate<S: AsRef<str>>(
    hyp: &[S],
    required: &[Vec<String>],
    inventory: &[Vec<String>],
) -> f64 {
    let hyp: Vec<String> = hyp.iter().map(|s| s.as_ref().to_string()).collect();
    let missing = required.iter().filter(|v| find(&hyp, v).is_none()).count();
    let mut extra: Vec<&Vec<String>> = inventory
        .iter()
        .filter(|v| !required.contains(v) && find(&hyp, v).is_some())
        .collect();
    extra.dedup();
    (missing + extra.len()) as f64 / required.len().max(1) as f64
}

/// `exp(total_nll / tokens)`.
pub fn perplexity(total_nll: f64, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(invalid("perplexity over zero tokens"));
    }
    Ok((total_nll / tokens as f64).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    /// Delexicalised BLEU.
    D2t,
    /// Mean of BLEU and ROUGE-L.
    Qa,
    /// ROUGE-L.
    Summ,
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d2t" => Ok(Self::D2t),
            "qa" => Ok(Self::Qa),
            "summ" => Ok(Self::Summ),
            other => Err(invalid(format!(
                "unknown reward kind `{other}` (expected d2t, qa or summ)"
            ))),
        }
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::D2t => "d2t",
            Self::Qa => "qa",
            Self::Summ => "summ",
        })
    }
}

pub fn task_reward<S: AsRef<str>>(
    kind: RewardKind,
    hyp: &[S],
    reference: &[S],
    slots: &[SlotValue],
) -> Result<f64> {
    let reference: Vec<String> = reference.iter().map(|s| s.as_ref().to_string()).collect();
    let hyp: Vec<String> = hyp.iter().map(|s| s.as_ref().to_string()).collect();
    match kind {
        RewardKind::D2t => delex_bleu(&hyp, &reference, slots),
        RewardKind::Qa => {
            let b = bleu(&hyp, std::slice::from_ref(&reference), 4)?;
            Ok(0.5 * (b + rouge(&hyp, &reference, RougeVariant::L)))
        }
        RewardKind::Summ => Ok(rouge(&hyp, &reference, RougeVariant::L)),
    }
}

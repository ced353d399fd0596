//! Evaluation-time decoding over a token policy and provenance rendering.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nets::{Cursor, ParamStore};
use crate::policy::{Distribution, PolicyKind, PolicyState};
use crate::tasks::{Vocab, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    /// `k` nucleus samples reranked by log-likelihood.
    TopP {
        p: f64,
        k: usize,
    },
    Beam {
        k: usize,
    },
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Greedy => Ok(()),
            Self::TopP { p, k } => {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(invalid(format!("top-p mass must be in (0, 1], got {p}")));
                }
                if k < 1 {
                    return Err(invalid("top-p sample count must be >= 1"));
                }
                Ok(())
            }
            Self::Beam { k } => {
                if k < 1 {
                    return Err(invalid("beam width must be >= 1"));
                }
                Ok(())
            }
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// `greedy`, `beam:K` or `top-p:P:K`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || {
            invalid(format!(
                "bad decoding strategy `{s}` (expected greedy, beam:K or top-p:P:K)"
            ))
        };
        let st = match parts.as_slice() {
            ["greedy"] => Self::Greedy,
            ["beam", k] => Self::Beam {
                k: k.parse().map_err(|_| bad())?,
            },
            ["top-p", p, k] => Self::TopP {
                p: p.parse().map_err(|_| bad())?,
                k: k.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        st.validate()?;
        Ok(st)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Greedy => f.write_str("greedy"),
            Self::TopP { p, k } => write!(f, "top-p:{p}:{k}"),
            Self::Beam { k } => write!(f, "beam:{k}"),
        }
    }
}

/// One decoded candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Chosen tokens, including the final EOS when emitted.
    pub tokens: Vec<usize>,
    /// `pi_s(1 | s_t)` at each chosen token.
    pub select_probs: Vec<f64>,
    /// Sum of per-step log-probabilities of the chosen tokens.
    pub log_prob: f64,
    /// Beam rank or sample index.
    pub rank: usize,
}

impl DecodeResult {
    /// Tokens without the trailing EOS.
    pub fn output(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Token distribution and adapter-selection probability at the cursor's
/// current state.
pub fn step_distribution<R: Rng + ?Sized>(
    cursor: &Cursor<'_>,
    kind: PolicyKind,
    rng: &mut R,
) -> Result<(Distribution, f64)> {
    let step = cursor
        .current()
        .ok_or_else(|| invalid("decoding needs a non-empty context"))?;
    let logits = if kind.uses_selector() {
        cursor.selector_logits()?
    } else {
        [0.0, 0.0]
    };
    let state = PolicyState::from_step(step, logits)?;
    let select = kind.selector(&state.selector)?.prob(1);
    Ok((kind.distribution(&state, rng)?, select))
}

/// Keeps the smallest highest-probability set with mass `>= p` and
/// renormalizes. Ties are ordered by token id.
pub fn nucleus_filter(dist: &Distribution, p: f64) -> Result<Distribution> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(invalid(format!("top-p mass must be in (0, 1], got {p}")));
    }
    if p == 1.0 {
        return Ok(dist.clone());
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist.prob(b).total_cmp(&dist.prob(a)).then(a.cmp(&b)));
    let mut keep = vec![0.0; dist.len()];
    let mut acc = 0.0;
    for i in order {
        keep[i] = dist.prob(i);
        acc += dist.prob(i);
        if acc >= p {
            break;
        }
    }
    Distribution::from_weights(keep)
}

fn start<'a>(store: &'a ParamStore, context: &[usize]) -> Result<Cursor<'a>> {
    if context.is_empty() {
        return Err(invalid("decoding needs a non-empty context"));
    }
    let mut c = Cursor::new(store);
    c.feed_all(context)?;
    Ok(c)
}

fn greedy<R: Rng + ?Sized>(
    store: &ParamStore,
    kind: PolicyKind,
    context: &[usize],
    max_len: usize,
    rng: &mut R,
) -> Result<DecodeResult> {
    let mut cur = start(store, context)?;
    let mut out = DecodeResult {
        tokens: vec![],
        select_probs: vec![],
        log_prob: 0.0,
        rank: 0,
    };
    for t in 0..max_len {
        let (dist, sel) = step_distribution(&cur, kind, rng)?;
        let tok = dist.argmax();
        out.tokens.push(tok);
        out.select_probs.push(sel);
        out.log_prob += dist.log_prob(tok);
        if tok == EOS {
            break;
        }
        if t + 1 < max_len {
            cur.feed(tok)?;
        }
    }
    Ok(out)
}

fn sample_nucleus<R: Rng + ?Sized>(
    store: &ParamStore,
    kind: PolicyKind,
    context: &[usize],
    max_len: usize,
    p: f64,
    rank: usize,
    rng: &mut R,
) -> Result<DecodeResult> {
    let mut cur = start(store, context)?;
    let mut out = DecodeResult {
        tokens: vec![],
        select_probs: vec![],
        log_prob: 0.0,
        rank,
    };
    for t in 0..max_len {
        let (dist, sel) = step_distribution(&cur, kind, rng)?;
        let tok = nucleus_filter(&dist, p)?.sample(rng);
        out.tokens.push(tok);
        out.select_probs.push(sel);
        out.log_prob += dist.log_prob(tok);
        if tok == EOS {
            break;
        }
        if t + 1 < max_len {
            cur.feed(tok)?;
        }
    }
    Ok(out)
}

struct Hyp<'a> {
    cursor: Cursor<'a>,
    res: DecodeResult,
    done: bool,
}

fn beam<R: Rng + ?Sized>(
    store: &ParamStore,
    kind: PolicyKind,
    context: &[usize],
    max_len: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<DecodeResult>> {
    let empty = DecodeResult {
        tokens: vec![],
        select_probs: vec![],
        log_prob: 0.0,
        rank: 0,
    };
    let mut beams = vec![Hyp {
        cursor: start(store, context)?,
        res: empty,
        done: max_len == 0,
    }];
    for _ in 0..max_len {
        if beams.iter().all(|b| b.done) {
            break;
        }
        let mut cands: Vec<(f64, usize, Option<usize>, f64)> = vec![];
        let mut dists = Vec::with_capacity(beams.len());
        for (bi, b) in beams.iter().enumerate() {
            if b.done {
                cands.push((b.res.log_prob, bi, None, 0.0));
                dists.push(None);
                continue;
            }
            let (dist, sel) = step_distribution(&b.cursor, kind, rng)?;
            for tok in 0..dist.len() {
                cands.push((b.res.log_prob + dist.log_prob(tok), bi, Some(tok), sel));
            }
            dists.push(Some(dist));
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        cands.truncate(k);
        let mut next = Vec::with_capacity(k);
        for (lp, bi, tok, sel) in cands {
            let src = &beams[bi];
            let mut h = Hyp {
                cursor: src.cursor.clone(),
                res: src.res.clone(),
                done: src.done,
            };
            if let Some(tok) = tok {
                h.res.tokens.push(tok);
                h.res.select_probs.push(sel);
                h.res.log_prob = lp;
                if tok == EOS || h.res.tokens.len() == max_len {
                    h.done = true;
                } else {
                    h.cursor.feed(tok)?;
                }
            }
            next.push(h);
        }
        beams = next;
    }
    let mut out: Vec<DecodeResult> = beams.into_iter().map(|b| b.res).collect();
    // Greedy can escape a beam that pruned its prefix; keep it as a candidate
    // so the best result never scores below greedy.
    let g = greedy(store, kind, context, max_len, rng)?;
    if !out.iter().any(|r| r.tokens == g.tokens) {
        out.push(g);
    }
    out.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
    out.truncate(k);
    for (i, r) in out.iter_mut().enumerate() {
        r.rank = i;
    }
    Ok(out)
}

/// Decodes `context` under `kind`; the best candidate comes first.
pub fn decode<R: Rng + ?Sized>(
    store: &ParamStore,
    kind: PolicyKind,
    context: &[usize],
    strategy: Strategy,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<DecodeResult>> {
    strategy.validate()?;
    kind.validate()?;
    match strategy {
        Strategy::Greedy => Ok(vec![greedy(store, kind, context, max_len, rng)?]),
        Strategy::Beam { k } => beam(store, kind, context, max_len, k, rng),
        Strategy::TopP { p, k } => {
            let mut out = (0..k)
                .map(|i| sample_nucleus(store, kind, context, max_len, p, i, rng))
                .collect::<Result<Vec<_>>>()?;
            out.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
            Ok(out)
        }
    }
}

pub const PROVENANCE_THRESHOLD: f64 = 0.5;

/// Output tokens with adapter-sourced ones flagged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotated {
    pub tokens: Vec<String>,
    pub adapter: Vec<bool>,
    /// Adapter-sourced tokens wrapped in brackets.
    pub rendered: String,
}

/// Marks tokens whose selection probability exceeds `threshold`. The final
/// EOS is dropped.
pub fn annotate_provenance(
    result: &DecodeResult,
    vocab: &Vocab,
    threshold: f64,
) -> Result<Annotated> {
    let n = result.output().len();
    let mut tokens = Vec::with_capacity(n);
    let mut adapter = Vec::with_capacity(n);
    let mut parts = Vec::with_capacity(n);
    for (&id, &p) in result.tokens[..n].iter().zip(&result.select_probs) {
        let sym = vocab
            .symbol(id)
            .ok_or(Error::TokenOutOfRange {
                id,
                vocab: vocab.len(),
            })?
            .to_string();
        let flag = p > threshold;
        parts.push(if flag {
            format!("[{sym}]")
        } else {
            sym.clone()
        });
        tokens.push(sym);
        adapter.push(flag);
    }
    Ok(Annotated {
        tokens,
        adapter,
        rendered: parts.join(" "),
    })
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{decode, step_distribution, DecodeResult, Strategy, PROVENANCE_THRESHOLD};
use crate::error::Result;
use crate::metrics::{self, RewardKind, SlotValue};
use crate::nets::{Cursor, ParamStore};
use crate::policy::PolicyKind;
use crate::tasks::{Example, Vocab};

/// Scores decoded outputs against examples.
#[derive(Clone, Copy, Debug)]
pub struct Rewarder<'a> {
    pub vocab: &'a Vocab,
    pub kind: RewardKind,
}

impl Rewarder<'_> {
    pub fn slot_values(&self, ex: &Example) -> Result<Vec<SlotValue>> {
        ex.slots
            .iter()
            .flatten()
            .map(|(k, v)| Ok((k.clone(), self.vocab.tokens(v)?)))
            .collect()
    }

    pub fn score(&self, output: &[usize], ex: &Example) -> Result<f64> {
        let hyp = self.vocab.tokens(output)?;
        let reference = self.vocab.tokens(&ex.target)?;
        metrics::task_reward(self.kind, &hyp, &reference, &self.slot_values(ex)?)
    }
}

/// Per-state quantities along a gold target.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldTrace {
    /// `log p(y_t)` under the evaluated policy, EOS included.
    pub log_probs: Vec<f64>,
    /// `pi_s(1 | s_t)`, EOS state included.
    pub select_probs: Vec<f64>,
}

/// Teacher-forced pass over `target ++ [EOS]`.
pub fn gold_trace(
    store: &ParamStore,
    kind: PolicyKind,
    ex: &Example,
    rng: &mut ChaCha8Rng,
) -> Result<GoldTrace> {
    let target = ex.target_with_eos();
    let mut cur = Cursor::new(store);
    cur.feed_all(&ex.context)?;
    let mut out = GoldTrace {
        log_probs: Vec::with_capacity(target.len()),
        select_probs: Vec::with_capacity(target.len()),
    };
    for (t, &y) in target.iter().enumerate() {
        let (dist, sel) = step_distribution(&cur, kind, rng)?;
        out.log_probs.push(dist.log_prob(y));
        out.select_probs.push(sel);
        if t + 1 < target.len() {
            cur.feed(y)?;
        }
    }
    Ok(out)
}

/// Selector marks on gold states compared with deviation masks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectorStats {
    /// Target positions with `pi_s(1) > 0.5`.
    pub marked: usize,
    pub deviations: usize,
    pub hits: usize,
    /// `hits / marked`; `None` when nothing is marked.
    pub precision: Option<f64>,
    /// `hits / deviations`; `None` without deviations.
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub score: f64,
    pub scores: Vec<f64>,
    #[serde(skip)]
    pub outputs: Vec<DecodeResult>,
    /// Perplexity of the gold targets.
    pub ppl: f64,
    /// Mean `pi_s(1)` over gold states.
    pub mean_select: f64,
    /// Mean number of decoded tokens attributed to the base LM.
    pub t_plm: f64,
    pub selector: SelectorStats,
}

/// Decodes every example and scores it; `seed` fixes any sampling.
pub fn evaluate(
    store: &ParamStore,
    kind: PolicyKind,
    examples: &[Example],
    strategy: Strategy,
    max_len: usize,
    rewarder: Rewarder<'_>,
    seed: u64,
) -> Result<EvalSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(examples.len());
    let mut outputs = Vec::with_capacity(examples.len());
    let (mut nll, mut n_tok) = (0.0, 0usize);
    let (mut sel_sum, mut sel_n) = (0.0, 0usize);
    let mut t_plm = 0.0;
    let mut stats = SelectorStats::default();
    for ex in examples {
        let best = decode(store, kind, &ex.context, strategy, max_len, &mut rng)?.swap_remove(0);
        scores.push(rewarder.score(best.output(), ex)?);
        t_plm += best
            .select_probs
            .iter()
            .zip(&best.tokens)
            .filter(|(p, &t)| **p <= PROVENANCE_THRESHOLD && t != crate::tasks::EOS)
            .count() as f64;
        outputs.push(best);

        let g = gold_trace(store, kind, ex, &mut rng)?;
        nll -= g.log_probs.iter().sum::<f64>();
        n_tok += g.log_probs.len();
        sel_sum += g.select_probs.iter().sum::<f64>();
        sel_n += g.select_probs.len();
        if let Some(mask) = &ex.deviation_mask {
            for (&p, &dev) in g.select_probs.iter().zip(mask) {
                let marked = p > PROVENANCE_THRESHOLD;
                stats.marked += usize::from(marked);
                stats.deviations += usize::from(dev);
                stats.hits += usize::from(marked && dev);
            }
        }
    }
    stats.precision = (stats.marked > 0).then(|| stats.hits as f64 / stats.marked as f64);
    stats.recall = (stats.deviations > 0).then(|| stats.hits as f64 / stats.deviations as f64);
    let n = examples.len().max(1) as f64;
    Ok(EvalSummary {
        score: scores.iter().sum::<f64>() / n,
        scores,
        outputs,
        ppl: if n_tok > 0 {
            metrics::perplexity(nll, n_tok)?
        } else {
            1.0
        },
        mean_select: if sel_n > 0 {
            sel_sum / sel_n as f64
        } else {
            0.0
        },
        t_plm: t_plm / n,
        selector: stats,
    })
}

/// Perplexity of gold targets under `kind`.
pub fn perplexity(
    store: &ParamStore,
    kind: PolicyKind,
    examples: &[Example],
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut nll, mut n) = (0.0, 0usize);
    for ex in examples {
        let g = gold_trace(store, kind, ex, &mut rng)?;
        nll -= g.log_probs.iter().sum::<f64>();
        n += g.log_probs.len();
    }
    metrics::perplexity(nll, n)
}

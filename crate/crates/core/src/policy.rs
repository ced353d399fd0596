//! Token-level policies: the additive task policy, the selector, the
//! two-stage sampler, the evaluation mixture, naive ensembles and the
//! fixed-probability selector.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_row, Tensor};
use crate::error::{invalid, Error, Result};
use crate::nets::StepValues;

/// Floor applied before taking logs of probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

/// A categorical distribution with cached log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl Distribution {
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(invalid("distribution over an empty support"));
        }
        if logits.iter().any(|v| v.is_nan()) {
            return Err(invalid("NaN logit"));
        }
        let log_probs = log_softmax_row(logits);
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        Ok(Self { probs, log_probs })
    }

    /// Normalizes nonnegative weights. All-zero weights are rejected.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if weights.is_empty() || total <= 0.0 {
            return Err(invalid("degenerate distribution: no probability mass"));
        }
        let probs: Vec<f64> = weights.into_iter().map(|w| w / total).collect();
        let log_probs = probs.iter().map(|p| p.max(PROB_FLOOR).ln()).collect();
        Ok(Self { probs, log_probs })
    }

    /// Point mass on `id`.
    pub fn one_hot(n: usize, id: usize) -> Result<Self> {
        if id >= n {
            return Err(Error::TokenOutOfRange { id, vocab: n });
        }
        let mut w = vec![0.0; n];
        w[id] = 1.0;
        Self::from_weights(w)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    pub fn log_prob(&self, i: usize) -> f64 {
        self.log_probs[i]
    }

    /// Highest-probability index; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    }

    pub fn total_variation(&self, other: &Self) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// `KL(self || other)`.
    pub fn kl(&self, other: &Self) -> f64 {
        self.probs
            .iter()
            .zip(self.log_probs.iter().zip(&other.log_probs))
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, (lp, lq))| p * (lp - lq))
            .sum()
    }

    fn check_support(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape {
                op: "distribution",
                lhs: vec![self.len()],
                rhs: vec![other.len()],
            });
        }
        Ok(())
    }
}

/// Where a token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Base,
    Adapter,
}

impl Provenance {
    pub fn from_selection(i: usize) -> Self {
        if i == 0 {
            Self::Base
        } else {
            Self::Adapter
        }
    }

    pub fn selection(self) -> usize {
        match self {
            Self::Base => 0,
            Self::Adapter => 1,
        }
    }
}

/// One two-stage draw.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionStep {
    /// `i_t`: 0 selects the base LM, 1 the adapter.
    pub selection: usize,
    pub token: usize,
    /// `log pi_s(i_t | s_t)`.
    pub log_select: f64,
    /// Log-probability of the token under the selected policy.
    pub log_token: f64,
    pub provenance: Provenance,
}

/// `softmax(base_logits + feat W_a)`.
pub fn task_policy(base_logits: &[f64], feat: &[f64], w_a: &Tensor) -> Result<Distribution> {
    let shape = w_a.shape();
    if shape.len() != 2 || shape[0] != feat.len() || shape[1] != base_logits.len() {
        return Err(Error::Shape {
            op: "task-policy",
            lhs: vec![feat.len(), base_logits.len()],
            rhs: shape.to_vec(),
        });
    }
    let extra = crate::autodiff::matmul(feat, w_a.data(), 1, feat.len(), base_logits.len());
    let logits: Vec<f64> = base_logits.iter().zip(&extra).map(|(a, b)| a + b).collect();
    Distribution::from_logits(&logits)
}

/// Selector distribution over `{base, adapter}`.
pub fn selector_policy(logits: [f64; 2]) -> Result<Distribution> {
    Distribution::from_logits(&logits)
}

/// Constant selector `(1 - c, c)`.
pub fn fixed_selector(c: f64) -> Result<Distribution> {
    if !(0.0..=1.0).contains(&c) {
        return Err(invalid(format!(
            "fixed selection probability must be in [0, 1], got {c}"
        )));
    }
    Distribution::from_weights(vec![1.0 - c, c])
}

/// The three distributions available at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyState {
    /// `pi_LM`.
    pub base: Distribution,
    /// `pi_a`.
    pub task: Distribution,
    /// `pi_s`.
    pub selector: Distribution,
}

impl PolicyState {
    pub fn new(base: Distribution, task: Distribution, selector: Distribution) -> Result<Self> {
        base.check_support(&task)?;
        if selector.len() != 2 {
            return Err(invalid(format!(
                "selector must have 2 outcomes, got {}",
                selector.len()
            )));
        }
        Ok(Self {
            base,
            task,
            selector,
        })
    }

    /// Builds the state from a forward step and selector logits.
    pub fn from_step(step: &StepValues, selector_logits: [f64; 2]) -> Result<Self> {
        Self::new(
            Distribution::from_logits(&step.base_logits)?,
            Distribution::from_logits(&step.task_logits)?,
            selector_policy(selector_logits)?,
        )
    }

    pub fn with_selector(mut self, selector: Distribution) -> Result<Self> {
        if selector.len() != 2 {
            return Err(invalid("selector must have 2 outcomes"));
        }
        self.selector = selector;
        Ok(self)
    }

    pub fn component(&self, selection: usize) -> &Distribution {
        if selection == 0 {
            &self.base
        } else {
            &self.task
        }
    }
}

/// Draws `i_t ~ pi_s`, then the token from the selected policy.
pub fn hierarchical_sample<R: Rng + ?Sized>(state: &PolicyState, rng: &mut R) -> SelectionStep {
    let selection = state.selector.sample(rng);
    let dist = state.component(selection);
    let token = dist.sample(rng);
    SelectionStep {
        selection,
        token,
        log_select: state.selector.log_prob(selection),
        log_token: dist.log_prob(token),
        provenance: Provenance::from_selection(selection),
    }
}

/// `pi_h = pi_s(0) pi_LM + pi_s(1) pi_a`.
pub fn mixture_policy(state: &PolicyState) -> Distribution {
    let (w0, w1) = (state.selector.prob(0), state.selector.prob(1));
    let probs: Vec<f64> = state
        .base
        .probs()
        .iter()
        .zip(state.task.probs())
        .map(|(b, a)| w0 * b + w1 * a)
        .collect();
    let log_probs = probs.iter().map(|p| p.max(PROB_FLOOR).ln()).collect();
    Distribution { probs, log_probs }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleMode {
    Max,
    Mix,
    Random,
}

impl FromStr for EnsembleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "mix" => Ok(Self::Mix),
            "random" => Ok(Self::Random),
            other => Err(invalid(format!(
                "unknown ensemble mode `{other}` (expected max, mix or random)"
            ))),
        }
    }
}

impl fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Max => "max",
            Self::Mix => "mix",
            Self::Random => "random",
        })
    }
}

/// Naive ensemble of `pi_a` and `pi_LM`.
///
/// `Max` applies a softmax to the elementwise maximum of the two probability
/// vectors. `Random` returns one of the inputs chosen uniformly.
pub fn naive_ensemble<R: Rng + ?Sized>(
    mode: EnsembleMode,
    task: &Distribution,
    base: &Distribution,
    rng: &mut R,
) -> Result<Distribution> {
    task.check_support(base)?;
    match mode {
        EnsembleMode::Max => {
            let m: Vec<f64> = task
                .probs()
                .iter()
                .zip(base.probs())
                .map(|(a, b)| a.max(*b))
                .collect();
            Distribution::from_logits(&m)
        }
        EnsembleMode::Mix => Distribution::from_weights(
            task.probs()
                .iter()
                .zip(base.probs())
                .map(|(a, b)| 0.5 * (a + b))
                .collect(),
        ),
        EnsembleMode::Random => Ok(if rng.random_bool(0.5) {
            task.clone()
        } else {
            base.clone()
        }),
    }
}

/// How tokens are produced at a state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicyKind {
    /// The frozen base LM alone.
    Plm,
    /// The task policy alone.
    NonStg,
    /// Learned selector over base LM and task policy.
    Stg,
    /// Selector fixed at `(1 - c, c)`.
    Fixed { c: f64 },
    /// Naive ensemble of task policy and base LM.
    Ensemble { mode: EnsembleMode },
}

impl PolicyKind {
    pub fn validate(&self) -> Result<()> {
        if let Self::Fixed { c } = self {
            fixed_selector(*c)?;
        }
        Ok(())
    }

    /// Whether the selector network is consulted.
    pub fn uses_selector(&self) -> bool {
        matches!(self, Self::Stg)
    }

    /// Selector distribution for this kind, given the learned one.
    pub fn selector(&self, learned: &Distribution) -> Result<Distribution> {
        match self {
            Self::Plm => fixed_selector(0.0),
            Self::NonStg => fixed_selector(1.0),
            Self::Stg => Ok(learned.clone()),
            Self::Fixed { c } => fixed_selector(*c),
            Self::Ensemble { .. } => fixed_selector(0.5),
        }
    }

    /// Evaluation-time token distribution.
    pub fn distribution<R: Rng + ?Sized>(
        &self,
        state: &PolicyState,
        rng: &mut R,
    ) -> Result<Distribution> {
        match self {
            Self::Ensemble { mode } => naive_ensemble(*mode, &state.task, &state.base, rng),
            Self::Plm => Ok(state.base.clone()),
            Self::NonStg => Ok(state.task.clone()),
            _ => {
                let s = state
                    .clone()
                    .with_selector(self.selector(&state.selector)?)?;
                Ok(mixture_policy(&s))
            }
        }
    }

    /// Training-time draw. Ensembles sample from the ensemble distribution
    /// and record the adapter as the source, except `Random`, which records
    /// the policy it picked.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        state: &PolicyState,
        rng: &mut R,
    ) -> Result<SelectionStep> {
        match self {
            Self::Ensemble { mode } => {
                let (dist, selection) = match mode {
                    EnsembleMode::Random => {
                        let pick = usize::from(rng.random_bool(0.5));
                        (state.component(pick).clone(), pick)
                    }
                    _ => (naive_ensemble(*mode, &state.task, &state.base, rng)?, 1),
                };
                let token = dist.sample(rng);
                Ok(SelectionStep {
                    selection,
                    token,
                    log_select: (0.5f64).ln(),
                    log_token: dist.log_prob(token),
                    provenance: Provenance::from_selection(selection),
                })
            }
            _ => {
                let s = state
                    .clone()
                    .with_selector(self.selector(&state.selector)?)?;
                Ok(hierarchical_sample(&s, rng))
            }
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Plm => f.write_str("plm"),
            Self::NonStg => f.write_str("non-stg"),
            Self::Stg => f.write_str("stg"),
            Self::Fixed { c } => write!(f, "fixed-{c}"),
            Self::Ensemble { mode } => write!(f, "ne-{mode}"),
        }
    }
}

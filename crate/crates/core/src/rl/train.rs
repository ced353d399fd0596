use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::decode::Strategy;
use crate::error::{invalid, Error, Result};
use crate::metrics::RewardKind;
use crate::nets::{
    init_all, Dims, ParamStore, Session, ADAPTER_PREFIX, CRITIC_PREFIX, LM_PREFIX, SELECTOR_PREFIX,
};
use crate::policy::{EnsembleMode, PolicyKind};
use crate::tasks::{Example, Vocab};

use super::adam::{optimizer_step, Adam, AdamConfig};
use super::eval::{evaluate, perplexity, Rewarder};
use super::losses::{lm_loss, mle_loss, rl_objective, stg_mle_loss, ObjectiveWeights};
use super::trajectory::{assign_reward, lambda_advantages, rollout};

/// Training and evaluation methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Plm,
    NonStgMle,
    NonStgRl,
    Stg,
    StgMle,
    NeMax,
    NeMix,
    NeRandom,
    FixedC,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Plm,
        Method::NonStgMle,
        Method::NonStgRl,
        Method::Stg,
        Method::StgMle,
        Method::NeMax,
        Method::NeMix,
        Method::NeRandom,
        Method::FixedC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Plm => "plm",
            Self::NonStgMle => "non-stg-mle",
            Self::NonStgRl => "non-stg-rl",
            Self::Stg => "stg",
            Self::StgMle => "stg-mle",
            Self::NeMax => "ne-max",
            Self::NeMix => "ne-mix",
            Self::NeRandom => "ne-random",
            Self::FixedC => "fixed-c",
        }
    }

    /// Policy used for evaluation.
    pub fn eval_kind(self, c: Option<f64>) -> Result<PolicyKind> {
        Ok(match self {
            Self::Plm => PolicyKind::Plm,
            Self::NonStgMle | Self::NonStgRl => PolicyKind::NonStg,
            Self::Stg | Self::StgMle => PolicyKind::Stg,
            Self::NeMax => PolicyKind::Ensemble {
                mode: EnsembleMode::Max,
            },
            Self::NeMix => PolicyKind::Ensemble {
                mode: EnsembleMode::Mix,
            },
            Self::NeRandom => PolicyKind::Ensemble {
                mode: EnsembleMode::Random,
            },
            Self::FixedC => PolicyKind::Fixed {
                c: c.ok_or_else(|| invalid("method fixed-c requires c"))?,
            },
        })
    }

    fn is_ensemble(self) -> bool {
        matches!(self, Self::NeMax | Self::NeMix | Self::NeRandom)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
                invalid(format!(
                    "unknown method `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How ensemble methods train their adapter before ensembling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterSource {
    Rl,
    Mle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Selection probability for `fixed-c`.
    pub c: Option<f64>,
    pub updates: usize,
    /// Trajectories (or examples, for likelihood training) per update.
    pub batch: usize,
    pub optimizer: AdamConfig,
    pub gamma: f64,
    pub eval_interval: usize,
    pub max_len: usize,
    pub reward: RewardKind,
    /// Likelihood warm start of the adapter; defaults to on for
    /// `non-stg-rl` only.
    pub warm_start: Option<bool>,
    pub warm_start_updates: usize,
    pub critic_weight: f64,
    /// Advantage trace decay; 0 is the one-step estimate.
    pub gae_lambda: f64,
    pub entropy_bonus: f64,
    pub standardize_advantages: bool,
    pub ensemble_source: AdapterSource,
    /// Decoding used for validation scores.
    pub decode: Strategy,
    pub seed: u64,
    pub record_wall_clock: bool,
    /// Threads for rollouts and per-example gradients; 0 picks the number
    /// of available cores. Results do not depend on this.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Stg,
            c: None,
            updates: 400,
            batch: 8,
            optimizer: AdamConfig {
                lr_overrides: [(CRITIC_PREFIX.to_string(), 1e-2)].into(),
                ..AdamConfig::default()
            },
            gamma: 1.0,
            eval_interval: 25,
            max_len: 32,
            reward: RewardKind::Qa,
            warm_start: None,
            warm_start_updates: 50,
            critic_weight: 1.0,
            gae_lambda: 1.0,
            entropy_bonus: 0.0,
            standardize_advantages: false,
            ensemble_source: AdapterSource::Rl,
            decode: Strategy::Greedy,
            seed: 0,
            record_wall_clock: false,
            workers: 0,
        }
    }
}

/// What a training update does.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    None,
    /// Teacher-forced likelihood of `pi_a`.
    Mle,
    /// Teacher-forced likelihood of the mixture.
    MixtureMle,
    /// Actor-critic over trajectories of this kind.
    Rl(PolicyKindTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PolicyKindTag {
    NonStg,
    Stg,
    Fixed,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.method == Method::FixedC) != self.c.is_some() {
            return Err(invalid("c must be set exactly when method is fixed-c"));
        }
        if let Some(c) = self.c {
            crate::policy::fixed_selector(c)?;
        }
        if self.batch == 0 || self.eval_interval == 0 || self.max_len == 0 {
            return Err(invalid("batch, eval_interval and max_len must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid(format!(
                "gamma must be in [0, 1], got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(invalid(format!(
                "gae_lambda must be in [0, 1], got {}",
                self.gae_lambda
            )));
        }
        if self.critic_weight < 0.0 || self.entropy_bonus < 0.0 {
            return Err(invalid("critic_weight and entropy_bonus must be >= 0"));
        }
        self.optimizer.validate()?;
        self.decode.validate()
    }

    pub fn warm_start_enabled(&self) -> bool {
        self.warm_start.unwrap_or(self.method == Method::NonStgRl)
    }

    /// Warnings about honored but unusual settings.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = vec![];
        if self.warm_start == Some(true) && matches!(self.method, Method::Stg | Method::FixedC) {
            w.push(format!(
                "warm start requested for {}; running it as configured",
                self.method
            ));
        }
        if self.warm_start == Some(true)
            && matches!(
                self.method,
                Method::Plm | Method::NonStgMle | Method::StgMle
            )
        {
            w.push(format!("warm start has no effect for {}", self.method));
        }
        w
    }

    fn warm_updates(&self) -> usize {
        let rl = match self.method {
            Method::NonStgRl | Method::Stg | Method::FixedC => true,
            m if m.is_ensemble() => self.ensemble_source == AdapterSource::Rl,
            _ => false,
        };
        if rl && self.warm_start_enabled() {
            self.warm_start_updates
        } else {
            0
        }
    }

    /// Updates including any warm start.
    pub fn total_updates(&self) -> usize {
        if self.method == Method::Plm {
            0
        } else {
            self.warm_updates() + self.updates
        }
    }

    fn phase(&self, update: usize) -> Phase {
        if self.method == Method::Plm {
            return Phase::None;
        }
        if update < self.warm_updates() {
            return Phase::Mle;
        }
        match self.method {
            Method::Plm => Phase::None,
            Method::NonStgMle => Phase::Mle,
            Method::StgMle => Phase::MixtureMle,
            Method::NonStgRl => Phase::Rl(PolicyKindTag::NonStg),
            Method::Stg => Phase::Rl(PolicyKindTag::Stg),
            Method::FixedC => Phase::Rl(PolicyKindTag::Fixed),
            _ => match self.ensemble_source {
                AdapterSource::Rl => Phase::Rl(PolicyKindTag::NonStg),
                AdapterSource::Mle => Phase::Mle,
            },
        }
    }

    fn rollout_kind(&self, tag: PolicyKindTag) -> PolicyKind {
        match tag {
            PolicyKindTag::NonStg => PolicyKind::NonStg,
            PolicyKindTag::Stg => PolicyKind::Stg,
            PolicyKindTag::Fixed => PolicyKind::Fixed {
                c: self.c.unwrap_or(0.0),
            },
        }
    }

    fn trains(&self, prefix: &str) -> bool {
        match prefix {
            ADAPTER_PREFIX => self.method != Method::Plm,
            SELECTOR_PREFIX => matches!(self.method, Method::Stg | Method::StgMle),
            CRITIC_PREFIX => {
                (0..self.total_updates()).any(|u| matches!(self.phase(u), Phase::Rl(_)))
            }
            _ => false,
        }
    }

    fn workers(&self) -> usize {
        if self.workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.workers
        }
    }
}

/// One learning-curve record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub step: usize,
    pub phase: String,
    pub train_ppl: f64,
    pub valid_score: f64,
    pub mean_select: f64,
    pub t_plm: f64,
    /// Mean reward of the rollouts since the previous record.
    pub train_reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_clock: Option<f64>,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub update: usize,
    pub curve: Vec<CurveRecord>,
    reward_sum: f64,
    reward_n: usize,
}

impl TrainState {
    pub fn from_parts(
        store: ParamStore,
        adam: Adam,
        rng: ChaCha8Rng,
        update: usize,
        curve: Vec<CurveRecord>,
    ) -> Self {
        Self {
            store,
            adam,
            rng,
            update,
            curve,
            reward_sum: 0.0,
            reward_n: 0,
        }
    }

    /// Mean rollout reward pending for the next record, as `(sum, count)`.
    pub fn pending_reward(&self) -> (f64, usize) {
        (self.reward_sum, self.reward_n)
    }

    pub fn set_pending_reward(&mut self, sum: f64, n: usize) {
        self.reward_sum = sum;
        self.reward_n = n;
    }
}

/// Training and validation examples.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a [Example],
    pub valid: &'a [Example],
    pub vocab: &'a Vocab,
}

/// Maps `f` over `items` on up to `workers` threads, preserving order.
pub fn par_map<T: Sync, U: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

pub(crate) fn accumulate(
    total: &mut BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
    scale: f64,
) {
    for (name, g) in grads {
        let g = g.map(|v| v * scale);
        match total.get_mut(&name) {
            Some(acc) => acc.add_assign(&g),
            None => {
                total.insert(name, g);
            }
        }
    }
}

/// Fresh state for `config`: the adapter, selector and critic are
/// re-initialized from the config seed and the base LM is copied from `base`.
pub fn init_state(config: &TrainConfig, base: &ParamStore) -> Result<TrainState> {
    config.validate()?;
    let mut store = init_all(base.dims(), config.seed)?;
    store.copy_prefix_from(base, LM_PREFIX)?;
    store.set_frozen("", true);
    for prefix in [ADAPTER_PREFIX, SELECTOR_PREFIX, CRITIC_PREFIX] {
        store.set_frozen(prefix, !config.trains(prefix));
    }
    Ok(TrainState::from_parts(
        store,
        Adam::new(config.optimizer.clone()),
        ChaCha8Rng::seed_from_u64(config.seed),
        0,
        vec![],
    ))
}

fn eval_seed(config: &TrainConfig) -> u64 {
    config.seed ^ 0x0e7a_1000
}

fn record(
    state: &mut TrainState,
    config: &TrainConfig,
    data: TrainData<'_>,
    started: Instant,
) -> Result<()> {
    let kind = config.method.eval_kind(config.c)?;
    let rewarder = Rewarder {
        vocab: data.vocab,
        kind: config.reward,
    };
    let summary = evaluate(
        &state.store,
        kind,
        data.valid,
        config.decode,
        config.max_len,
        rewarder,
        eval_seed(config),
    )?;
    let phase = match config.phase(state.update.saturating_sub(1)) {
        _ if state.update == 0 => "init",
        Phase::None => "none",
        Phase::Mle if state.update <= config.warm_updates() && config.warm_updates() > 0 => {
            "warm-start"
        }
        Phase::Mle => "mle",
        Phase::MixtureMle => "mixture-mle",
        Phase::Rl(_) => "rl",
    };
    state.curve.push(CurveRecord {
        step: state.update,
        phase: phase.to_string(),
        train_ppl: perplexity(&state.store, kind, data.train, eval_seed(config))?,
        valid_score: summary.score,
        mean_select: summary.mean_select,
        t_plm: summary.t_plm,
        train_reward: (state.reward_n > 0).then(|| state.reward_sum / state.reward_n as f64),
        wall_clock: config
            .record_wall_clock
            .then(|| started.elapsed().as_secs_f64()),
    });
    state.reward_sum = 0.0;
    state.reward_n = 0;
    Ok(())
}

fn likelihood_grads(
    state: &TrainState,
    config: &TrainConfig,
    batch: &[&Example],
    mixture: bool,
) -> Result<BTreeMap<String, Tensor>> {
    let store = &state.store;
    let per = par_map(batch, config.workers(), |ex| {
        let mut s = Session::new(store);
        let target = ex.target_with_eos();
        let loss = if mixture {
            stg_mle_loss(&mut s, &ex.context, &target)?
        } else {
            mle_loss(&mut s, &ex.context, &target)?
        };
        Ok(s.tape.backward(loss)?.into_params())
    })?;
    let mut total = BTreeMap::new();
    for g in per {
        accumulate(&mut total, g, 1.0 / batch.len() as f64);
    }
    Ok(total)
}

fn rl_grads(
    state: &mut TrainState,
    config: &TrainConfig,
    data: TrainData<'_>,
    batch: &[(&Example, u64)],
    kind: PolicyKind,
) -> Result<BTreeMap<String, Tensor>> {
    let rewarder = Rewarder {
        vocab: data.vocab,
        kind: config.reward,
    };
    let store = &state.store;
    let mut trajs = par_map(batch, config.workers(), |(ex, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(*seed);
        let mut t = rollout(
            kind,
            store,
            &ex.context,
            config.max_len,
            config.gamma,
            &mut rng,
        )?;
        let r = rewarder.score(&t.output(), ex)?;
        assign_reward(&mut t, r);
        Ok(t)
    })?;
    let mut advs: Vec<Vec<f64>> = trajs
        .iter()
        .map(|t| lambda_advantages(&t.rewards, &t.values(), t.gamma, config.gae_lambda))
        .collect();
    if config.standardize_advantages {
        let all: Vec<f64> = advs.iter().flatten().copied().collect();
        let mean = all.iter().sum::<f64>() / all.len().max(1) as f64;
        let sd =
            (all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / all.len().max(1) as f64).sqrt();
        for a in advs.iter_mut().flatten() {
            *a = (*a - mean) / (sd + 1e-8);
        }
    }
    for t in &trajs {
        state.reward_sum += t.terminal_reward();
        state.reward_n += 1;
    }
    let weights = ObjectiveWeights {
        critic: config.critic_weight,
        entropy: config.entropy_bonus,
    };
    let work: Vec<(usize, &crate::rl::Trajectory)> = trajs.iter().enumerate().collect();
    let store = &state.store;
    let per = par_map(&work, config.workers(), |(i, t)| {
        let mut s = Session::new(store);
        let loss = rl_objective(&mut s, t, &advs[*i], weights)?;
        Ok(s.tape.backward(loss)?.into_params())
    })?;
    trajs.clear();
    let mut total = BTreeMap::new();
    for g in per {
        accumulate(&mut total, g, 1.0 / batch.len() as f64);
    }
    Ok(total)
}

/// Runs one update.
fn update(state: &mut TrainState, config: &TrainConfig, data: TrainData<'_>) -> Result<()> {
    let phase = config.phase(state.update);
    if data.train.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let grads = match phase {
        Phase::None => BTreeMap::new(),
        Phase::Mle | Phase::MixtureMle => {
            let batch: Vec<&Example> = (0..config.batch)
                .map(|_| &data.train[state.rng.random_range(0..data.train.len())])
                .collect();
            likelihood_grads(state, config, &batch, phase == Phase::MixtureMle)?
        }
        Phase::Rl(tag) => {
            let batch: Vec<(&Example, u64)> = (0..config.batch)
                .map(|_| {
                    let ex = &data.train[state.rng.random_range(0..data.train.len())];
                    (ex, state.rng.random::<u64>())
                })
                .collect();
            rl_grads(state, config, data, &batch, config.rollout_kind(tag))?
        }
    };
    if !grads.is_empty() {
        optimizer_step(&mut state.store, &grads, &mut state.adam)?;
    }
    state.update += 1;
    Ok(())
}

/// Continues `state` until `stop` updates (capped by the configured total),
/// recording the curve every `eval_interval` updates and at the end.
pub fn run_until(
    state: &mut TrainState,
    config: &TrainConfig,
    data: TrainData<'_>,
    stop: usize,
) -> Result<()> {
    config.validate()?;
    let started = Instant::now();
    let total = config.total_updates();
    let stop = stop.min(total);
    if state.update == 0 && state.curve.is_empty() {
        record(state, config, data, started)?;
    }
    while state.update < stop {
        update(state, config, data)?;
        if state.update.is_multiple_of(config.eval_interval) || state.update == total {
            record(state, config, data, started)?;
        }
    }
    Ok(())
}

/// Trains `config.method` from scratch on top of the frozen base LM.
pub fn train(config: &TrainConfig, base: &ParamStore, data: TrainData<'_>) -> Result<TrainState> {
    let mut state = init_state(config, base)?;
    run_until(&mut state, config, data, usize::MAX)?;
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub dims: Dims,
    pub updates: usize,
    pub batch: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub workers: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            dims: Dims::new(33),
            updates: 800,
            batch: 16,
            optimizer: AdamConfig {
                lr: 2e-2,
                ..AdamConfig::default()
            },
            seed: 0,
            workers: 0,
        }
    }
}

/// Fits the base LM on `corpus` by likelihood and freezes it. The other
/// parameter groups are present but untouched.
pub fn pretrain(config: &PretrainConfig, corpus: &[Example]) -> Result<ParamStore> {
    config.dims.validate()?;
    config.optimizer.validate()?;
    if corpus.is_empty() || config.batch == 0 {
        return Err(invalid(
            "pretraining needs a non-empty corpus and batch >= 1",
        ));
    }
    let mut store = init_all(config.dims, config.seed)?;
    store.set_frozen("", true);
    store.set_frozen(LM_PREFIX, false);
    let mut adam = Adam::new(config.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let workers = if config.workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        config.workers
    };
    for step in 0..config.updates {
        // cosine decay to zero over the run
        let frac = step as f64 / config.updates as f64;
        adam.config.lr = config.optimizer.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        let batch: Vec<&Example> = (0..config.batch)
            .map(|_| &corpus[rng.random_range(0..corpus.len())])
            .collect();
        let st = &store;
        let per = par_map(&batch, workers, |ex| {
            let mut s = Session::new(st);
            let loss = lm_loss(&mut s, &ex.context, &ex.target_with_eos())?;
            Ok(s.tape.backward(loss)?.into_params())
        })?;
        let mut total = BTreeMap::new();
        for g in per {
            accumulate(&mut total, g, 1.0 / batch.len() as f64);
        }
        optimizer_step(&mut store, &total, &mut adam)?;
    }
    store.set_frozen("", false);
    store.set_frozen(LM_PREFIX, true);
    Ok(store)
}

/// Fraction of next-token predictions (argmax of `pi_LM`) matching the
/// targets, EOS included.
pub fn next_token_accuracy(store: &ParamStore, examples: &[Example]) -> Result<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for ex in examples {
        let target = ex.target_with_eos();
        let mut seq = ex.context.clone();
        seq.extend(&target[..target.len() - 1]);
        let vals = crate::nets::base_lm_values(store, &seq)?;
        for (j, &y) in target.iter().enumerate() {
            let logits = &vals[ex.context.len() - 1 + j].1;
            let best = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
            hit += usize::from(best == y);
            n += 1;
        }
    }
    Ok(hit as f64 / n.max(1) as f64)
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nets::{Cursor, ParamStore};
use crate::policy::{PolicyKind, PolicyState, SelectionStep};
use crate::tasks::EOS;

/// Longest context a rollout accepts.
pub const MAX_CONTEXT: usize = 64;

/// A sampled step with the critic estimate at its state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajStep {
    pub step: SelectionStep,
    /// `V(s_t)` at sampling time.
    pub value: f64,
    /// `pi_s(1 | s_t)` of the sampling selector.
    pub select_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub context: Vec<usize>,
    pub kind: PolicyKind,
    pub steps: Vec<TrajStep>,
    /// `r_t`; only the last entry is non-zero under delayed reward.
    pub rewards: Vec<f64>,
    pub gamma: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.step.token).collect()
    }

    /// Generated tokens without the trailing EOS.
    pub fn output(&self) -> Vec<usize> {
        let mut t = self.tokens();
        if t.last() == Some(&EOS) {
            t.pop();
        }
        t
    }

    pub fn selections(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.step.selection).collect()
    }

    /// Number of steps drawn from the base LM.
    pub fn base_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.step.selection == 0).count()
    }

    pub fn terminal_reward(&self) -> f64 {
        self.rewards.last().copied().unwrap_or(0.0)
    }

    pub fn values(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.value).collect()
    }
}

/// Samples until EOS or `max_len` steps.
pub fn rollout<R: Rng + ?Sized>(
    kind: PolicyKind,
    store: &ParamStore,
    context: &[usize],
    max_len: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    kind.validate()?;
    if context.is_empty() || context.len() > MAX_CONTEXT {
        return Err(invalid(format!(
            "context length {} outside 1..={MAX_CONTEXT}",
            context.len()
        )));
    }
    if max_len == 0 {
        return Err(invalid("max_len must be >= 1"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid(format!("discount must be in [0, 1], got {gamma}")));
    }
    let mut cur = Cursor::new(store);
    cur.feed_all(context)?;
    let mut steps = Vec::new();
    for t in 0..max_len {
        let vals = cur.current().expect("context consumed");
        let logits = if kind.uses_selector() {
            cur.selector_logits()?
        } else {
            [0.0, 0.0]
        };
        let state = PolicyState::from_step(vals, logits)?;
        let select_prob = kind.selector(&state.selector)?.prob(1);
        let value = cur.critic()?;
        let step = kind.sample(&state, rng)?;
        let tok = step.token;
        steps.push(TrajStep {
            step,
            value,
            select_prob,
        });
        if tok == EOS {
            break;
        }
        if t + 1 < max_len {
            cur.feed(tok)?;
        }
    }
    let n = steps.len();
    Ok(Trajectory {
        context: context.to_vec(),
        kind,
        steps,
        rewards: vec![0.0; n],
        gamma,
    })
}

/// Sets the delayed terminal reward; earlier rewards are zero.
pub fn assign_reward(traj: &mut Trajectory, reward: f64) {
    traj.rewards.iter_mut().for_each(|r| *r = 0.0);
    if let Some(last) = traj.rewards.last_mut() {
        *last = reward;
    }
}

/// Scores the generated output (EOS stripped) with `reward_fn`.
pub fn assign_reward_with(
    traj: &mut Trajectory,
    reward_fn: impl FnOnce(&[usize]) -> Result<f64>,
) -> Result<()> {
    let r = reward_fn(&traj.output())?;
    assign_reward(traj, r);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageEstimate {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
}

/// `Q_t = r_t + gamma V_{t+1}`, `A_t = Q_t - V_t`, `V_{T+1} = 0`.
pub fn advantages_from(rewards: &[f64], values: &[f64], gamma: f64) -> AdvantageEstimate {
    let n = rewards.len();
    let q: Vec<f64> = (0..n)
        .map(|t| rewards[t] + gamma * values.get(t + 1).copied().unwrap_or(0.0))
        .collect();
    let a = q.iter().zip(values).map(|(q, v)| q - v).collect();
    AdvantageEstimate {
        q,
        v: values.to_vec(),
        a,
    }
}

/// Advantages under the critic values cached at sampling time.
pub fn advantages(traj: &Trajectory) -> AdvantageEstimate {
    advantages_from(&traj.rewards, &traj.values(), traj.gamma)
}

/// Exponentially weighted sum of the one-step advantages:
/// `A_t = sum_l (gamma lambda)^l delta_{t+l}`. `lambda = 0` gives
/// [`advantages_from`]; `lambda = 1` gives the return minus `V_t`.
pub fn lambda_advantages(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let delta = advantages_from(rewards, values, gamma).a;
    let mut out = vec![0.0; delta.len()];
    let mut acc = 0.0;
    for t in (0..delta.len()).rev() {
        acc = delta[t] + gamma * lambda * acc;
        out[t] = acc;
    }
    out
}

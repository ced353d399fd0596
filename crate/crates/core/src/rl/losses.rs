use crate::autodiff::{Tensor, Var};
use crate::error::{invalid, Result};
use crate::nets::{base_lm_values, ParamStore, Session, LM_PREFIX};
use crate::policy::{PolicyKind, PROB_FLOOR};

use super::trajectory::Trajectory;

/// Tape quantities at one output state.
#[derive(Clone, Copy, Debug)]
pub struct ReplayStep {
    /// `log pi_LM`, always detached.
    pub base_logp: Var,
    /// `log pi_a`.
    pub task_logp: Var,
    /// `log pi_s`, when requested.
    pub select_logp: Option<Var>,
    /// `V(s_t)`, when requested.
    pub value: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Heads {
    pub selector: bool,
    pub critic: bool,
}

fn lm_frozen(store: &ParamStore) -> bool {
    store
        .iter()
        .filter(|(n, _)| n.starts_with(LM_PREFIX))
        .all(|(_, p)| p.frozen)
}

/// Re-runs `context ++ outputs` on the session's tape and returns the
/// quantities at the state before each output token. With a frozen base LM
/// its activations enter the tape as constants.
pub fn replay(
    s: &mut Session<'_>,
    context: &[usize],
    outputs: &[usize],
    heads: Heads,
) -> Result<Vec<ReplayStep>> {
    if context.is_empty() {
        return Err(invalid("replay needs a non-empty context"));
    }
    let mut seq = context.to_vec();
    seq.extend(outputs.iter().take(outputs.len().saturating_sub(1)));
    let first_out = context.len() - 1;
    let store = s.store();
    let frozen = lm_frozen(store);
    let base = if frozen {
        base_lm_values(store, &seq)?
    } else {
        vec![]
    };
    let mut st = s.initial_state();
    let mut out = Vec::with_capacity(outputs.len());
    for (j, &tok) in seq.iter().enumerate() {
        let (feat, base_logits) = if frozen {
            let (h, l) = &base[j];
            let h = s.tape.constant(Tensor::row(h.clone()));
            let l = s.tape.constant(Tensor::row(l.clone()));
            let (feat, adapter) = s.adapter_step(h, st.adapter)?;
            st.adapter = adapter;
            (feat, l)
        } else {
            let (vars, next) = s.step(tok, st)?;
            st = next;
            (vars.feat, vars.base_logits)
        };
        if j < first_out || outputs.is_empty() {
            continue;
        }
        let extra = s.adapter_logits(feat)?;
        let task_logits = s.tape.add(base_logits, extra)?;
        let task_logp = s.tape.log_softmax(task_logits)?;
        let base_logp = s.tape.log_softmax(base_logits)?;
        let base_logp = s.tape.stop_gradient(base_logp);
        let select_logp = if heads.selector {
            let z = s.selector_logits(feat)?;
            Some(s.tape.log_softmax(z)?)
        } else {
            None
        };
        let value = if heads.critic {
            Some(s.critic_value(feat)?)
        } else {
            None
        };
        out.push(ReplayStep {
            base_logp,
            task_logp,
            select_logp,
            value,
        });
    }
    Ok(out)
}

/// Base LM variant of [`replay`] that keeps base logits on the tape, for
/// pretraining.
pub fn replay_base(s: &mut Session<'_>, context: &[usize], outputs: &[usize]) -> Result<Vec<Var>> {
    if context.is_empty() {
        return Err(invalid("replay needs a non-empty context"));
    }
    let mut seq = context.to_vec();
    seq.extend(outputs.iter().take(outputs.len().saturating_sub(1)));
    let d = s.store().dims();
    let mut st = s.zero_lstm(d.hidden);
    let mut out = vec![];
    for (j, &tok) in seq.iter().enumerate() {
        let (_, logits, next) = s.base_step(tok, st)?;
        st = next;
        if j + 1 >= context.len() && !outputs.is_empty() {
            out.push(s.tape.log_softmax(logits)?);
        }
    }
    Ok(out)
}

fn pick(s: &mut Session<'_>, logp: Var, i: usize) -> Result<Var> {
    s.tape.slice(logp, i, 1)
}

fn cell(s: &mut Session<'_>, v: f64) -> Var {
    s.tape
        .constant(Tensor::new(vec![1, 1], vec![v]).expect("1x1"))
}

/// `sum_t w_t x_t` over `[1, 1]` nodes.
fn weighted_sum(s: &mut Session<'_>, terms: &[Var], weights: &[f64]) -> Result<Var> {
    if terms.is_empty() {
        let z = cell(s, 0.0);
        return s.tape.sum(z);
    }
    let row = s.tape.concat(terms)?;
    let w = s.tape.constant(Tensor::row(weights.to_vec()));
    let prod = s.tape.mul(row, w)?;
    s.tape.sum(prod)
}

fn check_adv(traj: &Trajectory, adv: &[f64]) -> Result<()> {
    if adv.len() != traj.len() {
        return Err(invalid(format!(
            "{} advantages for a trajectory of {} steps",
            adv.len(),
            traj.len()
        )));
    }
    Ok(())
}

fn fixed_selection(kind: PolicyKind) -> Result<Option<crate::policy::Distribution>> {
    match kind {
        PolicyKind::Stg => Ok(None),
        PolicyKind::Fixed { c } => Ok(Some(crate::policy::fixed_selector(c)?)),
        other => Err(invalid(format!(
            "selective loss needs recorded selections; got a {other} trajectory"
        ))),
    }
}

fn stg_from(
    s: &mut Session<'_>,
    steps: &[ReplayStep],
    traj: &Trajectory,
    adv: &[f64],
) -> Result<Var> {
    let fixed = fixed_selection(traj.kind)?;
    let mut terms = Vec::with_capacity(steps.len());
    for (rs, ts) in steps.iter().zip(&traj.steps) {
        let (i, a) = (ts.step.selection, ts.step.token);
        let sel = match (&fixed, rs.select_logp) {
            (Some(d), _) => cell(s, d.prob(i).max(PROB_FLOOR).ln()),
            (None, Some(l)) => pick(s, l, i)?,
            (None, None) => return Err(invalid("selector head missing from replay")),
        };
        let tok = if i == 0 {
            pick(s, rs.base_logp, a)?
        } else {
            pick(s, rs.task_logp, a)?
        };
        terms.push(s.tape.add(sel, tok)?);
    }
    let w: Vec<f64> = adv.iter().map(|a| -a).collect();
    weighted_sum(s, &terms, &w)
}

fn nonstg_from(
    s: &mut Session<'_>,
    steps: &[ReplayStep],
    traj: &Trajectory,
    adv: &[f64],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(steps.len());
    for (rs, ts) in steps.iter().zip(&traj.steps) {
        terms.push(pick(s, rs.task_logp, ts.step.token)?);
    }
    let w: Vec<f64> = adv.iter().map(|a| -a).collect();
    weighted_sum(s, &terms, &w)
}

fn critic_from(s: &mut Session<'_>, steps: &[ReplayStep], traj: &Trajectory) -> Result<Var> {
    let values: Vec<Var> = steps
        .iter()
        .map(|r| {
            r.value
                .ok_or_else(|| invalid("critic head missing from replay"))
        })
        .collect::<Result<_>>()?;
    let mut terms = Vec::with_capacity(values.len());
    for t in 0..values.len() {
        let target = match values.get(t + 1) {
            Some(&next) => {
                let d = s.tape.stop_gradient(next);
                let g = s.tape.scale(d, traj.gamma)?;
                let r = cell(s, traj.rewards[t]);
                s.tape.add(g, r)?
            }
            None => cell(s, traj.rewards[t]),
        };
        let diff = s.tape.sub(values[t], target)?;
        terms.push(s.tape.mul(diff, diff)?);
    }
    let n = terms.len().max(1) as f64;
    weighted_sum(s, &terms, &vec![1.0 / n; terms.len()])
}

fn entropy_from(s: &mut Session<'_>, steps: &[ReplayStep]) -> Result<Var> {
    let mut terms = Vec::with_capacity(steps.len());
    for rs in steps {
        let lp = rs
            .select_logp
            .ok_or_else(|| invalid("selector head missing from replay"))?;
        let p = s.tape.softmax(lp)?;
        let plp = s.tape.mul(p, lp)?;
        let ones = s.tape.constant(Tensor::filled(&[2, 1], 1.0));
        terms.push(s.tape.matmul(plp, ones)?);
    }
    let n = terms.len().max(1) as f64;
    weighted_sum(s, &terms, &vec![-1.0 / n; terms.len()])
}

/// Selective policy-gradient loss:
/// `-sum_t A_t (log pi_s(i_t) + [i_t = 0] sg(log pi_LM(a_t)) + [i_t = 1] log pi_a(a_t))`.
///
/// Fixed-selector trajectories use the constant selection log-probability.
pub fn stg_loss(s: &mut Session<'_>, traj: &Trajectory, adv: &[f64]) -> Result<Var> {
    check_adv(traj, adv)?;
    let heads = Heads {
        selector: fixed_selection(traj.kind)?.is_none(),
        critic: false,
    };
    let steps = replay(s, &traj.context, &traj.tokens(), heads)?;
    stg_from(s, &steps, traj, adv)
}

/// `-sum_t A_t log pi_a(a_t)`.
pub fn nonstg_rl_loss(s: &mut Session<'_>, traj: &Trajectory, adv: &[f64]) -> Result<Var> {
    check_adv(traj, adv)?;
    if traj.kind != PolicyKind::NonStg {
        return Err(invalid(format!(
            "non-selective loss on a {} trajectory",
            traj.kind
        )));
    }
    let steps = replay(s, &traj.context, &traj.tokens(), Heads::default())?;
    nonstg_from(s, &steps, traj, adv)
}

/// `mean_t (V(s_t) - (r_t + gamma sg(V(s_{t+1}))))^2` with `V(s_{T+1}) = 0`.
pub fn critic_loss(s: &mut Session<'_>, traj: &Trajectory) -> Result<Var> {
    let heads = Heads {
        selector: false,
        critic: true,
    };
    let steps = replay(s, &traj.context, &traj.tokens(), heads)?;
    critic_from(s, &steps, traj)
}

/// Mean entropy of the selector over a trajectory's states.
pub fn selector_entropy(s: &mut Session<'_>, traj: &Trajectory) -> Result<Var> {
    let heads = Heads {
        selector: true,
        critic: false,
    };
    let steps = replay(s, &traj.context, &traj.tokens(), heads)?;
    entropy_from(s, &steps)
}

/// Weights of the combined actor-critic objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub critic: f64,
    /// Bonus on selector entropy; subtracted from the loss.
    pub entropy: f64,
}

/// Policy loss plus weighted critic loss minus weighted selector entropy,
/// from a single replay.
pub fn rl_objective(
    s: &mut Session<'_>,
    traj: &Trajectory,
    adv: &[f64],
    w: ObjectiveWeights,
) -> Result<Var> {
    check_adv(traj, adv)?;
    let selective = traj.kind != PolicyKind::NonStg;
    let learned = selective && fixed_selection(traj.kind)?.is_none();
    let heads = Heads {
        selector: learned,
        critic: w.critic != 0.0,
    };
    let steps = replay(s, &traj.context, &traj.tokens(), heads)?;
    let mut loss = if selective {
        stg_from(s, &steps, traj, adv)?
    } else {
        nonstg_from(s, &steps, traj, adv)?
    };
    if w.critic != 0.0 {
        let c = critic_from(s, &steps, traj)?;
        let c = s.tape.scale(c, w.critic)?;
        loss = s.tape.add(loss, c)?;
    }
    if learned && w.entropy != 0.0 {
        let h = entropy_from(s, &steps)?;
        let h = s.tape.scale(h, w.entropy)?;
        loss = s.tape.sub(loss, h)?;
    }
    Ok(loss)
}

/// `-sum_t log pi_a(y_t)` under teacher forcing.
pub fn mle_loss(s: &mut Session<'_>, context: &[usize], target: &[usize]) -> Result<Var> {
    let steps = replay(s, context, target, Heads::default())?;
    let mut terms = Vec::with_capacity(steps.len());
    for (rs, &y) in steps.iter().zip(target) {
        terms.push(pick(s, rs.task_logp, y)?);
    }
    weighted_sum(s, &terms, &vec![-1.0; terms.len()])
}

/// `-sum_t log pi_h(y_t)` with `pi_h = pi_s(0) sg(pi_LM) + pi_s(1) pi_a`.
pub fn stg_mle_loss(s: &mut Session<'_>, context: &[usize], target: &[usize]) -> Result<Var> {
    let heads = Heads {
        selector: true,
        critic: false,
    };
    let steps = replay(s, context, target, heads)?;
    let mut terms = Vec::with_capacity(steps.len());
    for (rs, &y) in steps.iter().zip(target) {
        let sel = rs.select_logp.expect("selector head requested");
        let s0 = pick(s, sel, 0)?;
        let s1 = pick(s, sel, 1)?;
        let b = pick(s, rs.base_logp, y)?;
        let a = pick(s, rs.task_logp, y)?;
        let left = s.tape.add(s0, b)?;
        let right = s.tape.add(s1, a)?;
        terms.push(s.tape.log_add_exp(left, right)?);
    }
    weighted_sum(s, &terms, &vec![-1.0; terms.len()])
}

/// `-sum_t log pi_LM(y_t)`; used to pretrain the base LM.
pub fn lm_loss(s: &mut Session<'_>, context: &[usize], target: &[usize]) -> Result<Var> {
    let steps = replay_base(s, context, target)?;
    let mut terms = Vec::with_capacity(steps.len());
    for (&lp, &y) in steps.iter().zip(target) {
        terms.push(pick(s, lp, y)?);
    }
    weighted_sum(s, &terms, &vec![-1.0; terms.len()])
}

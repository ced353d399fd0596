use std::collections::HashMap;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::params::ParamStore;

/// Recurrent carry of an LSTM layer on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Carries of both recurrent layers after consuming a prefix.
#[derive(Clone, Copy, Debug)]
pub struct ModelState {
    pub lm: LstmState,
    pub adapter: LstmState,
}

/// Per-position quantities after consuming one token.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    /// Base LM representation `h_LM(s_t)`.
    pub h_lm: Var,
    /// `W_LM^T h_LM`.
    pub base_logits: Var,
    /// Adapter feature `g(h_LM)`.
    pub feat: Var,
    /// `W_LM^T h_LM + W_a^T g(h_LM)`.
    pub task_logits: Var,
}

/// A tape bound to a parameter snapshot. Parameters are added to the tape
/// lazily, once each.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let param = self
            .store
            .param(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let v = self.tape.param(name, param.tensor.clone(), !param.frozen);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn zero_lstm(&mut self, width: usize) -> LstmState {
        LstmState {
            h: self.tape.constant(Tensor::zeros(&[1, width])),
            c: self.tape.constant(Tensor::zeros(&[1, width])),
        }
    }

    pub fn initial_state(&mut self) -> ModelState {
        let d = self.store.dims();
        ModelState {
            lm: self.zero_lstm(d.hidden),
            adapter: self.zero_lstm(d.adapter),
        }
    }

    /// One LSTM step under parameter prefix `prefix` (gate order i, f, g, o).
    pub fn lstm_step(&mut self, prefix: &str, x: Var, st: LstmState) -> Result<LstmState> {
        let wx = self.p(&format!("{prefix}.wx"))?;
        let wh = self.p(&format!("{prefix}.wh"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let width = self.tape.value(wh).shape()[0];
        let t = &mut self.tape;
        let xw = t.matmul(x, wx)?;
        let hw = t.matmul(st.h, wh)?;
        let pre = t.add(xw, hw)?;
        let gates = t.add(pre, b)?;
        let i = t.slice(gates, 0, width)?;
        let f = t.slice(gates, width, width)?;
        let g = t.slice(gates, 2 * width, width)?;
        let o = t.slice(gates, 3 * width, width)?;
        let i = t.sigmoid(i)?;
        let f = t.sigmoid(f)?;
        let g = t.tanh(g)?;
        let o = t.sigmoid(o)?;
        let keep = t.mul(f, st.c)?;
        let write = t.mul(i, g)?;
        let c = t.add(keep, write)?;
        let tc = t.tanh(c)?;
        let h = t.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// Consumes `token` in the base LM: returns `(h_LM, base logits, carry)`.
    pub fn base_step(&mut self, token: usize, st: LstmState) -> Result<(Var, Var, LstmState)> {
        let vocab = self.store.dims().vocab;
        if token >= vocab {
            return Err(Error::TokenOutOfRange { id: token, vocab });
        }
        let embed = self.p("lm.embed")?;
        let x = self.tape.gather(embed, vec![token])?;
        let next = self.lstm_step("lm.lstm", x, st)?;
        let out = self.p("lm.out")?;
        let logits = self.tape.matmul(next.h, out)?;
        Ok((next.h, logits, next))
    }

    /// One adapter LSTM step over `h_LM`.
    pub fn adapter_step(&mut self, h_lm: Var, st: LstmState) -> Result<(Var, LstmState)> {
        let next = self.lstm_step("adapter.lstm", h_lm, st)?;
        Ok((next.h, next))
    }

    /// `W_a^T g`.
    pub fn adapter_logits(&mut self, feat: Var) -> Result<Var> {
        let wa = self.p("adapter.out")?;
        self.tape.matmul(feat, wa)
    }

    /// Consumes `token` through the base LM and the adapter.
    pub fn step(&mut self, token: usize, st: ModelState) -> Result<(StepVars, ModelState)> {
        let (h_lm, base_logits, lm) = self.base_step(token, st.lm)?;
        let (feat, adapter) = self.adapter_step(h_lm, st.adapter)?;
        let extra = self.adapter_logits(feat)?;
        let task_logits = self.tape.add(base_logits, extra)?;
        Ok((
            StepVars {
                h_lm,
                base_logits,
                feat,
                task_logits,
            },
            ModelState { lm, adapter },
        ))
    }

    /// Two-layer ReLU MLP producing the selector logits `[1, 2]`.
    ///
    /// Like the critic, the selector sees the adapter features as constants:
    /// the adapter only learns from steps where its own policy was chosen.
    pub fn selector_logits(&mut self, feat: Var) -> Result<Var> {
        let fixed = self.tape.stop_gradient(feat);
        self.mlp("selector", fixed)
    }

    /// Scalar state-value estimate `[1, 1]`.
    ///
    /// The critic reads the adapter features through a stop-gradient so its
    /// regression loss never moves the adapter.
    pub fn critic_value(&mut self, feat: Var) -> Result<Var> {
        let fixed = self.tape.stop_gradient(feat);
        self.mlp("critic", fixed)
    }

    fn mlp(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w1 = self.p(&format!("{prefix}.l1.w"))?;
        let b1 = self.p(&format!("{prefix}.l1.b"))?;
        let w2 = self.p(&format!("{prefix}.l2.w"))?;
        let b2 = self.p(&format!("{prefix}.l2.b"))?;
        let t = &mut self.tape;
        let z1 = t.matmul(x, w1)?;
        let z1 = t.add(z1, b1)?;
        let a1 = t.relu(z1)?;
        let z2 = t.matmul(a1, w2)?;
        t.add(z2, b2)
    }
}

/// Plain-value carry of the adapter LSTM, for incremental evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Carry {
    pub h: Tensor,
    pub c: Tensor,
}

/// Per-step hidden quantities of a token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTrace {
    pub h_lm: Vec<Tensor>,
    pub adapter: Vec<Tensor>,
    pub lm_carry: Vec<Carry>,
    pub adapter_carry: Vec<Carry>,
}

impl HiddenTrace {
    pub fn len(&self) -> usize {
        self.h_lm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h_lm.is_empty()
    }
}

/// Runs the base LM over `prefix`: per-position `h_LM` and base logits.
pub fn base_lm_forward(store: &ParamStore, prefix: &[usize]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    if prefix.is_empty() {
        return Err(crate::error::invalid(
            "base LM prefix must contain at least one token",
        ));
    }
    let mut s = Session::new(store);
    let mut st = s.zero_lstm(store.dims().hidden);
    let mut hs = Vec::with_capacity(prefix.len());
    let mut logits = Vec::with_capacity(prefix.len());
    for &tok in prefix {
        let (h, l, next) = s.base_step(tok, st)?;
        hs.push(s.value(h).clone());
        logits.push(s.value(l).clone());
        st = next;
    }
    Ok((hs, logits))
}

/// Runs the adapter LSTM over a full `h_LM` sequence from a zero carry.
pub fn adapter_forward(store: &ParamStore, h_lm: &[Tensor]) -> Result<Vec<Tensor>> {
    if h_lm.is_empty() {
        return Err(crate::error::invalid("adapter input sequence is empty"));
    }
    let d = store.dims();
    let mut s = Session::new(store);
    let mut st = s.zero_lstm(d.adapter);
    let mut out = Vec::with_capacity(h_lm.len());
    for h in h_lm {
        check_width("adapter", h, d.hidden)?;
        let x = s.tape.constant(h.clone());
        let (g, next) = s.adapter_step(x, st)?;
        out.push(s.value(g).clone());
        st = next;
    }
    Ok(out)
}

/// Zero carry for [`adapter_step_values`].
pub fn adapter_zero_carry(store: &ParamStore) -> Carry {
    let w = store.dims().adapter;
    Carry {
        h: Tensor::zeros(&[1, w]),
        c: Tensor::zeros(&[1, w]),
    }
}

/// Single adapter step from an explicit carry.
pub fn adapter_step_values(
    store: &ParamStore,
    h_lm: &Tensor,
    carry: &Carry,
) -> Result<(Tensor, Carry)> {
    check_width("adapter", h_lm, store.dims().hidden)?;
    let mut s = Session::new(store);
    let x = s.tape.constant(h_lm.clone());
    let st = LstmState {
        h: s.tape.constant(carry.h.clone()),
        c: s.tape.constant(carry.c.clone()),
    };
    let (g, next) = s.adapter_step(x, st)?;
    let carry = Carry {
        h: s.value(next.h).clone(),
        c: s.value(next.c).clone(),
    };
    Ok((s.value(g).clone(), carry))
}

/// Selector logits for one adapter feature vector.
pub fn selector_head(store: &ParamStore, feat: &Tensor) -> Result<[f64; 2]> {
    check_width("selector", feat, store.dims().adapter)?;
    let z = super::cursor::mlp_values(store, "selector", feat.data())?;
    Ok([z[0], z[1]])
}

/// Critic estimate for one adapter feature vector.
pub fn critic_head(store: &ParamStore, feat: &Tensor) -> Result<f64> {
    check_width("critic", feat, store.dims().adapter)?;
    Ok(super::cursor::mlp_values(store, "critic", feat.data())?[0])
}

/// Full hidden trace of a token sequence through base LM and adapter.
pub fn trace(store: &ParamStore, tokens: &[usize]) -> Result<HiddenTrace> {
    if tokens.is_empty() {
        return Err(crate::error::invalid("cannot trace an empty sequence"));
    }
    let mut s = Session::new(store);
    let mut st = s.initial_state();
    let mut out = HiddenTrace {
        h_lm: vec![],
        adapter: vec![],
        lm_carry: vec![],
        adapter_carry: vec![],
    };
    for &tok in tokens {
        let (vars, next) = s.step(tok, st)?;
        out.h_lm.push(s.value(vars.h_lm).clone());
        out.adapter.push(s.value(vars.feat).clone());
        out.lm_carry.push(Carry {
            h: s.value(next.lm.h).clone(),
            c: s.value(next.lm.c).clone(),
        });
        out.adapter_carry.push(Carry {
            h: s.value(next.adapter.h).clone(),
            c: s.value(next.adapter.c).clone(),
        });
        st = next;
    }
    Ok(out)
}

fn check_width(what: &'static str, t: &Tensor, width: usize) -> Result<()> {
    if t.shape() != [1, width] {
        return Err(Error::Shape {
            op: what,
            lhs: t.shape().to_vec(),
            rhs: vec![1, width],
        });
    }
    Ok(())
}

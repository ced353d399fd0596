use crate::autodiff::{matmul, Tensor};
use crate::error::{Error, Result};

use super::params::ParamStore;

/// Plain-value quantities after consuming one token.
#[derive(Clone, Debug, PartialEq)]
pub struct StepValues {
    pub h_lm: Vec<f64>,
    pub base_logits: Vec<f64>,
    pub feat: Vec<f64>,
    pub task_logits: Vec<f64>,
}

/// Incremental forward pass without a tape, for sampling and decoding.
#[derive(Clone, Debug)]
pub struct Cursor<'a> {
    store: &'a ParamStore,
    lm: (Vec<f64>, Vec<f64>),
    adapter: (Vec<f64>, Vec<f64>),
    last: Option<StepValues>,
    consumed: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn lstm(
    store: &ParamStore,
    prefix: &str,
    x: &[f64],
    carry: &mut (Vec<f64>, Vec<f64>),
) -> Result<()> {
    let wx = store.get(&format!("{prefix}.wx"))?;
    let wh = store.get(&format!("{prefix}.wh"))?;
    let b = store.get(&format!("{prefix}.b"))?;
    let width = wh.shape()[0];
    let mut gates = matmul(x, wx.data(), 1, x.len(), 4 * width);
    let hw = matmul(&carry.0, wh.data(), 1, width, 4 * width);
    for ((g, h), b) in gates.iter_mut().zip(&hw).zip(b.data()) {
        *g += h + b;
    }
    for j in 0..width {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[width + j]);
        let g = gates[2 * width + j].tanh();
        let o = sigmoid(gates[3 * width + j]);
        let c = f * carry.1[j] + i * g;
        carry.1[j] = c;
        carry.0[j] = o * c.tanh();
    }
    Ok(())
}

/// Two-layer ReLU MLP over a feature row.
pub fn mlp_values(store: &ParamStore, prefix: &str, x: &[f64]) -> Result<Vec<f64>> {
    let w1 = store.get(&format!("{prefix}.l1.w"))?;
    let b1 = store.get(&format!("{prefix}.l1.b"))?;
    let w2 = store.get(&format!("{prefix}.l2.w"))?;
    let b2 = store.get(&format!("{prefix}.l2.b"))?;
    if w1.shape()[0] != x.len() {
        return Err(Error::Shape {
            op: "mlp",
            lhs: vec![1, x.len()],
            rhs: w1.shape().to_vec(),
        });
    }
    let hidden = w1.shape()[1];
    let mut a = matmul(x, w1.data(), 1, x.len(), hidden);
    for (v, b) in a.iter_mut().zip(b1.data()) {
        *v = (*v + b).max(0.0);
    }
    let out = w2.shape()[1];
    let mut z = matmul(&a, w2.data(), 1, hidden, out);
    for (v, b) in z.iter_mut().zip(b2.data()) {
        *v += b;
    }
    Ok(z)
}

impl<'a> Cursor<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        let d = store.dims();
        Self {
            store,
            lm: (vec![0.0; d.hidden], vec![0.0; d.hidden]),
            adapter: (vec![0.0; d.adapter], vec![0.0; d.adapter]),
            last: None,
            consumed: 0,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Number of tokens consumed so far.
    pub fn consumed(&self) -> usize {
        self.consumed
    }

    /// Consumes one token through the base LM and the adapter.
    pub fn feed(&mut self, token: usize) -> Result<&StepValues> {
        let d = self.store.dims();
        if token >= d.vocab {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab: d.vocab,
            });
        }
        let embed = self.store.get("lm.embed")?;
        let x = &embed.data()[token * d.embed..(token + 1) * d.embed];
        lstm(self.store, "lm.lstm", x, &mut self.lm)?;
        let h_lm = self.lm.0.clone();
        let base_logits = matmul(
            &h_lm,
            self.store.get("lm.out")?.data(),
            1,
            d.hidden,
            d.vocab,
        );
        lstm(self.store, "adapter.lstm", &h_lm, &mut self.adapter)?;
        let feat = self.adapter.0.clone();
        let extra = matmul(
            &feat,
            self.store.get("adapter.out")?.data(),
            1,
            d.adapter,
            d.vocab,
        );
        let task_logits = base_logits.iter().zip(&extra).map(|(a, b)| a + b).collect();
        self.consumed += 1;
        Ok(self.last.insert(StepValues {
            h_lm,
            base_logits,
            feat,
            task_logits,
        }))
    }

    pub fn feed_all(&mut self, tokens: &[usize]) -> Result<()> {
        for &t in tokens {
            self.feed(t)?;
        }
        Ok(())
    }

    /// Quantities at the current state; `None` before the first token.
    pub fn current(&self) -> Option<&StepValues> {
        self.last.as_ref()
    }

    fn current_or_err(&self) -> Result<&StepValues> {
        self.last
            .as_ref()
            .ok_or_else(|| crate::error::invalid("no token consumed yet"))
    }

    pub fn selector_logits(&self) -> Result<[f64; 2]> {
        let z = mlp_values(self.store, "selector", &self.current_or_err()?.feat)?;
        Ok([z[0], z[1]])
    }

    pub fn critic(&self) -> Result<f64> {
        Ok(mlp_values(self.store, "critic", &self.current_or_err()?.feat)?[0])
    }

    pub fn lm_carry(&self) -> (Tensor, Tensor) {
        (
            Tensor::row(self.lm.0.clone()),
            Tensor::row(self.lm.1.clone()),
        )
    }
}

/// `(h_LM, base logits)` at every position of `tokens`, without a tape.
pub fn base_lm_values(store: &ParamStore, tokens: &[usize]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let d = store.dims();
    let embed = store.get("lm.embed")?;
    let out = store.get("lm.out")?;
    let mut carry = (vec![0.0; d.hidden], vec![0.0; d.hidden]);
    let mut res = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        if tok >= d.vocab {
            return Err(Error::TokenOutOfRange {
                id: tok,
                vocab: d.vocab,
            });
        }
        lstm(
            store,
            "lm.lstm",
            &embed.data()[tok * d.embed..(tok + 1) * d.embed],
            &mut carry,
        )?;
        let logits = matmul(&carry.0, out.data(), 1, d.hidden, d.vocab);
        res.push((carry.0.clone(), logits));
    }
    Ok(res)
}

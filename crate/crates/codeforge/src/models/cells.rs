//! Recurrent cells: LSTM, GRU, and the plain tanh RNN.
//!
//! One cell owns the parameters of one layer. Input and hidden
//! transforms are fused per gate group: `wx` is `[input, gates*hidden]`,
//! `wh` is `[hidden, gates*hidden]`, with separate input/hidden biases so
//! the GRU candidate gate can scale its hidden term by the reset gate.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numeric::{Float, Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
    Rnn,
}

impl CellKind {
    pub fn gate_count(self) -> usize {
        match self {
            CellKind::Lstm => 4, // i, f, g, o
            CellKind::Gru => 3,  // r, z, n
            CellKind::Rnn => 1,
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            "rnn" => Ok(CellKind::Rnn),
            other => Err(crate::error::Error::Config(format!(
                "unknown cell kind {other:?} (expected lstm, gru, or rnn)"
            ))),
        }
    }
}

/// Per-layer recurrent state.
#[derive(Debug, Clone)]
pub enum CellState<T: Float> {
    Lstm { h: Tensor<T>, c: Tensor<T> },
    Single { h: Tensor<T> },
}

impl<T: Float> CellState<T> {
    pub fn hidden(&self) -> &Tensor<T> {
        match self {
            CellState::Lstm { h, .. } => h,
            CellState::Single { h } => h,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RecurrentCell<T: Float> {
    pub kind: CellKind,
    pub hidden: usize,
    pub input: usize,
    pub wx: Tensor<T>,
    pub wh: Tensor<T>,
    pub bx: Tensor<T>,
    pub bh: Tensor<T>,
}

impl<T: Float> RecurrentCell<T> {
    /// Fresh cell with fan-in-scaled normal weights (std `1/sqrt(fan_in)`)
    /// and zero biases; the LSTM forget-gate input bias starts at 1.
    /// Recurrent nets need the fan-in scaling to move at all at small
    /// step budgets; a flat 0.02 leaves the deeper layer silent.
    pub fn init(kind: CellKind, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let gates = kind.gate_count();
        let wx = Tensor::rand_normal(&[input, gates * hidden], 1.0 / (input as f64).sqrt(), rng).trainable();
        let wh = Tensor::rand_normal(&[hidden, gates * hidden], 1.0 / (hidden as f64).sqrt(), rng).trainable();
        let mut bx_data = vec![T::ZERO; gates * hidden];
        if kind == CellKind::Lstm {
            for x in bx_data[hidden..2 * hidden].iter_mut() {
                *x = T::ONE;
            }
        }
        let bx = Tensor::new(&[gates * hidden], bx_data).unwrap().trainable();
        let bh = Tensor::zeros(&[gates * hidden]).trainable();
        RecurrentCell {
            kind,
            hidden,
            input,
            wx,
            wh,
            bx,
            bh,
        }
    }

    pub fn zero_state(&self, batch: usize) -> CellState<T> {
        match self.kind {
            CellKind::Lstm => CellState::Lstm {
                h: Tensor::zeros(&[batch, self.hidden]),
                c: Tensor::zeros(&[batch, self.hidden]),
            },
            _ => CellState::Single {
                h: Tensor::zeros(&[batch, self.hidden]),
            },
        }
    }

    /// One step with a dense input `[batch, input]`.
    pub fn step(&self, x: &Tensor<T>, state: &CellState<T>) -> Result<CellState<T>> {
        let xg = x.matmul(&self.wx)?.broadcast_add(&self.bx)?;
        self.step_gates(&xg, state)
    }

    /// One step with a one-hot input given as ids: row `b` of the input
    /// is the `ids[b]`-th basis vector, so the input transform is a table
    /// row gather.
    pub fn step_ids(&self, ids: &[u32], state: &CellState<T>) -> Result<CellState<T>> {
        let xg = self.wx.embedding_lookup(ids)?.broadcast_add(&self.bx)?;
        self.step_gates(&xg, state)
    }

    fn step_gates(&self, xg: &Tensor<T>, state: &CellState<T>) -> Result<CellState<T>> {
        let hidden = self.hidden;
        let h_prev = state.hidden();
        let hg = h_prev.matmul(&self.wh)?.broadcast_add(&self.bh)?;
        match self.kind {
            CellKind::Lstm => {
                let CellState::Lstm { c: c_prev, .. } = state else {
                    return Err(crate::error::Error::Invalid("LSTM step on non-LSTM state".into()));
                };
                let gates = xg.add(&hg)?;
                let i = gates.slice(1, 0, hidden)?.sigmoid();
                let f = gates.slice(1, hidden, hidden)?.sigmoid();
                let g = gates.slice(1, 2 * hidden, hidden)?.tanh();
                let o = gates.slice(1, 3 * hidden, hidden)?.sigmoid();
                let c = f.mul(c_prev)?.add(&i.mul(&g)?)?;
                let h = o.mul(&c.tanh())?;
                Ok(CellState::Lstm { h, c })
            }
            CellKind::Gru => {
                let r = xg
                    .slice(1, 0, hidden)?
                    .add(&hg.slice(1, 0, hidden)?)?
                    .sigmoid();
                let z = xg
                    .slice(1, hidden, hidden)?
                    .add(&hg.slice(1, hidden, hidden)?)?
                    .sigmoid();
                let n = xg
                    .slice(1, 2 * hidden, hidden)?
                    .add(&r.mul(&hg.slice(1, 2 * hidden, hidden)?)?)?
                    .tanh();
                // h' = (1 - z) * n + z * h
                let keep = z.mul(h_prev)?;
                let update = n.add(&z.mul(&n)?.scale(-1.0))?;
                Ok(CellState::Single {
                    h: update.add(&keep)?,
                })
            }
            CellKind::Rnn => Ok(CellState::Single {
                h: xg.add(&hg)?.tanh(),
            }),
        }
    }

    pub fn parameters(&self, prefix: &str) -> Vec<Parameter<T>> {
        vec![
            Parameter {
                name: format!("{prefix}.wx"),
                tensor: self.wx.clone(),
                trainable: true,
            },
            Parameter {
                name: format!("{prefix}.wh"),
                tensor: self.wh.clone(),
                trainable: true,
            },
            Parameter {
                name: format!("{prefix}.bx"),
                tensor: self.bx.clone(),
                trainable: true,
            },
            Parameter {
                name: format!("{prefix}.bh"),
                tensor: self.bh.clone(),
                trainable: true,
            },
        ]
    }
}

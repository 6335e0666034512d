//! Character-level recurrent language model.
//!
//! Inputs are 1-of-k character ids; the first layer's input transform is
//! a row gather of its weight matrix, which is exactly the one-hot
//! multiply. Logits at step `t` depend only on inputs up to `t`
//! (many-to-many causality via the recurrence).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::cells::{CellKind, CellState, RecurrentCell};
use crate::models::{validate_ids, LanguageModel};
use crate::numeric::{Float, Parameter, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecurrentLmConfig {
    pub cell: CellKind,
    pub hidden: usize,
    pub layers: usize,
    pub vocab: usize,
    pub dropout: f64,
}

impl RecurrentLmConfig {
    /// Hidden size 128, two LSTM layers: the sweep's best configuration.
    pub fn default_for_vocab(vocab: usize) -> Self {
        RecurrentLmConfig {
            cell: CellKind::Lstm,
            hidden: 128,
            layers: 2,
            vocab,
            dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RecurrentLm<T: Float = f32> {
    pub config: RecurrentLmConfig,
    cells: Vec<RecurrentCell<T>>,
    w_out: Tensor<T>,
    b_out: Tensor<T>,
}

impl<T: Float> RecurrentLm<T> {
    pub fn init(config: RecurrentLmConfig, seed: u64) -> Result<Self> {
        if config.vocab == 0 || config.hidden == 0 || config.layers == 0 {
            return Err(Error::Config(format!(
                "recurrent LM needs positive vocab/hidden/layers, got {config:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cells = Vec::with_capacity(config.layers);
        for layer in 0..config.layers {
            let input = if layer == 0 { config.vocab } else { config.hidden };
            cells.push(RecurrentCell::init(config.cell, input, config.hidden, &mut rng));
        }
        let w_out =
            Tensor::rand_normal(&[config.hidden, config.vocab], 1.0 / (config.hidden as f64).sqrt(), &mut rng)
                .trainable();
        let b_out = Tensor::zeros(&[config.vocab]).trainable();
        Ok(RecurrentLm {
            config,
            cells,
            w_out,
            b_out,
        })
    }

    fn forward_impl(
        &self,
        ids: &[u32],
        batch: usize,
        seq: usize,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<T>> {
        validate_ids(ids, batch, seq, self.config.vocab)?;
        let mut states: Vec<CellState<T>> = self.cells.iter().map(|c| c.zero_state(batch)).collect();
        let mut step_logits: Vec<Tensor<T>> = Vec::with_capacity(seq);

        let mut ids_t = vec![0u32; batch];
        for t in 0..seq {
            for b in 0..batch {
                ids_t[b] = ids[b * seq + t];
            }
            let mut x: Option<Tensor<T>> = None;
            for (layer, cell) in self.cells.iter().enumerate() {
                let new_state = match &x {
                    None => cell.step_ids(&ids_t, &states[layer])?,
                    Some(input) => cell.step(input, &states[layer])?,
                };
                let mut h = new_state.hidden().clone();
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    if self.config.dropout > 0.0 && layer + 1 < self.cells.len() {
                        h = h.dropout(self.config.dropout, true, rng)?;
                    }
                }
                x = Some(h);
                states[layer] = new_state;
            }
            let logits_t = x
                .expect("at least one layer")
                .matmul(&self.w_out)?
                .broadcast_add(&self.b_out)?;
            step_logits.push(logits_t.reshape(&[batch, 1, self.config.vocab])?);
        }
        Tensor::concat(&step_logits, 1)
    }

    pub fn forward_t(&self, ids: &[u32], batch: usize, seq: usize) -> Result<Tensor<T>> {
        self.forward_impl(ids, batch, seq, None)
    }

    pub fn params_t(&self) -> Vec<Parameter<T>> {
        let mut params = Vec::new();
        for (layer, cell) in self.cells.iter().enumerate() {
            params.extend(cell.parameters(&format!("cells.{layer}")));
        }
        params.push(Parameter {
            name: "out.w".into(),
            tensor: self.w_out.clone(),
            trainable: true,
        });
        params.push(Parameter {
            name: "out.b".into(),
            tensor: self.b_out.clone(),
            trainable: true,
        });
        params
    }
}

impl RecurrentLm<f32> {
    /// Rebuilds a model from checkpoint tensors.
    pub fn from_tensors(config: RecurrentLmConfig, tensors: &[(String, Tensor<f32>)]) -> Result<Self> {
        let model = RecurrentLm::init(config, 0)?;
        crate::models::load_named(&model.parameters(), tensors)?;
        Ok(model)
    }
}

impl LanguageModel for RecurrentLm<f32> {
    fn vocab_size(&self) -> usize {
        self.config.vocab
    }

    fn context_limit(&self) -> Option<usize> {
        None
    }

    fn forward(&self, ids: &[u32], batch: usize, seq: usize) -> Result<Tensor<f32>> {
        self.forward_impl(ids, batch, seq, None)
    }

    fn forward_train(
        &self,
        ids: &[u32],
        batch: usize,
        seq: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<f32>> {
        self.forward_impl(ids, batch, seq, Some(rng))
    }

    fn parameters(&self) -> Vec<Parameter<f32>> {
        self.params_t()
    }

    fn arch_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(&self.config).expect("config serializes");
        v["kind"] = serde_json::Value::from("char_rnn");
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(cell: CellKind, vocab: usize, hidden: usize, layers: usize) -> RecurrentLm<f32> {
        RecurrentLm::init(
            RecurrentLmConfig {
                cell,
                hidden,
                layers,
                vocab,
                dropout: 0.0,
            },
            13,
        )
        .unwrap()
    }

    #[test]
    fn logits_shape_is_batch_seq_vocab() {
        let lm = tiny(CellKind::Lstm, 7, 4, 2);
        let logits = lm.forward(&[0, 1, 2, 3, 4, 5], 2, 3).unwrap();
        assert_eq!(logits.shape(), vec![2, 3, 7]);
    }

    #[test]
    fn perturbing_last_position_leaves_earlier_logits_bit_identical() {
        for cell in [CellKind::Lstm, CellKind::Gru, CellKind::Rnn] {
            let lm = tiny(cell, 5, 6, 2);
            let base = lm.forward(&[1, 2, 3, 4], 1, 4).unwrap().to_vec();
            let perturbed = lm.forward(&[1, 2, 3, 0], 1, 4).unwrap().to_vec();
            // positions 0..3 occupy the first 3 * vocab entries
            assert_eq!(base[..3 * 5], perturbed[..3 * 5], "{cell:?}");
            assert_ne!(base[3 * 5..], perturbed[3 * 5..], "{cell:?}");
        }
    }

    #[test]
    fn out_of_range_id_is_error() {
        let lm = tiny(CellKind::Gru, 4, 3, 1);
        assert!(lm.forward(&[0, 4], 1, 2).is_err());
    }

    /// Scalar oracle for a 1-layer LSTM with hidden 2 on a single step:
    /// logits = h @ w_out + b_out after one hand-stepped LSTM update.
    #[test]
    fn single_step_logits_match_scalar_lstm_oracle() {
        let mut lm: RecurrentLm<f64> = RecurrentLm::init(
            RecurrentLmConfig {
                cell: CellKind::Lstm,
                hidden: 2,
                layers: 1,
                vocab: 3,
                dropout: 0.0,
            },
            0,
        )
        .unwrap();
        let wx: Vec<f64> = (0..24).map(|i| 0.02 * (i as f64 - 12.0)).collect();
        let wh: Vec<f64> = (0..16).map(|i| 0.03 * (i as f64 - 8.0)).collect();
        let bx: Vec<f64> = (0..8).map(|i| 0.01 * i as f64).collect();
        let wo: Vec<f64> = (0..6).map(|i| 0.1 * (i as f64 - 3.0)).collect();
        let bo = vec![0.05, -0.05, 0.1];
        lm.cells[0].wx = Tensor::new(&[3, 8], wx.clone()).unwrap().trainable();
        lm.cells[0].wh = Tensor::new(&[2, 8], wh.clone()).unwrap().trainable();
        lm.cells[0].bx = Tensor::new(&[8], bx.clone()).unwrap().trainable();
        lm.cells[0].bh = Tensor::zeros(&[8]).trainable();
        lm.w_out = Tensor::new(&[2, 3], wo.clone()).unwrap().trainable();
        lm.b_out = Tensor::new(&[3], bo.clone()).unwrap().trainable();

        let id = 1usize;
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        // one-hot input selects row `id` of wx
        let pre: Vec<f64> = (0..8).map(|g| wx[id * 8 + g] + bx[g]).collect();
        let mut h = [0.0f64; 2];
        for j in 0..2 {
            let i_g = sigmoid(pre[j]);
            let f_g = sigmoid(pre[2 + j]);
            let g_g = pre[4 + j].tanh();
            let o_g = sigmoid(pre[6 + j]);
            let c = f_g * 0.0 + i_g * g_g;
            h[j] = o_g * c.tanh();
        }
        let expected: Vec<f64> = (0..3)
            .map(|v| h[0] * wo[v] + h[1] * wo[3 + v] + bo[v])
            .collect();

        let logits = lm.forward_t(&[id as u32], 1, 1).unwrap().to_vec();
        for (g, e) in logits.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{logits:?} vs {expected:?}");
        }
    }
}

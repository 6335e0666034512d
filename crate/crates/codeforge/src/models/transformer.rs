//! Decoder-only transformer language model, GPT-2 shaped: learned
//! positional embeddings, pre-norm blocks, fused qkv projection, and an
//! optionally tied output head. Every attention layer applies a strict
//! causal mask; pre-softmax scores are scaled by 1/sqrt(head width).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{validate_ids, LanguageModel};
use crate::numeric::{Float, Parameter, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffw: usize,
    pub context: usize,
    pub vocab: usize,
    pub tie_embeddings: bool,
    pub dropout: f64,
}

impl TransformerConfig {
    /// Desk-scale default: small enough to train on one CPU core.
    pub fn desk_default(vocab: usize) -> Self {
        TransformerConfig {
            layers: 2,
            heads: 4,
            width: 128,
            ffw: 512,
            context: 256,
            vocab,
            tie_embeddings: true,
            dropout: 0.0,
        }
    }

    /// The GPT-2 small shape. Constructible for parameter accounting;
    /// far beyond desk-scale training.
    pub fn reference_gpt2() -> Self {
        TransformerConfig {
            layers: 12,
            heads: 12,
            width: 768,
            ffw: 3072,
            context: 1024,
            vocab: 50257,
            tie_embeddings: true,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} must be divisible by head count {}",
                self.width, self.heads
            )));
        }
        if self.layers == 0 || self.vocab == 0 || self.context == 0 {
            return Err(Error::Config("transformer dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Analytic trainable-parameter count for this configuration.
    /// Cross-checked against an instantiated model in the tests.
    pub fn param_count(&self) -> u64 {
        let (v, d, f, ctx, l) = (
            self.vocab as u64,
            self.width as u64,
            self.ffw as u64,
            self.context as u64,
            self.layers as u64,
        );
        let embeddings = v * d + ctx * d;
        let per_layer = (2 * d)            // ln1
            + (d * 3 * d + 3 * d)          // fused qkv
            + (d * d + d)                  // attention output projection
            + (2 * d)                      // ln2
            + (d * f + f)                  // mlp up
            + (f * d + d);                 // mlp down
        let head = if self.tie_embeddings { 0 } else { v * d };
        embeddings + l * per_layer + 2 * d + head
    }
}

#[derive(Debug, Clone)]
struct Block<T: Float> {
    ln1_g: Tensor<T>,
    ln1_b: Tensor<T>,
    w_attn: Tensor<T>,
    b_attn: Tensor<T>,
    w_proj: Tensor<T>,
    b_proj: Tensor<T>,
    ln2_g: Tensor<T>,
    ln2_b: Tensor<T>,
    w_fc: Tensor<T>,
    b_fc: Tensor<T>,
    w_out: Tensor<T>,
    b_out: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct TransformerLm<T: Float = f32> {
    pub config: TransformerConfig,
    wte: Tensor<T>,
    wpe: Tensor<T>,
    blocks: Vec<Block<T>>,
    lnf_g: Tensor<T>,
    lnf_b: Tensor<T>,
    lm_head: Option<Tensor<T>>,
}

impl<T: Float> TransformerLm<T> {
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width;
        let wte = Tensor::rand_uniform(&[config.vocab, d], -0.05, 0.05, &mut rng).trainable();
        let wpe = Tensor::rand_uniform(&[config.context, d], -0.05, 0.05, &mut rng).trainable();
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            blocks.push(Block {
                ln1_g: Tensor::full(&[d], T::ONE).trainable(),
                ln1_b: Tensor::zeros(&[d]).trainable(),
                w_attn: Tensor::rand_normal(&[d, 3 * d], 0.02, &mut rng).trainable(),
                b_attn: Tensor::zeros(&[3 * d]).trainable(),
                w_proj: Tensor::rand_normal(&[d, d], 0.02, &mut rng).trainable(),
                b_proj: Tensor::zeros(&[d]).trainable(),
                ln2_g: Tensor::full(&[d], T::ONE).trainable(),
                ln2_b: Tensor::zeros(&[d]).trainable(),
                w_fc: Tensor::rand_normal(&[d, config.ffw], 0.02, &mut rng).trainable(),
                b_fc: Tensor::zeros(&[config.ffw]).trainable(),
                w_out: Tensor::rand_normal(&[config.ffw, d], 0.02, &mut rng).trainable(),
                b_out: Tensor::zeros(&[d]).trainable(),
            });
        }
        let lnf_g = Tensor::full(&[d], T::ONE).trainable();
        let lnf_b = Tensor::zeros(&[d]).trainable();
        let lm_head = if config.tie_embeddings {
            None
        } else {
            Some(Tensor::rand_normal(&[config.vocab, d], 0.02, &mut rng).trainable())
        };
        Ok(TransformerLm {
            config,
            wte,
            wpe,
            blocks,
            lnf_g,
            lnf_b,
            lm_head,
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
        if seq > self.config.context {
            return Err(Error::Invalid(format!(
                "sequence length {} exceeds context length {}",
                seq, self.config.context
            )));
        }
        let d = self.config.width;
        let heads = self.config.heads;
        let hd = d / heads;
        let (keep_mask, neg_mask) = causal_masks::<T>(seq);

        let pos_ids: Vec<u32> = (0..seq as u32).collect();
        let pos_emb = self.wpe.embedding_lookup(&pos_ids)?; // [seq, d]

        let mut per_batch = Vec::with_capacity(batch);
        for b in 0..batch {
            let row_ids = &ids[b * seq..(b + 1) * seq];
            let mut x = self.wte.embedding_lookup(row_ids)?.add(&pos_emb)?; // [seq, d]

            for block in &self.blocks {
                let h = x.layer_norm(&block.ln1_g, &block.ln1_b, 1e-5)?;
                let qkv = h.matmul(&block.w_attn)?.broadcast_add(&block.b_attn)?; // [seq, 3d]
                let q = qkv.slice(1, 0, d)?;
                let k = qkv.slice(1, d, d)?;
                let v = qkv.slice(1, 2 * d, d)?;

                let mut head_outs = Vec::with_capacity(heads);
                for head in 0..heads {
                    let qh = q.slice(1, head * hd, hd)?;
                    let kh = k.slice(1, head * hd, hd)?;
                    let vh = v.slice(1, head * hd, hd)?;
                    let weights = causal_attention_weights(&qh, &kh, &keep_mask, &neg_mask)?;
                    head_outs.push(weights.matmul(&vh)?); // [seq, hd]
                }
                let mut attn = Tensor::concat(&head_outs, 1)?
                    .matmul(&block.w_proj)?
                    .broadcast_add(&block.b_proj)?;
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    attn = attn.dropout(self.config.dropout, true, rng)?;
                }
                x = x.add(&attn)?;

                let h2 = x.layer_norm(&block.ln2_g, &block.ln2_b, 1e-5)?;
                let mut mlp = h2
                    .matmul(&block.w_fc)?
                    .broadcast_add(&block.b_fc)?
                    .relu()
                    .matmul(&block.w_out)?
                    .broadcast_add(&block.b_out)?;
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    mlp = mlp.dropout(self.config.dropout, true, rng)?;
                }
                x = x.add(&mlp)?;
            }
            per_batch.push(x);
        }

        let x = Tensor::concat(&per_batch, 0)?; // [batch*seq, d]
        let x = x.layer_norm(&self.lnf_g, &self.lnf_b, 1e-5)?;
        let logits = match &self.lm_head {
            Some(head) => x.matmul(&head.transpose()?)?,
            None => x.matmul(&self.wte.transpose()?)?,
        };
        logits.reshape(&[batch, seq, self.config.vocab])
    }

    pub fn forward_t(&self, ids: &[u32], batch: usize, seq: usize) -> Result<Tensor<T>> {
        self.forward_impl(ids, batch, seq, None)
    }

    pub fn params_t(&self) -> Vec<Parameter<T>> {
        let mut params = vec![
            Parameter {
                name: "wte".into(),
                tensor: self.wte.clone(),
                trainable: true,
            },
            Parameter {
                name: "wpe".into(),
                tensor: self.wpe.clone(),
                trainable: true,
            },
        ];
        for (i, block) in self.blocks.iter().enumerate() {
            let named = [
                ("ln1.g", &block.ln1_g),
                ("ln1.b", &block.ln1_b),
                ("attn.w", &block.w_attn),
                ("attn.b", &block.b_attn),
                ("proj.w", &block.w_proj),
                ("proj.b", &block.b_proj),
                ("ln2.g", &block.ln2_g),
                ("ln2.b", &block.ln2_b),
                ("fc.w", &block.w_fc),
                ("fc.b", &block.b_fc),
                ("fcout.w", &block.w_out),
                ("fcout.b", &block.b_out),
            ];
            for (suffix, tensor) in named {
                params.push(Parameter {
                    name: format!("h{i}.{suffix}"),
                    tensor: (*tensor).clone(),
                    trainable: true,
                });
            }
        }
        params.push(Parameter {
            name: "lnf.g".into(),
            tensor: self.lnf_g.clone(),
            trainable: true,
        });
        params.push(Parameter {
            name: "lnf.b".into(),
            tensor: self.lnf_b.clone(),
            trainable: true,
        });
        if let Some(head) = &self.lm_head {
            params.push(Parameter {
                name: "lm_head".into(),
                tensor: head.clone(),
                trainable: true,
            });
        }
        params
    }
}

/// Masked, scaled attention weights for one head: softmax over keys of
/// `q @ k^T / sqrt(hd)` with strictly-upper entries forced to -1e30
/// before the softmax. The mask multiplies scores by zero before adding
/// the large negative, so masked logits are bit-exact constants and
/// future tokens cannot leak even at the last mantissa bit.
fn causal_attention_weights<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    keep_mask: &Tensor<T>,
    neg_mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    let hd = q.shape()[1];
    let scale = 1.0 / (hd as f64).sqrt();
    let scores = q.matmul(&k.transpose()?)?.scale(scale);
    let masked = scores.mul(keep_mask)?.add(neg_mask)?;
    masked.softmax(1)
}

fn causal_masks<T: Float>(seq: usize) -> (Tensor<T>, Tensor<T>) {
    let mut keep = vec![T::ZERO; seq * seq];
    let mut neg = vec![T::ZERO; seq * seq];
    for i in 0..seq {
        for j in 0..seq {
            if j <= i {
                keep[i * seq + j] = T::ONE;
            } else {
                neg[i * seq + j] = T::from_f64(-1e30);
            }
        }
    }
    (
        Tensor::new(&[seq, seq], keep).expect("mask shape"),
        Tensor::new(&[seq, seq], neg).expect("mask shape"),
    )
}

impl TransformerLm<f32> {
    pub fn from_tensors(config: TransformerConfig, tensors: &[(String, Tensor<f32>)]) -> Result<Self> {
        let model = TransformerLm::init(config, 0)?;
        crate::models::load_named(&model.parameters(), tensors)?;
        Ok(model)
    }
}

impl LanguageModel for TransformerLm<f32> {
    fn vocab_size(&self) -> usize {
        self.config.vocab
    }

    fn context_limit(&self) -> Option<usize> {
        Some(self.config.context)
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
        if self.config.dropout > 0.0 {
            self.forward_impl(ids, batch, seq, Some(rng))
        } else {
            self.forward_impl(ids, batch, seq, None)
        }
    }

    fn parameters(&self) -> Vec<Parameter<f32>> {
        self.params_t()
    }

    fn arch_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(&self.config).expect("config serializes");
        v["kind"] = serde_json::Value::from("transformer");
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(vocab: usize, tie: bool) -> TransformerLm<f32> {
        TransformerLm::init(
            TransformerConfig {
                layers: 2,
                heads: 2,
                width: 8,
                ffw: 16,
                context: 12,
                vocab,
                tie_embeddings: tie,
                dropout: 0.0,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn logits_shape_and_context_limit() {
        let lm = toy(11, true);
        let logits = lm.forward(&[1, 2, 3, 4, 5, 6], 2, 3).unwrap();
        assert_eq!(logits.shape(), vec![2, 3, 11]);
        let too_long: Vec<u32> = (0..13).map(|i| i % 11).collect();
        assert!(lm.forward(&too_long, 1, 13).is_err());
    }

    #[test]
    fn causal_mask_makes_earlier_logits_bit_identical() {
        let lm = toy(9, true);
        let base = lm.forward(&[1, 2, 3, 4, 5], 1, 5).unwrap().to_vec();
        for t in 1..5 {
            let mut ids = vec![1u32, 2, 3, 4, 5];
            ids[t] = (ids[t] + 3) % 9;
            let perturbed = lm.forward(&ids, 1, 5).unwrap().to_vec();
            assert_eq!(
                base[..t * 9],
                perturbed[..t * 9],
                "perturbing t={t} changed an earlier position"
            );
            assert_ne!(base[t * 9..], perturbed[t * 9..]);
        }
    }

    #[test]
    fn equal_keys_give_uniform_attention_rows() {
        let seq = 4;
        let (keep, neg) = causal_masks::<f32>(seq);
        let q = Tensor::new(&[seq, 2], vec![0.3, -0.7, 1.0, 0.2, -0.5, 0.8, 0.0, 0.1]).unwrap();
        let k = Tensor::new(&[seq, 2], [[0.4f32, 0.6]; 4].concat()).unwrap();
        let w = causal_attention_weights(&q, &k, &keep, &neg).unwrap().to_vec();
        for i in 0..seq {
            for j in 0..=i {
                let expect = 1.0 / (i + 1) as f32;
                assert!((w[i * seq + j] - expect).abs() < 1e-6, "row {i} col {j}: {w:?}");
            }
            for j in i + 1..seq {
                assert_eq!(w[i * seq + j], 0.0);
            }
        }
    }

    #[test]
    fn param_count_formula_matches_instantiated_model() {
        for tie in [true, false] {
            let lm = toy(11, tie);
            let actual: u64 = lm.parameters().iter().map(|p| p.tensor.len() as u64).sum();
            assert_eq!(lm.config.param_count(), actual, "tie={tie}");
        }
    }

    #[test]
    fn reference_config_counts_gpt2_small() {
        // The faithful GPT-2 small count; the widely-quoted "117M" label
        // for this configuration is a historical misreport.
        assert_eq!(TransformerConfig::reference_gpt2().param_count(), 124_439_808);
    }

    #[test]
    fn tied_and_untied_differ_by_one_vocab_matrix() {
        let tied = toy(11, true).config.param_count();
        let untied = toy(11, false).config.param_count();
        assert_eq!(untied - tied, 11 * 8);
    }
}

//! Sequence encoders for code search: neural bag-of-words and a
//! bidirectional GRU. Both map a token id sequence to one D-vector; the
//! query and code encoders of a dual-encoder pair must share D so their
//! dot product is well-formed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::cells::{CellKind, RecurrentCell};
use crate::numeric::{Float, Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Nbow,
    Rnn,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nbow" => Ok(EncoderKind::Nbow),
            "rnn" => Ok(EncoderKind::Rnn),
            other => Err(Error::Config(format!(
                "unknown encoder kind {other:?} (expected nbow or rnn)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub vocab: usize,
    pub embed_dim: usize,
    pub output_dim: usize,
    /// GRU hidden width; ignored by NBoW.
    pub hidden: usize,
}

impl EncoderConfig {
    pub fn nbow(vocab: usize, embed_dim: usize, output_dim: usize) -> Self {
        EncoderConfig {
            kind: EncoderKind::Nbow,
            vocab,
            embed_dim,
            output_dim,
            hidden: 0,
        }
    }

    pub fn rnn(vocab: usize, embed_dim: usize, hidden: usize, output_dim: usize) -> Self {
        EncoderConfig {
            kind: EncoderKind::Rnn,
            vocab,
            embed_dim,
            output_dim,
            hidden,
        }
    }
}

#[derive(Debug, Clone)]
enum EncoderBody<T: Float> {
    Nbow,
    Rnn {
        forward: RecurrentCell<T>,
        backward: RecurrentCell<T>,
    },
}

/// One encoder network (query side or code side).
#[derive(Debug, Clone)]
pub struct Encoder<T: Float = f32> {
    pub config: EncoderConfig,
    embedding: Tensor<T>,
    body: EncoderBody<T>,
    proj_w: Tensor<T>,
    proj_b: Tensor<T>,
}

impl<T: Float> Encoder<T> {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        if config.vocab == 0 || config.embed_dim == 0 || config.output_dim == 0 {
            return Err(Error::Config(format!("encoder dimensions must be positive: {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Tensor::rand_uniform(&[config.vocab, config.embed_dim], -0.05, 0.05, &mut rng).trainable();
        let (body, proj_in) = match config.kind {
            EncoderKind::Nbow => (EncoderBody::Nbow, config.embed_dim),
            EncoderKind::Rnn => {
                if config.hidden == 0 {
                    return Err(Error::Config("rnn encoder needs a positive hidden size".into()));
                }
                let forward = RecurrentCell::init(CellKind::Gru, config.embed_dim, config.hidden, &mut rng);
                let backward = RecurrentCell::init(CellKind::Gru, config.embed_dim, config.hidden, &mut rng);
                (EncoderBody::Rnn { forward, backward }, 2 * config.hidden)
            }
        };
        let proj_w = Tensor::rand_normal(&[proj_in, config.output_dim], 0.02, &mut rng).trainable();
        let proj_b = Tensor::zeros(&[config.output_dim]).trainable();
        Ok(Encoder {
            config,
            embedding,
            body,
            proj_w,
            proj_b,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    /// Encodes one non-empty token sequence to a `[1, D]` row.
    pub fn encode(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        if tokens.is_empty() {
            return Err(Error::Invalid("cannot encode an empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::UnknownId {
                id: bad,
                vocab: self.config.vocab,
            });
        }
        let pooled = match &self.body {
            EncoderBody::Nbow => {
                // Bag semantics: order is irrelevant, so summing in sorted
                // id order makes the invariance exact, not just algebraic.
                let mut bag = tokens.to_vec();
                bag.sort_unstable();
                self.embedding
                    .embedding_lookup(&bag)?
                    .mean_rows()?
                    .reshape(&[1, self.config.embed_dim])?
            }
            EncoderBody::Rnn { .. } => {
                let (fwd, bwd) = self.directional_finals(tokens)?;
                Tensor::concat(&[fwd, bwd], 1)?
            }
        };
        let out = pooled.matmul(&self.proj_w)?.broadcast_add(&self.proj_b)?;
        match self.body {
            EncoderBody::Nbow => Ok(out.tanh()),
            EncoderBody::Rnn { .. } => Ok(out),
        }
    }

    /// Final hidden states of the forward and backward GRU passes, each
    /// `[1, hidden]`.
    pub fn directional_finals(&self, tokens: &[u32]) -> Result<(Tensor<T>, Tensor<T>)> {
        let EncoderBody::Rnn { forward, backward } = &self.body else {
            return Err(Error::Invalid("directional_finals on a non-rnn encoder".into()));
        };
        let embedded = self.embedding.embedding_lookup(tokens)?; // [len, E]
        let run = |cell: &RecurrentCell<T>, order: &mut dyn Iterator<Item = usize>| -> Result<Tensor<T>> {
            let mut state = cell.zero_state(1);
            for t in order {
                let x = embedded.slice(0, t, 1)?;
                state = cell.step(&x, &state)?;
            }
            Ok(state.hidden().clone())
        };
        let fwd = run(forward, &mut (0..tokens.len()))?;
        let bwd = run(backward, &mut (0..tokens.len()).rev())?;
        Ok((fwd, bwd))
    }

    /// Encodes a batch of sequences into `[N, D]`, row order preserved.
    pub fn encode_batch(&self, sequences: &[Vec<u32>]) -> Result<Tensor<T>> {
        if sequences.is_empty() {
            return Err(Error::Invalid("cannot encode an empty batch".into()));
        }
        let rows: Vec<Tensor<T>> = sequences
            .iter()
            .map(|seq| self.encode(seq))
            .collect::<Result<_>>()?;
        Tensor::concat(&rows, 0)
    }

    pub fn parameters(&self) -> Vec<Parameter<T>> {
        let mut params = vec![Parameter {
            name: "embedding".into(),
            tensor: self.embedding.clone(),
            trainable: true,
        }];
        if let EncoderBody::Rnn { forward, backward } = &self.body {
            params.extend(forward.parameters("gru_fwd"));
            params.extend(backward.parameters("gru_bwd"));
        }
        params.push(Parameter {
            name: "proj.w".into(),
            tensor: self.proj_w.clone(),
            trainable: true,
        });
        params.push(Parameter {
            name: "proj.b".into(),
            tensor: self.proj_b.clone(),
            trainable: true,
        });
        params
    }

    pub fn arch_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }
}

impl Encoder<f32> {
    pub fn from_tensors(config: EncoderConfig, tensors: &[(String, Tensor<f32>)]) -> Result<Self> {
        let encoder = Encoder::init(config, 0)?;
        crate::models::load_named(&encoder.parameters(), tensors)?;
        Ok(encoder)
    }
}

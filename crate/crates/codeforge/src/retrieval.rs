//! Batch retrieval loss, MRR evaluation, and brute-force snippet search.
//!
//! A batch of N (docstring, code) pairs scores as an N x N matrix with
//! `scores[i][j] = E_q(d_i) . E_c(c_j)`; row i's diagonal entry is the
//! true pair. The training loss normalizes each row over its candidate
//! codes (the in-batch negatives) and takes the mean negative
//! log-likelihood of the diagonal.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::models::{Encoder, EncoderConfig};
use crate::numeric::{cross_entropy, load_checkpoint, no_grad, save_checkpoint, Float, Parameter, Tensor};
use crate::tokenizers::{split_code_tokens, WordVocab};

/// Pairwise query-code similarity scores for one batch.
#[derive(Debug, Clone)]
pub struct ScoreMatrix<T: Float = f32> {
    scores: Tensor<T>,
    n: usize,
}

impl<T: Float> ScoreMatrix<T> {
    /// Wraps an N x N score tensor. Non-square input is an error.
    pub fn new(scores: Tensor<T>) -> Result<Self> {
        let shape = scores.shape();
        if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "score_matrix",
                lhs: shape,
                rhs: vec![],
            });
        }
        let n = shape[0];
        Ok(ScoreMatrix { scores, n })
    }

    /// Scores a batch from row-aligned embeddings: `[N, D] @ [N, D]^T`.
    pub fn from_embeddings(queries: &Tensor<T>, codes: &Tensor<T>) -> Result<Self> {
        if queries.shape() != codes.shape() {
            return Err(Error::ShapeMismatch {
                op: "score_matrix",
                lhs: queries.shape(),
                rhs: codes.shape(),
            });
        }
        Self::new(queries.matmul(&codes.transpose()?)?)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.scores
    }

    /// The in-batch softmax retrieval loss: mean over rows of
    /// `-log softmax(row)[diagonal]`. Differentiable; exactly zero for
    /// a singleton batch.
    pub fn eq1_loss(&self) -> Result<Tensor<T>> {
        let diagonal: Vec<u32> = (0..self.n as u32).collect();
        cross_entropy(&self.scores, &diagonal)
    }

    /// Rank of each row's diagonal entry under descending score order,
    /// pessimistic on ties: equal-scored competitors rank ahead of the
    /// true pair.
    pub fn ranks(&self) -> Vec<usize> {
        let data = self.scores.data();
        let n = self.n;
        (0..n)
            .map(|i| {
                let own = data[i * n + i];
                let beaten = (0..n).filter(|&j| j != i && data[i * n + j] >= own).count();
                1 + beaten
            })
            .collect()
    }
}

/// Mean reciprocal rank: `(1/|Q|) * sum(1/rank_i)`. Ranks are 1-based.
pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Invalid("MRR over an empty query set".into()));
    }
    if let Some(&bad) = ranks.iter().find(|&&r| r == 0) {
        return Err(Error::Invalid(format!("ranks are 1-based, got {bad}")));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// A searchable snippet store: one embedding per sample plus the
/// checkpoint the embeddings came from. Entries are immutable after
/// build.
#[derive(Debug)]
pub struct SnippetIndex {
    pub entries: Vec<IndexEntry>,
    pub dim: usize,
    pub encoder_checkpoint: String,
}

#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub sample: Sample,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct SearchHit {
    pub index: usize,
    pub score: f32,
    pub sample: Sample,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub hits: Vec<SearchHit>,
    /// Set when the caller asked for more results than the index holds.
    pub truncated_k: bool,
}

/// Encodes every sample's `code_tokens` with the code encoder. Samples
/// whose token sequence is empty are skipped (they cannot be retrieved).
pub fn build_index(
    samples: &[Sample],
    code_encoder: &Encoder<f32>,
    vocab: &WordVocab,
    encoder_checkpoint: impl Into<String>,
) -> Result<SnippetIndex> {
    let mut entries = Vec::with_capacity(samples.len());
    no_grad(|| -> Result<()> {
        for sample in samples {
            if sample.code_tokens.is_empty() {
                continue;
            }
            let ids = vocab.encode(&sample.code_tokens);
            let embedding = code_encoder.encode(&ids)?.to_vec();
            entries.push(IndexEntry {
                sample: sample.clone(),
                embedding,
            });
        }
        Ok(())
    })?;
    Ok(SnippetIndex {
        entries,
        dim: code_encoder.output_dim(),
        encoder_checkpoint: encoder_checkpoint.into(),
    })
}

/// Exact top-k search by dot product, descending; ties break toward the
/// lower index. `k` larger than the index returns everything, flagged.
pub fn search(
    query_text: &str,
    index: &SnippetIndex,
    query_encoder: &Encoder<f32>,
    vocab: &WordVocab,
    k: usize,
) -> Result<SearchOutcome> {
    if query_encoder.output_dim() != index.dim {
        return Err(Error::Config(format!(
            "query encoder dimension {} does not match index dimension {}",
            query_encoder.output_dim(),
            index.dim
        )));
    }
    let tokens = split_code_tokens(query_text);
    if tokens.is_empty() {
        return Err(Error::Invalid("query produced no tokens".into()));
    }
    let ids = vocab.encode(&tokens);
    let query = no_grad(|| query_encoder.encode(&ids))?.to_vec();

    let mut scored: Vec<(usize, f32)> = index
        .entries
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let dot: f64 = entry
                .embedding
                .iter()
                .zip(&query)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            (i, dot as f32)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let truncated_k = k > scored.len();
    scored.truncate(k);
    Ok(SearchOutcome {
        hits: scored
            .into_iter()
            .map(|(i, score)| SearchHit {
                index: i,
                score,
                sample: index.entries[i].sample.clone(),
            })
            .collect(),
        truncated_k,
    })
}

#[derive(Serialize, Deserialize)]
struct IndexArch {
    kind: String,
    dim: usize,
    encoder_checkpoint: String,
    entry_count: usize,
}

impl SnippetIndex {
    /// Writes the embeddings as a checkpoint-format blob and the entries
    /// as a JSONL sidecar at `<path>.entries.jsonl`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let n = self.entries.len();
        let mut flat = Vec::with_capacity(n * self.dim);
        for e in &self.entries {
            flat.extend_from_slice(&e.embedding);
        }
        let embeddings = Parameter::frozen("embeddings", Tensor::new(&[n, self.dim], flat)?);
        let arch = serde_json::to_value(IndexArch {
            kind: "snippet_index".into(),
            dim: self.dim,
            encoder_checkpoint: self.encoder_checkpoint.clone(),
            entry_count: n,
        })?;
        save_checkpoint(path, arch, serde_json::Value::Null, &[embeddings])?;
        let samples: Vec<Sample> = self.entries.iter().map(|e| e.sample.clone()).collect();
        crate::corpus::save_jsonl(sidecar_path(path), &samples)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (manifest, tensors) = load_checkpoint(path)?;
        let arch: IndexArch = serde_json::from_value(manifest.arch)?;
        let (_, embeddings) = tensors
            .into_iter()
            .find(|(name, _)| name == "embeddings")
            .ok_or_else(|| Error::Checkpoint("index blob is missing the embeddings tensor".into()))?;
        let (samples, report) = crate::corpus::load_jsonl_any_language(sidecar_path(path))?;
        if report.skipped() > 0 {
            return Err(Error::Checkpoint(format!(
                "index sidecar had {} unreadable entries",
                report.skipped()
            )));
        }
        if samples.len() != arch.entry_count {
            return Err(Error::Checkpoint(format!(
                "index sidecar has {} entries, manifest says {}",
                samples.len(),
                arch.entry_count
            )));
        }
        let flat = embeddings.to_vec();
        let entries = samples
            .into_iter()
            .enumerate()
            .map(|(i, sample)| IndexEntry {
                sample,
                embedding: flat[i * arch.dim..(i + 1) * arch.dim].to_vec(),
            })
            .collect();
        Ok(SnippetIndex {
            entries,
            dim: arch.dim,
            encoder_checkpoint: arch.encoder_checkpoint,
        })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".entries.jsonl");
    std::path::PathBuf::from(os)
}

/// A trained dual-encoder pair with its shared word vocabulary, as one
/// checkpoint file.
pub struct DualEncoderModel {
    pub query: Encoder<f32>,
    pub code: Encoder<f32>,
    pub vocab: WordVocab,
}

#[derive(Serialize, Deserialize)]
struct DualArch {
    kind: String,
    query: EncoderConfig,
    code: EncoderConfig,
}

impl DualEncoderModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut params = Vec::new();
        for p in self.query.parameters() {
            params.push(Parameter {
                name: format!("query.{}", p.name),
                ..p
            });
        }
        for p in self.code.parameters() {
            params.push(Parameter {
                name: format!("code.{}", p.name),
                ..p
            });
        }
        let arch = serde_json::to_value(DualArch {
            kind: "dual_encoder".into(),
            query: self.query.config.clone(),
            code: self.code.config.clone(),
        })?;
        let codec = serde_json::to_value(&self.vocab)?;
        save_checkpoint(path, arch, codec, &params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (manifest, tensors) = load_checkpoint(path)?;
        let arch: DualArch = serde_json::from_value(manifest.arch)?;
        let mut vocab: WordVocab = serde_json::from_value(manifest.codec)?;
        vocab.rebuild_index();

        let strip = |prefix: &str| -> Vec<(String, Tensor<f32>)> {
            tensors
                .iter()
                .filter_map(|(name, t)| {
                    name.strip_prefix(prefix).map(|rest| (rest.to_string(), t.clone()))
                })
                .collect()
        };
        let query = Encoder::from_tensors(arch.query, &strip("query."))?;
        let code = Encoder::from_tensors(arch.code, &strip("code."))?;
        Ok(DualEncoderModel { query, code, vocab })
    }
}

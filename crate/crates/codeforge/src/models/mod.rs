//! Model architectures: sequence encoders for retrieval and the two
//! autoregressive language-model families.

pub mod cells;
mod char_lm;
mod encoders;
mod transformer;

pub use cells::{CellKind, CellState, RecurrentCell};
pub use char_lm::{RecurrentLm, RecurrentLmConfig};
pub use encoders::{Encoder, EncoderConfig, EncoderKind};
pub use transformer::{TransformerConfig, TransformerLm};

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numeric::{Parameter, Tensor};

/// Common surface of the autoregressive LMs, as the training loop,
/// perplexity evaluation, and the sampler consume them.
///
/// `forward` takes a row-major `[batch, seq]` id matrix flattened
/// batch-major and returns logits shaped `[batch, seq, vocab]`, causal in
/// the sequence dimension.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;

    /// Maximum sequence length, when the architecture has one.
    fn context_limit(&self) -> Option<usize>;

    /// Evaluation-mode forward pass (no dropout).
    fn forward(&self, ids: &[u32], batch: usize, seq: usize) -> Result<Tensor<f32>>;

    /// Training-mode forward pass; architectures with dropout override
    /// this and draw their masks from `rng`.
    fn forward_train(
        &self,
        ids: &[u32],
        batch: usize,
        seq: usize,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<f32>> {
        self.forward(ids, batch, seq)
    }

    /// All parameters, checkpoint order. Handles are cheap clones that
    /// share storage with the model.
    fn parameters(&self) -> Vec<Parameter<f32>>;

    /// Architecture config as it appears in the checkpoint manifest.
    fn arch_json(&self) -> serde_json::Value;
}

/// Saves an LM with its architecture config and codec reference.
pub fn save_lm_checkpoint(
    model: &dyn LanguageModel,
    codec: Option<&crate::tokenizers::TokenCodec>,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    let codec_value = match codec {
        Some(c) => c.to_value()?,
        None => serde_json::Value::Null,
    };
    crate::numeric::save_checkpoint(path, model.arch_json(), codec_value, &model.parameters())
}

/// An LM restored from a checkpoint, tagged by architecture.
pub enum LoadedLm {
    Recurrent(RecurrentLm<f32>),
    Transformer(TransformerLm<f32>),
}

impl LoadedLm {
    pub fn as_language_model(&self) -> &dyn LanguageModel {
        match self {
            LoadedLm::Recurrent(m) => m,
            LoadedLm::Transformer(m) => m,
        }
    }
}

/// Restores an LM checkpoint, dispatching on the manifest's `kind`.
pub fn load_lm_checkpoint(
    path: impl AsRef<std::path::Path>,
) -> Result<(LoadedLm, Option<crate::tokenizers::TokenCodec>)> {
    let (manifest, tensors) = crate::numeric::load_checkpoint(path)?;
    let codec = match &manifest.codec {
        serde_json::Value::Null => None,
        value => Some(crate::tokenizers::TokenCodec::from_value(value.clone())?),
    };
    let kind = manifest
        .arch
        .get("kind")
        .and_then(|k| k.as_str())
        .unwrap_or_default()
        .to_string();
    let model = match kind.as_str() {
        "char_rnn" => {
            let config: RecurrentLmConfig = serde_json::from_value(manifest.arch)?;
            LoadedLm::Recurrent(RecurrentLm::from_tensors(config, &tensors)?)
        }
        "transformer" => {
            let config: TransformerConfig = serde_json::from_value(manifest.arch)?;
            LoadedLm::Transformer(TransformerLm::from_tensors(config, &tensors)?)
        }
        other => {
            return Err(crate::error::Error::Checkpoint(format!(
                "unknown model kind {other:?} in checkpoint manifest"
            )))
        }
    };
    Ok((model, codec))
}

/// Copies checkpoint tensors into freshly initialized parameters by
/// name, insisting on an exact one-to-one match.
pub(crate) fn load_named(params: &[Parameter<f32>], tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    use std::collections::HashMap;
    let by_name: HashMap<&str, &Tensor<f32>> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    if by_name.len() != params.len() {
        return Err(crate::error::Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            by_name.len(),
            params.len()
        )));
    }
    for p in params {
        let t = by_name.get(p.name.as_str()).ok_or_else(|| {
            crate::error::Error::Checkpoint(format!("checkpoint is missing parameter {:?}", p.name))
        })?;
        if t.shape() != p.tensor.shape() {
            return Err(crate::error::Error::Checkpoint(format!(
                "parameter {:?} has shape {:?} in the checkpoint but {:?} in the model",
                p.name,
                t.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor.set_data(&t.data());
    }
    Ok(())
}

pub(crate) fn validate_ids(ids: &[u32], batch: usize, seq: usize, vocab: usize) -> Result<()> {
    if ids.len() != batch * seq || seq == 0 || batch == 0 {
        return Err(crate::error::Error::Invalid(format!(
            "expected a {batch}x{seq} id matrix, got {} ids",
            ids.len()
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
        return Err(crate::error::Error::UnknownId {
            id: bad,
            vocab,
        });
    }
    Ok(())
}

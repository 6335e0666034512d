//! Generation-time sampling and the text metrics: corpus BLEU,
//! perplexity, and n-gram novelty.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::models::{LanguageModel, RecurrentLm, RecurrentLmConfig};
use crate::numeric::no_grad;
use crate::tokenizers::{split_code_tokens, CharVocab, TokenCodec, UnknownCharPolicy};
use crate::training::{lm_eval_nll, run_sweep, train_lm, SweepPoint, SweepRow, TrainConfig};

/// A generation prompt: a function's first line plus its documentation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prompt {
    pub signature: String,
    pub docstring: String,
}

impl Prompt {
    pub fn new(signature: impl Into<String>, docstring: impl Into<String>) -> Result<Self> {
        let prompt = Prompt {
            signature: signature.into(),
            docstring: docstring.into(),
        };
        if prompt.signature.trim().is_empty() {
            return Err(Error::Invalid("prompt signature must be non-empty".into()));
        }
        Ok(prompt)
    }

    pub fn from_sample(sample: &Sample) -> Result<Self> {
        let signature = sample
            .code
            .lines()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| Error::Invalid("sample code has no signature line".into()))?;
        Prompt::new(signature, sample.docstring.trim())
    }

    /// The prompt as source text: the signature line, then the docstring
    /// as an indented triple-quoted block when present.
    pub fn render(&self) -> String {
        if self.docstring.trim().is_empty() {
            format!("{}\n", self.signature)
        } else {
            format!("{}\n    \"\"\"{}\"\"\"\n", self.signature, self.docstring.trim())
        }
    }
}

/// Splits a sample's code into (prompt prefix, body). When the code
/// opens with the canonical rendered prompt the split is exact;
/// otherwise everything after the signature line counts as body.
pub fn split_prompt_body(sample: &Sample) -> Result<(Prompt, String)> {
    let prompt = Prompt::from_sample(sample)?;
    let rendered = prompt.render();
    let body = match sample.code.strip_prefix(&rendered) {
        Some(rest) => rest.to_string(),
        None => match sample.code.split_once('\n') {
            Some((_, rest)) => rest.to_string(),
            None => String::new(),
        },
    };
    Ok((prompt, body))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Sample,
    TopK(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCondition {
    /// Stop only at the token budget.
    TokenBudget,
    /// Also stop once a generated line re-enters column zero, the end of
    /// an indented function body.
    DedentToColumnZero,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenConfig {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub strategy: Strategy,
    pub stop: StopCondition,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_new_tokens: 256,
            temperature: 1.0,
            strategy: Strategy::Greedy,
            stop: StopCondition::TokenBudget,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            Strategy::Greedy => Ok(()),
            Strategy::Sample | Strategy::TopK(_) if self.temperature <= 0.0 => Err(Error::Config(
                format!("sampling needs temperature > 0, got {}", self.temperature),
            )),
            Strategy::TopK(0) => Err(Error::Config("top-k needs k >= 1".into())),
            _ => Ok(()),
        }
    }
}

fn pick_next(logits: &[f32], cfg: &GenConfig, rng: &mut ChaCha8Rng) -> u32 {
    match cfg.strategy {
        Strategy::Greedy => {
            let mut best = 0usize;
            for (i, &x) in logits.iter().enumerate() {
                if x > logits[best] {
                    best = i;
                }
            }
            best as u32
        }
        Strategy::Sample => sample_scaled(logits, cfg.temperature, None, rng),
        Strategy::TopK(k) => sample_scaled(logits, cfg.temperature, Some(k), rng),
    }
}

/// Temperature-scaled softmax sampling, optionally restricted to the k
/// highest logits (ties toward lower ids).
fn sample_scaled(logits: &[f32], temperature: f64, top_k: Option<usize>, rng: &mut ChaCha8Rng) -> u32 {
    let mut candidates: Vec<usize> = (0..logits.len()).collect();
    if let Some(k) = top_k {
        candidates.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        candidates.truncate(k.max(1));
    }
    let max = candidates
        .iter()
        .map(|&i| logits[i] as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&i| ((logits[i] as f64 - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut roll = rng.random::<f64>() * total;
    for (w, &i) in weights.iter().zip(&candidates) {
        roll -= w;
        if roll <= 0.0 {
            return i as u32;
        }
    }
    *candidates.last().expect("nonempty candidate set") as u32
}

/// First byte offset where a generated line re-enters column zero;
/// returns the offset just past that newline.
fn dedent_cut(text: &str) -> Option<usize> {
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'\n' && i + 1 < bytes.len() {
            let next = bytes[i + 1];
            if next != b' ' && next != b'\t' && next != b'\n' && next != b'\r' {
                return Some(i + 1);
            }
        }
    }
    None
}

/// Autoregressive decoding from already-encoded prompt ids. Returns only
/// the generated ids, never the prompt.
pub fn generate_ids(
    model: &dyn LanguageModel,
    prompt_ids: &[u32],
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>> {
    cfg.validate()?;
    if prompt_ids.is_empty() {
        return Err(Error::Invalid("prompt encoded to zero tokens".into()));
    }
    if let Some(ctx) = model.context_limit() {
        if prompt_ids.len() >= ctx {
            return Err(Error::Invalid(format!(
                "prompt of {} tokens leaves no room in context {}",
                prompt_ids.len(),
                ctx
            )));
        }
    }
    no_grad(|| {
        let mut ids = prompt_ids.to_vec();
        let mut generated = Vec::with_capacity(cfg.max_new_tokens);
        for _ in 0..cfg.max_new_tokens {
            let window = match model.context_limit() {
                Some(ctx) if ids.len() > ctx => &ids[ids.len() - ctx..],
                _ => &ids[..],
            };
            let t = window.len();
            let logits = model.forward(window, 1, t)?;
            let vocab = model.vocab_size();
            let last = logits.reshape(&[t, vocab])?.slice(0, t - 1, 1)?.to_vec();
            let next = pick_next(&last, cfg, rng);
            ids.push(next);
            generated.push(next);
        }
        Ok(generated)
    })
}

/// Generates code text for a prompt. The returned text excludes the
/// prompt and honors the configured stop condition.
pub fn generate(
    model: &dyn LanguageModel,
    codec: &TokenCodec,
    prompt: &Prompt,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<String> {
    let prompt_text = prompt.render();
    let prompt_ids = match codec {
        TokenCodec::Char(v) => v.encode_with_policy(&prompt_text, UnknownCharPolicy::Fail)?,
        TokenCodec::Bpe(m) => m.encode(&prompt_text),
    };
    let generated = generate_ids(model, &prompt_ids, cfg, rng)?;
    let text = codec.decode_lossy(&generated)?;
    Ok(match cfg.stop {
        StopCondition::TokenBudget => text,
        StopCondition::DedentToColumnZero => match dedent_cut(&text) {
            Some(cut) => text[..cut].to_string(),
            None => text,
        },
    })
}

/// Corpus BLEU over single-reference pairs: clipped n-gram precisions
/// for n = 1..4 aggregated across the corpus, uniform quarter weights,
/// and the brevity penalty `exp(1 - r/c)` when the candidate side is
/// shorter. Any zero precision zeroes the score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub candidate_tokens: usize,
    pub reference_tokens: usize,
    pub pair_count: usize,
    pub skipped_pairs: usize,
}

pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<BleuReport> {
    if candidates.len() != references.len() || candidates.is_empty() {
        return Err(Error::Invalid(format!(
            "corpus BLEU needs equal, non-zero pair counts (got {} and {})",
            candidates.len(),
            references.len()
        )));
    }

    let mut clipped = [0usize; 4];
    let mut total = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    let mut skipped = 0usize;
    let mut scored = 0usize;

    for (cand, reference) in candidates.iter().zip(references) {
        // A pair without a reference cannot be scored; an empty candidate
        // is scored as zero-quality output (it only adds reference length).
        if reference.is_empty() {
            skipped += 1;
            continue;
        }
        scored += 1;
        cand_len += cand.len();
        ref_len += reference.len();
        for n in 1..=4usize {
            if cand.len() < n {
                continue;
            }
            let mut ref_counts: std::collections::HashMap<&[String], usize> = std::collections::HashMap::new();
            for w in reference.windows(n) {
                *ref_counts.entry(w).or_insert(0) += 1;
            }
            let mut cand_counts: std::collections::HashMap<&[String], usize> = std::collections::HashMap::new();
            for w in cand.windows(n) {
                *cand_counts.entry(w).or_insert(0) += 1;
            }
            for (gram, count) in cand_counts {
                clipped[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            total[n - 1] += cand.len() - n + 1;
        }
    }

    if scored == 0 {
        return Err(Error::Invalid("every BLEU pair had an empty reference".into()));
    }

    let mut precisions = [0.0f64; 4];
    for n in 0..4 {
        precisions[n] = if total[n] > 0 {
            clipped[n] as f64 / total[n] as f64
        } else {
            0.0
        };
    }
    let brevity_penalty = if cand_len == 0 {
        0.0
    } else if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.contains(&0.0) || brevity_penalty == 0.0 {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| 0.25 * p.ln()).sum::<f64>()).exp()
    };

    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        candidate_tokens: cand_len,
        reference_tokens: ref_len,
        pair_count: scored,
        skipped_pairs: skipped,
    })
}

/// Perplexity of the model over raw texts: `exp` of the mean per-token
/// cross entropy across every evaluated position. Texts that fail to
/// encode fail the whole call or fall back, per `policy`.
pub fn perplexity(
    model: &dyn LanguageModel,
    codec: &TokenCodec,
    texts: &[&str],
    policy: UnknownCharPolicy,
) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::Invalid("perplexity needs at least one text".into()));
    }
    let window = model.context_limit().unwrap_or(256);
    let mut total_nll = 0.0f64;
    let mut total_positions = 0usize;
    for text in texts {
        let ids = codec.encode_with_policy(text, policy)?;
        if ids.len() < 2 {
            continue;
        }
        let (nll, positions) = lm_eval_nll(model, &ids, window)?;
        total_nll += nll;
        total_positions += positions;
    }
    if total_positions == 0 {
        return Err(Error::Invalid("no text encoded to two or more tokens".into()));
    }
    Ok((total_nll / total_positions as f64).exp())
}

/// Fraction of the generated sequence's n-grams that appear nowhere in
/// the training corpus (1.0 = fully novel).
pub fn ngram_novelty(generated: &[String], corpus: &[Vec<String>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("n-gram order must be positive".into()));
    }
    if generated.len() < n {
        return Err(Error::Invalid(format!(
            "generated sequence of {} tokens is shorter than n = {}",
            generated.len(),
            n
        )));
    }
    let mut seen: std::collections::HashSet<&[String]> = std::collections::HashSet::new();
    for tokens in corpus {
        for w in tokens.windows(n) {
            seen.insert(w);
        }
    }
    let windows: Vec<&[String]> = generated.windows(n).collect();
    let novel = windows.iter().filter(|w| !seen.contains(*w)).count();
    Ok(novel as f64 / windows.len() as f64)
}

/// Generates a body for one sample's prompt. Evaluation prompts map
/// unseen characters to the fallback id rather than failing, since
/// held-out text routinely contains characters absent from training.
pub fn generate_for_sample(
    model: &dyn LanguageModel,
    codec: &TokenCodec,
    sample: &Sample,
    gen: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<String> {
    let (prompt, _) = split_prompt_body(sample)?;
    let prompt_ids = codec.encode_with_policy(&prompt.render(), UnknownCharPolicy::Fallback(0))?;
    let generated_ids = generate_ids(model, &prompt_ids, gen, rng)?;
    let mut text = codec.decode_lossy(&generated_ids)?;
    if gen.stop == StopCondition::DedentToColumnZero {
        if let Some(cut) = dedent_cut(&text) {
            text.truncate(cut);
        }
    }
    Ok(text)
}

/// Generates a body for each sample (prompt = signature + docstring) and
/// scores the candidates against the true bodies as corpus BLEU, both
/// sides word-tokenized by [`split_code_tokens`].
pub fn bleu_on_samples(
    model: &dyn LanguageModel,
    codec: &TokenCodec,
    samples: &[Sample],
    gen: &GenConfig,
    seed: u64,
    max_samples: usize,
) -> Result<BleuReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates = Vec::new();
    let mut references = Vec::new();
    for sample in samples.iter().take(max_samples.max(1)) {
        let (_, body) = split_prompt_body(sample)?;
        let text = generate_for_sample(model, codec, sample, gen, &mut rng)?;
        candidates.push(split_code_tokens(&text));
        references.push(split_code_tokens(&body));
    }
    corpus_bleu(&candidates, &references)
}

/// The Table-1-shaped sweep: trains one character LM per grid point on
/// the training samples' code stream and scores train/eval BLEU through
/// the generation protocol. Row `i` runs with seed `base.seed + i`.
pub fn run_char_lm_bleu_sweep(
    grid: &[SweepPoint],
    train_samples: &[Sample],
    eval_samples: &[Sample],
    lm_template: &RecurrentLmConfig,
    base: &TrainConfig,
    gen: &GenConfig,
    max_eval_samples: usize,
) -> Vec<SweepRow> {
    let train_text = crate::corpus::lm_corpus_text(train_samples);
    let mut row_index = 0usize;
    run_sweep(grid, move |point| {
        let seed = base.seed + row_index as u64;
        row_index += 1;

        let vocab = CharVocab::build(&train_text);
        let ids = vocab.encode(&train_text)?;
        let codec = TokenCodec::Char(vocab.clone());
        let lm = RecurrentLm::init(
            RecurrentLmConfig {
                vocab: vocab.len(),
                ..lm_template.clone()
            },
            seed,
        )?;
        let cfg = TrainConfig {
            batch_size: point.batch_size,
            starter_lr: point.starter_lr,
            reg_weight: point.reg_weight,
            seed,
            ..base.clone()
        };
        train_lm(&lm, &ids, None, &cfg, Some(&codec), None)?;
        let train_bleu = bleu_on_samples(&lm, &codec, train_samples, gen, seed, max_eval_samples)?;
        let eval_bleu = bleu_on_samples(&lm, &codec, eval_samples, gen, seed, max_eval_samples)?;
        Ok((train_bleu.bleu, eval_bleu.bleu))
    })
}

#[cfg(test)]
mod tests;

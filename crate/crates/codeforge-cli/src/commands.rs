//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use codeforge::corpus::{self, Sample, SplitSpec};
use codeforge::evalgen::{
    bleu_on_samples, generate, generate_for_sample, ngram_novelty, perplexity,
    run_char_lm_bleu_sweep, GenConfig, Prompt, StopCondition, Strategy,
};
use codeforge::models::{
    load_lm_checkpoint, CellKind, Encoder, EncoderConfig, EncoderKind, RecurrentLm,
    RecurrentLmConfig, TransformerConfig, TransformerLm,
};
use codeforge::retrieval::{build_index, search as index_search, DualEncoderModel, SnippetIndex};
use codeforge::tokenizers::{split_code_tokens, BpeModel, CharVocab, TokenCodec, UnknownCharPolicy, WordVocab};
use codeforge::training::{
    preset_grid, rank_rows, train_dual_encoder, train_lm as run_train_lm, SweepPoint, TrainConfig,
};

use crate::manifest::{resolve_seed, ManifestBuilder};
use crate::{
    BuildCharArgs, EvalBleuArgs, EvalNoveltyArgs, EvalPerplexityArgs, GenerateArgs, IngestArgs,
    SearchArgs, StatsArgs, SweepArgs, TrainBpeArgs, TrainLmArgs, TrainOverrides, TrainSearchArgs,
};

// ---------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------

fn load_samples(path: &Path, language: Option<&str>) -> Result<(Vec<Sample>, corpus::LoadReport)> {
    let loaded = match language {
        Some(lang) => corpus::load_jsonl(path, lang),
        None => corpus::load_jsonl_any_language(path),
    };
    loaded.with_context(|| format!("loading {}", path.display()))
}

/// A `--data` argument: an ingest output directory (train.jsonl plus an
/// optional valid.jsonl) or a single JSONL file.
fn load_split_dir(data: &Path) -> Result<(Vec<Sample>, Option<Vec<Sample>>)> {
    if data.is_dir() {
        let train_path = data.join("train.jsonl");
        if !train_path.exists() {
            bail!("{} has no train.jsonl", data.display());
        }
        let (train, _) = load_samples(&train_path, None)?;
        let valid_path = data.join("valid.jsonl");
        let valid = if valid_path.exists() {
            Some(load_samples(&valid_path, None)?.0)
        } else {
            None
        };
        Ok((train, valid))
    } else {
        Ok((load_samples(data, None)?.0, None))
    }
}

/// Text for codec training: the code stream of a JSONL corpus, or the
/// raw file contents otherwise.
fn read_text_corpus(path: &Path) -> Result<String> {
    if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
        let (samples, _) = load_samples(path, None)?;
        Ok(corpus::lm_corpus_text(&samples))
    } else {
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
    }
}

/// Precedence: defaults, then the config file, then explicit flags.
fn resolve_train_config(
    base: TrainConfig,
    config_path: Option<&Path>,
    overrides: &TrainOverrides,
    seed: u64,
) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(&base)?;
    if let Some(path) = config_path {
        let file: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )?;
        let serde_json::Value::Object(entries) = file else {
            bail!("{} must hold a JSON object", path.display());
        };
        let map = value.as_object_mut().expect("config is an object");
        for (k, v) in entries {
            map.insert(k, v);
        }
    }
    let map = value.as_object_mut().expect("config is an object");
    let mut set = |key: &str, v: Option<serde_json::Value>| {
        if let Some(v) = v {
            map.insert(key.to_string(), v);
        }
    };
    set("batch_size", overrides.batch_size.map(Into::into));
    set("seq_len", overrides.seq_len.map(Into::into));
    set("starter_lr", overrides.lr.map(Into::into));
    set("lr_decay", overrides.decay.map(Into::into));
    set("clip_limit", overrides.clip.map(Into::into));
    set("clip_mode", overrides.clip_mode.clone().map(Into::into));
    set("epochs", overrides.epochs.map(Into::into));
    set("dropout", overrides.dropout.map(Into::into));
    set("reg_weight", overrides.reg.map(Into::into));
    set("optimizer", overrides.optimizer.clone().map(Into::into));
    map.insert("seed".into(), seed.into());

    let cfg: TrainConfig = serde_json::from_value(value)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------------
// ingest / stats
// ---------------------------------------------------------------------

pub fn ingest(args: IngestArgs) -> Result<()> {
    let seed = resolve_seed(args.seed);
    let builder = ManifestBuilder::new("ingest", seed)
        .config(serde_json::json!({
            "language": args.language,
            "subset": args.subset,
            "fractions": [args.fractions.0, args.fractions.1, args.fractions.2],
        }))
        .input(&args.input);

    let (samples, report) = load_samples(&args.input, Some(&args.language))?;
    let spec = SplitSpec::new(seed, args.fractions, args.subset)?;
    let (train, valid, test) = corpus::split(&samples, &spec)?;

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut builder = builder;
    for (name, split) in [("train", &train), ("valid", &valid), ("test", &test)] {
        let path = args.out.join(format!("{name}.jsonl"));
        corpus::save_jsonl(&path, split)?;
        builder = builder.output(path);
    }
    builder.write(&args.out)?;

    println!(
        "{}",
        serde_json::json!({
            "loaded": samples.len(),
            "skipped": report.skipped(),
            "malformed_lines": report.malformed_lines,
            "missing_fields": report.missing_fields,
            "filtered_language": report.filtered_language,
            "train": train.len(),
            "valid": valid.len(),
            "test": test.len(),
        })
    );
    Ok(())
}

pub fn stats(args: StatsArgs) -> Result<()> {
    let (samples, _) = load_samples(&args.input, args.language.as_deref())?;
    let stats = corpus::compute_stats(&samples);
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

// ---------------------------------------------------------------------
// tokenize
// ---------------------------------------------------------------------

pub fn train_bpe(args: TrainBpeArgs) -> Result<()> {
    let seed = resolve_seed(None);
    let text = read_text_corpus(&args.input)?;
    let model = BpeModel::train(text.as_bytes(), args.vocab_size)?;
    let codec = TokenCodec::Bpe(model);
    codec.save(&args.out)?;
    let dir = args.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    ManifestBuilder::new("tokenize train-bpe", seed)
        .config(serde_json::json!({"vocab_size": args.vocab_size}))
        .input(&args.input)
        .output(&args.out)
        .write(&dir)?;
    println!(
        "{}",
        serde_json::json!({"vocab_size": codec.vocab_size(), "out": args.out.display().to_string()})
    );
    Ok(())
}

pub fn build_char(args: BuildCharArgs) -> Result<()> {
    let text = read_text_corpus(&args.input)?;
    let codec = TokenCodec::Char(CharVocab::build(&text));
    codec.save(&args.out)?;
    let dir = args.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    ManifestBuilder::new("tokenize build-char", resolve_seed(None))
        .input(&args.input)
        .output(&args.out)
        .write(&dir)?;
    println!(
        "{}",
        serde_json::json!({"vocab_size": codec.vocab_size(), "out": args.out.display().to_string()})
    );
    Ok(())
}

// ---------------------------------------------------------------------
// train-lm
// ---------------------------------------------------------------------

pub fn train_lm(args: TrainLmArgs) -> Result<()> {
    let seed = resolve_seed(args.seed);
    let (train_samples, valid_samples) = load_split_dir(&args.data)?;
    if train_samples.is_empty() {
        bail!("training data is empty");
    }
    let train_text = corpus::lm_corpus_text(&train_samples);
    let valid_text = valid_samples.as_ref().map(|s| corpus::lm_corpus_text(s));

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let codec = match &args.codec {
        Some(path) => TokenCodec::load(path)?,
        None => {
            let codec = match args.arch.as_str() {
                "char" => TokenCodec::Char(CharVocab::build(&train_text)),
                "transformer" => TokenCodec::Bpe(BpeModel::train(train_text.as_bytes(), args.bpe_vocab_size)?),
                other => bail!("unknown architecture {other:?} (expected char or transformer)"),
            };
            codec.save(args.out.join("codec.json"))?;
            codec
        }
    };

    let base = match args.arch.as_str() {
        "char" => TrainConfig::char_lm_default(),
        "transformer" => TrainConfig::transformer_default(),
        other => bail!("unknown architecture {other:?} (expected char or transformer)"),
    };
    let cfg = resolve_train_config(base, args.config.as_deref(), &args.overrides, seed)?;

    let train_ids = codec.encode(&train_text)?;
    // validation text may contain characters unseen at training time
    let valid_ids = valid_text
        .as_deref()
        .map(|t| codec.encode_with_policy(t, UnknownCharPolicy::Fallback(0)))
        .transpose()?;

    let report = match args.arch.as_str() {
        "char" => {
            let cell: CellKind = args.cell.as_deref().unwrap_or("lstm").parse()?;
            let lm = RecurrentLm::init(
                RecurrentLmConfig {
                    cell,
                    hidden: args.hidden.unwrap_or(128),
                    layers: args.layers.unwrap_or(2),
                    vocab: codec.vocab_size(),
                    dropout: cfg.dropout,
                },
                seed,
            )?;
            run_train_lm(&lm, &train_ids, valid_ids.as_deref(), &cfg, Some(&codec), Some(&args.out))?
        }
        _ => {
            let mut tcfg = TransformerConfig::desk_default(codec.vocab_size());
            if let Some(w) = args.hidden {
                tcfg.width = w;
                tcfg.ffw = 4 * w;
            }
            if let Some(l) = args.layers {
                tcfg.layers = l;
            }
            if let Some(h) = args.heads {
                tcfg.heads = h;
            }
            if let Some(c) = args.context {
                tcfg.context = c;
            }
            tcfg.dropout = cfg.dropout;
            let mut cfg = cfg.clone();
            cfg.seq_len = cfg.seq_len.min(tcfg.context);
            let lm = TransformerLm::init(tcfg, seed)?;
            run_train_lm(&lm, &train_ids, valid_ids.as_deref(), &cfg, Some(&codec), Some(&args.out))?
        }
    };

    write_json(&args.out.join("report.json"), &report)?;
    let steps_per_epoch = train_ids.len().div_ceil(cfg.batch_size * cfg.seq_len).max(1);
    let mut curves = String::from("# step\tloss\tperplexity\n");
    for e in &report.epochs {
        curves.push_str(&format!(
            "{}\t{:.6}\t{:.6}\n",
            (e.epoch + 1) * steps_per_epoch,
            e.valid_loss,
            e.perplexity
        ));
    }
    std::fs::write(args.out.join("curves.txt"), curves)?;

    ManifestBuilder::new("train-lm", seed)
        .config(serde_json::json!({
            "arch": args.arch,
            "train": serde_json::to_value(&cfg)?,
            "codec": args.codec.as_ref().map(|p| p.display().to_string()),
        }))
        .input(&args.data)
        .output(args.out.join("report.json"))
        .write(&args.out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

// ---------------------------------------------------------------------
// train-search
// ---------------------------------------------------------------------

fn paired_ids(samples: &[Sample], vocab: &WordVocab) -> Vec<(Vec<u32>, Vec<u32>)> {
    samples
        .iter()
        .filter(|s| s.is_paired())
        .map(|s| (vocab.encode(&s.docstring_tokens), vocab.encode(&s.code_tokens)))
        .collect()
}

pub fn train_search(args: TrainSearchArgs) -> Result<()> {
    let seed = resolve_seed(args.seed);
    let (train_samples, valid_samples) = load_split_dir(&args.data)?;
    let paired: Vec<Sample> = train_samples.iter().filter(|s| s.is_paired()).cloned().collect();
    if paired.is_empty() {
        bail!("no (docstring, code) pairs in the training data");
    }

    let vocab = WordVocab::build(
        paired
            .iter()
            .flat_map(|s| s.docstring_tokens.iter().chain(&s.code_tokens))
            .map(|t| t.as_str()),
        args.vocab_size,
    );
    let pairs = paired_ids(&paired, &vocab);
    let valid_pairs = valid_samples.as_ref().map(|v| paired_ids(v, &vocab));

    let query_kind: EncoderKind = args.query_enc.parse()?;
    let code_kind: EncoderKind = args.code_enc.parse()?;
    let make_config = |kind: EncoderKind| match kind {
        EncoderKind::Nbow => EncoderConfig::nbow(vocab.len(), args.embed_dim, args.output_dim),
        EncoderKind::Rnn => EncoderConfig::rnn(vocab.len(), args.embed_dim, args.hidden, args.output_dim),
    };
    let query = Encoder::init(make_config(query_kind), seed)?;
    let code = Encoder::init(make_config(code_kind), seed ^ 0x1)?;

    let cfg = resolve_train_config(
        TrainConfig::dual_encoder_default(),
        args.config.as_deref(),
        &args.overrides,
        seed,
    )?;
    let report = train_dual_encoder(&query, &code, &pairs, valid_pairs.as_deref(), &cfg)?;

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let dual_path = args.out.join("dual.ckpt");
    let dual = DualEncoderModel { query, code, vocab };
    dual.save(&dual_path)?;

    let index = build_index(&paired, &dual.code, &dual.vocab, "dual.ckpt")?;
    let index_path = args.out.join("snippets.idx");
    index.save(&index_path)?;

    write_json(&args.out.join("report.json"), &report)?;
    ManifestBuilder::new("train-search", seed)
        .config(serde_json::json!({
            "query_enc": args.query_enc,
            "code_enc": args.code_enc,
            "train": serde_json::to_value(&cfg)?,
            "vocab_size": args.vocab_size,
        }))
        .input(&args.data)
        .output(&dual_path)
        .output(&index_path)
        .write(&args.out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

// ---------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------

pub fn sweep(args: SweepArgs) -> Result<()> {
    let seed = resolve_seed(args.seed);
    let grid: Vec<SweepPoint> = match &args.grid {
        Some(path) => serde_json::from_str(
            &std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )?,
        None => preset_grid(),
    };
    let (train_samples, valid_samples) = load_split_dir(&args.data)?;
    if train_samples.is_empty() {
        bail!("sweep training data is empty");
    }
    let eval_samples = valid_samples.unwrap_or_else(|| train_samples.clone());

    // Sweep rows default to plain SGD over 20 epochs; the grid columns
    // override batch size, starter LR, and regularization per point.
    let mut base = TrainConfig::char_lm_default();
    base.epochs = 20;
    base.optimizer = codeforge::training::OptimizerKind::Sgd;
    let base = resolve_train_config(base, args.config.as_deref(), &args.overrides, seed)?;

    let template = RecurrentLmConfig {
        cell: args.cell.parse()?,
        hidden: args.hidden,
        layers: args.layers,
        vocab: 0,
        dropout: base.dropout,
    };
    let gen = GenConfig {
        max_new_tokens: args.gen_tokens,
        temperature: 1.0,
        strategy: Strategy::Greedy,
        stop: StopCondition::DedentToColumnZero,
    };

    let mut rows = run_char_lm_bleu_sweep(
        &grid,
        &train_samples,
        &eval_samples,
        &template,
        &base,
        &gen,
        args.max_eval_samples,
    );
    rank_rows(&mut rows);

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_json(&args.out.join("sweep.json"), &rows)?;
    ManifestBuilder::new("sweep", seed)
        .config(serde_json::json!({
            "grid_points": grid.len(),
            "base": serde_json::to_value(&base)?,
            "hidden": args.hidden,
            "layers": args.layers,
            "cell": args.cell,
        }))
        .input(&args.data)
        .output(args.out.join("sweep.json"))
        .write(&args.out)?;
    println!("{}", serde_json::to_string_pretty(&rows)?);
    Ok(())
}

// ---------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------

fn read_prompt(path: &Path) -> Result<Prompt> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(prompt) = serde_json::from_str::<Prompt>(&raw) {
        return Ok(prompt);
    }
    let mut lines = raw.lines();
    let signature = lines
        .by_ref()
        .find(|l| !l.trim().is_empty())
        .context("prompt file is empty")?;
    let docstring = lines.collect::<Vec<_>>().join("\n");
    Ok(Prompt::new(signature, docstring.trim())?)
}

pub fn generate_cmd(args: GenerateArgs) -> Result<()> {
    let seed = resolve_seed(args.seed);
    let (model, codec) = load_lm_checkpoint(&args.model)?;
    let codec = codec.context("checkpoint carries no codec; cannot encode the prompt")?;
    let prompt = read_prompt(&args.prompt_file)?;

    let strategy = match (args.top_k, args.sample) {
        (Some(k), _) => Strategy::TopK(k),
        (None, true) => Strategy::Sample,
        (None, false) => Strategy::Greedy,
    };
    let stop = match args.stop.as_str() {
        "budget" => StopCondition::TokenBudget,
        "dedent" => StopCondition::DedentToColumnZero,
        other => bail!("unknown stop condition {other:?} (expected budget or dedent)"),
    };
    let cfg = GenConfig {
        max_new_tokens: args.max_new_tokens,
        temperature: args.temperature,
        strategy,
        stop,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text = generate(model.as_language_model(), &codec, &prompt, &cfg, &mut rng)?;
    print!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------
// search
// ---------------------------------------------------------------------

pub fn search(args: SearchArgs) -> Result<()> {
    let index = SnippetIndex::load(&args.index)?;
    let model_path = match &args.model {
        Some(path) => path.clone(),
        None => {
            let referenced = PathBuf::from(&index.encoder_checkpoint);
            if referenced.is_absolute() {
                referenced
            } else {
                args.index
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(referenced)
            }
        }
    };
    let dual = DualEncoderModel::load(&model_path)?;
    let outcome = index_search(&args.query, &index, &dual.query, &dual.vocab, args.k)?;
    let hits: Vec<serde_json::Value> = outcome
        .hits
        .iter()
        .enumerate()
        .map(|(rank, hit)| {
            serde_json::json!({
                "rank": rank + 1,
                "score": hit.score,
                "repo": hit.sample.repo,
                "path": hit.sample.path,
                "url": hit.sample.url,
                "docstring": hit.sample.docstring,
                "code": hit.sample.code,
            })
        })
        .collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "query": args.query,
            "truncated_k": outcome.truncated_k,
            "hits": hits,
        }))?
    );
    Ok(())
}

// ---------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------

pub fn eval_bleu(args: EvalBleuArgs) -> Result<()> {
    let seed = resolve_seed(args.seed);
    let (model, codec) = load_lm_checkpoint(&args.model)?;
    let codec = codec.context("checkpoint carries no codec")?;
    let (samples, _) = load_samples(&args.data, None)?;
    if samples.is_empty() {
        bail!("no samples to evaluate");
    }
    let gen = GenConfig {
        max_new_tokens: args.max_new_tokens,
        temperature: 1.0,
        strategy: Strategy::Greedy,
        stop: StopCondition::DedentToColumnZero,
    };
    let report = bleu_on_samples(
        model.as_language_model(),
        &codec,
        &samples,
        &gen,
        seed,
        args.max_samples,
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn eval_novelty(args: EvalNoveltyArgs) -> Result<()> {
    let seed = resolve_seed(args.seed);
    let (model, codec) = load_lm_checkpoint(&args.model)?;
    let codec = codec.context("checkpoint carries no codec")?;
    let (samples, _) = load_samples(&args.data, None)?;
    let (train_samples, _) = load_samples(&args.train_data, None)?;
    let corpus_tokens: Vec<Vec<String>> = train_samples.iter().map(|s| s.code_tokens.clone()).collect();

    let gen = GenConfig {
        max_new_tokens: args.max_new_tokens,
        temperature: 1.0,
        strategy: Strategy::Greedy,
        stop: StopCondition::DedentToColumnZero,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_sample = Vec::new();
    let mut too_short = 0usize;
    for sample in samples.iter().take(args.max_samples.max(1)) {
        let text = generate_for_sample(model.as_language_model(), &codec, sample, &gen, &mut rng)?;
        let tokens = split_code_tokens(&text);
        match ngram_novelty(&tokens, &corpus_tokens, args.n) {
            Ok(novelty) => per_sample.push(novelty),
            Err(_) => too_short += 1,
        }
    }
    if per_sample.is_empty() {
        bail!("every generation was shorter than n = {}", args.n);
    }
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "n": args.n,
            "mean_novelty": mean,
            "per_sample": per_sample,
            "skipped_short": too_short,
        }))?
    );
    Ok(())
}

pub fn eval_perplexity(args: EvalPerplexityArgs) -> Result<()> {
    let (model, codec) = load_lm_checkpoint(&args.model)?;
    let codec = codec.context("checkpoint carries no codec")?;
    let (samples, _) = load_samples(&args.data, None)?;
    if samples.is_empty() {
        bail!("no samples to evaluate");
    }
    let texts: Vec<&str> = samples
        .iter()
        .take(args.max_samples.max(1))
        .map(|s| s.lm_text())
        .collect();
    let ppl = perplexity(
        model.as_language_model(),
        &codec,
        &texts,
        UnknownCharPolicy::Fallback(0),
    )?;
    println!(
        "{}",
        serde_json::json!({"perplexity": ppl, "texts": texts.len()})
    );
    Ok(())
}


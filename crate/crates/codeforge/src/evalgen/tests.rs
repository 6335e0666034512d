use super::*;
use crate::models::CellKind;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Independent BLEU reference: consumes reference n-gram occurrences on
/// match while walking the candidate left to right. Equivalent clipping
/// to the count-min implementation, different code path.
pub(crate) fn bleu_oracle(cands: &[Vec<String>], refs: &[Vec<String>]) -> Option<f64> {
    let mut clipped = [0usize; 4];
    let mut total = [0usize; 4];
    let mut c_len = 0usize;
    let mut r_len = 0usize;
    let mut scored = false;
    for (cand, reference) in cands.iter().zip(refs) {
        if cand.is_empty() || reference.is_empty() {
            continue;
        }
        scored = true;
        c_len += cand.len();
        r_len += reference.len();
        for n in 1..=4usize {
            if cand.len() < n {
                continue;
            }
            let mut pool: Vec<&[String]> = reference.windows(n).collect();
            for w in cand.windows(n) {
                total[n - 1] += 1;
                if let Some(pos) = pool.iter().position(|p| *p == w) {
                    pool.swap_remove(pos);
                    clipped[n - 1] += 1;
                }
            }
        }
    }
    if !scored {
        return None;
    }
    let mut log_sum = 0.0f64;
    for n in 0..4 {
        let p = if total[n] > 0 {
            clipped[n] as f64 / total[n] as f64
        } else {
            0.0
        };
        if p == 0.0 {
            return Some(0.0);
        }
        log_sum += 0.25 * p.ln();
    }
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    Some(bp * log_sum.exp())
}

pub(crate) fn random_token_corpus(rng: &mut ChaCha8Rng, pairs: usize) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    fn gen_seq(rng: &mut ChaCha8Rng, min: usize) -> Vec<String> {
        let alphabet = ["a", "b", "c", "d", "e", "ret", "x", "(", ")"];
        let len = rng.random_range(min..12);
        (0..len)
            .map(|_| alphabet[rng.random_range(0..alphabet.len())].to_string())
            .collect()
    }
    let refs: Vec<Vec<String>> = (0..pairs).map(|_| gen_seq(rng, 4)).collect();
    let cands: Vec<Vec<String>> = refs
        .iter()
        .map(|r| {
            if rng.random::<f64>() < 0.3 {
                r.clone() // exact copies keep high-precision paths covered
            } else {
                gen_seq(rng, 1)
            }
        })
        .collect();
    (cands, refs)
}

#[test]
fn bleu_identity_is_one() {
    let refs = vec![toks("def f ( x ) : return x"), toks("a b c d e")];
    let report = corpus_bleu(&refs, &refs).unwrap();
    assert_eq!(report.bleu, 1.0);
    assert_eq!(report.precisions, [1.0; 4]);
    assert_eq!(report.brevity_penalty, 1.0);
}

#[test]
fn bleu_half_prefix_is_brevity_penalty_only() {
    let reference = toks("a b c d e f g h");
    let candidate = toks("a b c d");
    let report = corpus_bleu(&[candidate], &[reference]).unwrap();
    assert_eq!(report.precisions, [1.0; 4]);
    assert!((report.bleu - (-1.0f64).exp()).abs() < 1e-12);
    assert!((report.brevity_penalty - (-1.0f64).exp()).abs() < 1e-12);
}

#[test]
fn bleu_zero_fourgram_overlap_is_zero() {
    let report = corpus_bleu(&[toks("a b c x")], &[toks("a b c d")]).unwrap();
    assert_eq!(report.bleu, 0.0);
    assert!(report.precisions[3] == 0.0 && report.precisions[0] > 0.0);
}

#[test]
fn bleu_empty_reference_pairs_are_skipped_and_counted() {
    let cands = vec![toks("a b"), toks("a b c d")];
    let refs = vec![vec![], toks("a b c d")];
    let report = corpus_bleu(&cands, &refs).unwrap();
    assert_eq!(report.skipped_pairs, 1);
    assert_eq!(report.pair_count, 1);
    assert!(corpus_bleu(&[toks("a")], &[vec![]]).is_err());
    assert!(corpus_bleu(&[], &[]).is_err());
}

#[test]
fn bleu_empty_candidate_scores_zero_without_error() {
    let report = corpus_bleu(&[vec![]], &[toks("a b c d")]).unwrap();
    assert_eq!(report.bleu, 0.0);
    assert_eq!(report.brevity_penalty, 0.0);
    assert_eq!(report.pair_count, 1);
}

#[test]
fn bleu_matches_oracle_on_random_corpora() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for _ in 0..40 {
        let (cands, refs) = random_token_corpus(&mut rng, 5);
        let Some(expected) = bleu_oracle(&cands, &refs) else {
            continue;
        };
        let got = corpus_bleu(&cands, &refs).unwrap().bleu;
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }
}

#[test]
fn novelty_examples() {
    let corpus = vec![toks("a b"), toks("e f g")];
    assert_eq!(ngram_novelty(&toks("a b c"), &corpus, 2).unwrap(), 0.5);
    assert_eq!(ngram_novelty(&toks("e f g"), &corpus, 2).unwrap(), 0.0);
    assert_eq!(ngram_novelty(&toks("x y z"), &corpus, 2).unwrap(), 1.0);
    assert!(ngram_novelty(&toks("a"), &corpus, 2).is_err());
    assert!(ngram_novelty(&toks("a b"), &corpus, 0).is_err());
}

fn uniform_lm(vocab: usize) -> RecurrentLm<f32> {
    let lm = RecurrentLm::init(
        RecurrentLmConfig {
            cell: CellKind::Gru,
            hidden: 8,
            layers: 1,
            vocab,
            dropout: 0.0,
        },
        1,
    )
    .unwrap();
    for p in lm.params_t() {
        p.tensor.set_data(&vec![0.0; p.tensor.len()]);
    }
    lm
}

#[test]
fn perplexity_of_uniform_model_is_vocab_size() {
    let text = "abcdefghabcdefgh";
    let vocab = CharVocab::build(text);
    let v = vocab.len();
    let lm = uniform_lm(v);
    let ppl = perplexity(&lm, &TokenCodec::Char(vocab), &[text], UnknownCharPolicy::Fail).unwrap();
    assert!((ppl - v as f64).abs() < 1e-3, "uniform perplexity {ppl} vs vocab {v}");
}

#[test]
fn untrained_char_lm_perplexity_tracks_its_1618_symbol_vocab() {
    // 1,618 distinct symbols, the full character inventory of the
    // reference corpus scale; an untrained model must sit at ~vocab.
    let chars: String = (0..1618u32)
        .map(|i| char::from_u32(0x4E00 + i).expect("CJK block codepoint"))
        .collect();
    let vocab = CharVocab::build(&chars);
    assert_eq!(vocab.len(), 1618);
    let codec = TokenCodec::Char(vocab);
    let lm = RecurrentLm::init(
        RecurrentLmConfig {
            cell: CellKind::Lstm,
            hidden: 32,
            layers: 2,
            vocab: 1618,
            dropout: 0.0,
        },
        3,
    )
    .unwrap();
    let eval_text: String = chars.chars().take(400).collect();
    let ppl = perplexity(&lm, &codec, &[&eval_text], UnknownCharPolicy::Fail).unwrap();
    let rel = (ppl - 1618.0).abs() / 1618.0;
    assert!(rel < 0.02, "untrained perplexity {ppl} strays {rel:.4} from 1618");
}

#[test]
fn perplexity_equals_exp_of_cross_entropy() {
    let text = "def f(x): return x\n";
    let vocab = CharVocab::build(text);
    let codec = TokenCodec::Char(vocab);
    let lm = RecurrentLm::init(
        RecurrentLmConfig {
            cell: CellKind::Lstm,
            hidden: 8,
            layers: 1,
            vocab: codec.vocab_size(),
            dropout: 0.0,
        },
        7,
    )
    .unwrap();
    let ids = codec.encode(text).unwrap();
    let (nll, positions) = lm_eval_nll(&lm, &ids, 256).unwrap();
    let expected = (nll / positions as f64).exp();
    let got = perplexity(&lm, &codec, &[text], UnknownCharPolicy::Fail).unwrap();
    assert!((got - expected).abs() < 1e-12);
}

fn fixture_sample(i: usize) -> Sample {
    let code = format!(
        "def fn_{i}(x):\n    \"\"\"doc number {i}\"\"\"\n    y = x + {i}\n    return y\n"
    );
    Sample {
        repo: "r".into(),
        path: format!("m/{i}.py"),
        language: "python".into(),
        docstring: format!("doc number {i}"),
        code_tokens: split_code_tokens(&code),
        docstring_tokens: toks(&format!("doc number {i}")),
        code,
        url: None,
    }
}

#[test]
fn prompt_splits_canonical_code_exactly() {
    let sample = fixture_sample(3);
    let (prompt, body) = split_prompt_body(&sample).unwrap();
    assert_eq!(prompt.signature, "def fn_3(x):");
    assert_eq!(body, "    y = x + 3\n    return y\n");
    assert_eq!(format!("{}{}", prompt.render(), body), sample.code);
}

#[test]
fn generation_budget_zero_is_empty() {
    let text = "abab\n";
    let vocab = CharVocab::build(text);
    let codec = TokenCodec::Char(vocab);
    let lm = uniform_lm(codec.vocab_size());
    let prompt = Prompt::new("ab", "").unwrap();
    let cfg = GenConfig {
        max_new_tokens: 0,
        ..GenConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(generate(&lm, &codec, &prompt, &cfg, &mut rng).unwrap(), "");
}

#[test]
fn greedy_generation_is_deterministic() {
    let text = "def f(x):\n    return x\n";
    let vocab = CharVocab::build(text);
    let codec = TokenCodec::Char(vocab);
    let lm = RecurrentLm::init(
        RecurrentLmConfig {
            cell: CellKind::Lstm,
            hidden: 12,
            layers: 1,
            vocab: codec.vocab_size(),
            dropout: 0.0,
        },
        21,
    )
    .unwrap();
    let prompt = Prompt::new("def f(x):", "").unwrap();
    let cfg = GenConfig {
        max_new_tokens: 24,
        ..GenConfig::default()
    };
    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate(&lm, &codec, &prompt, &cfg, &mut rng).unwrap()
    };
    assert_eq!(run(1), run(999), "greedy decode may not depend on the rng");
}

#[test]
fn dedent_stop_cuts_at_column_zero() {
    assert_eq!(dedent_cut("    a = 1\n    b = 2\ndef g():"), Some(20));
    assert_eq!(dedent_cut("    a = 1\n    b = 2\n"), None);
    let text = "    x\nreturn-at-zero";
    let cut = dedent_cut(text).unwrap();
    assert_eq!(&text[..cut], "    x\n");
}

#[test]
fn sampling_respects_top_k_one_as_greedy() {
    let logits = vec![0.1f32, 2.0, -1.0, 1.9];
    let cfg_greedy = GenConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let greedy = pick_next(&logits, &cfg_greedy, &mut rng);
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = GenConfig {
            strategy: Strategy::TopK(1),
            temperature: 0.7,
            ..GenConfig::default()
        };
        assert_eq!(pick_next(&logits, &cfg, &mut rng), greedy);
    }
}

#[test]
fn sampling_draws_only_high_probability_tokens_at_low_temperature() {
    let logits = vec![8.0f32, 0.0, 0.0, 0.0];
    let cfg = GenConfig {
        strategy: Strategy::Sample,
        temperature: 0.25,
        ..GenConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        assert_eq!(pick_next(&logits, &cfg, &mut rng), 0);
    }
}

#[test]
fn transformer_prompt_longer_than_context_errors() {
    use crate::models::{TransformerConfig, TransformerLm};
    let mut cfg = TransformerConfig::desk_default(16);
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.width = 8;
    cfg.ffw = 16;
    cfg.context = 8;
    let lm = TransformerLm::init(cfg, 3).unwrap();
    let ids: Vec<u32> = (0..8).collect();
    let gen = GenConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(generate_ids(&lm, &ids, &gen, &mut rng).is_err());
    assert!(generate_ids(&lm, &ids[..4], &gen, &mut rng).is_ok());
}

#[test]
fn bleu_sweep_is_deterministic_and_shaped() {
    let train: Vec<Sample> = (0..4).map(fixture_sample).collect();
    let eval: Vec<Sample> = (4..6).map(fixture_sample).collect();
    let grid = vec![
        SweepPoint {
            batch_size: 4,
            starter_lr: 0.01,
            reg_weight: 0.01,
        },
        SweepPoint {
            batch_size: 8,
            starter_lr: 0.002,
            reg_weight: 0.1,
        },
    ];
    let template = RecurrentLmConfig {
        cell: CellKind::Gru,
        hidden: 8,
        layers: 1,
        vocab: 0,
        dropout: 0.0,
    };
    let base = TrainConfig {
        epochs: 2,
        seq_len: 16,
        ..TrainConfig::char_lm_default()
    };
    let gen = GenConfig {
        max_new_tokens: 16,
        stop: StopCondition::DedentToColumnZero,
        ..GenConfig::default()
    };
    let run = || run_char_lm_bleu_sweep(&grid, &train, &eval, &template, &base, &gen, 3);
    let a = run();
    let b = run();
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.train_metric, y.train_metric);
        assert_eq!(x.eval_metric, y.eval_metric);
        assert!(x.error.is_none(), "{:?}", x.error);
    }
}

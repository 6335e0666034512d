//! Property tests for the cross-cutting invariants: codec roundtrips,
//! split partitioning, statistics invariance, and softmax laws.

use proptest::collection::vec;
use proptest::prelude::*;

use codeforge::corpus::{compute_stats, load_jsonl, save_jsonl, split, Sample, SplitSpec};
use codeforge::models::{Encoder, EncoderConfig};
use codeforge::numeric::Tensor;
use codeforge::tokenizers::{BpeModel, CharVocab};

fn arb_sample() -> impl Strategy<Value = Sample> {
    (
        "[a-z]{1,8}",
        ".{0,40}",
        "[ -~]{1,60}",
        vec("[a-zA-Z0-9_(){}:+.,=]{1,8}", 1..8),
        proptest::option::of("https?://[a-z]{3,10}\\.com"),
    )
        .prop_map(|(name, doc, body, tokens, url)| Sample {
            repo: "prop".into(),
            path: format!("{name}.py"),
            language: "python".into(),
            code: format!("def {name}():\n    {body}\n"),
            docstring: doc,
            code_tokens: tokens.clone(),
            docstring_tokens: tokens,
            url,
        })
}

proptest! {
    /// Loading, re-serializing to JSONL, and reloading yields
    /// field-identical samples.
    #[test]
    fn corpus_jsonl_roundtrip(samples in vec(arb_sample(), 0..12)) {
        let file = tempfile::NamedTempFile::new().unwrap();
        save_jsonl(file.path(), &samples).unwrap();
        let (reloaded, report) = load_jsonl(file.path(), "python").unwrap();
        prop_assert_eq!(report.skipped(), 0);
        prop_assert_eq!(reloaded, samples);
    }

    /// train ∪ valid ∪ test partitions the retained subset exactly, with
    /// no duplicates, for any seed and fraction mix.
    #[test]
    fn split_partitions_exactly(
        n in 1usize..80,
        seed in any::<u64>(),
        a in 1u32..10,
        b in 0u32..10,
        c in 0u32..10,
        subset_pct in 1u32..=100,
    ) {
        let total = (a + b + c) as f64;
        let fractions = (a as f64 / total, b as f64 / total, c as f64 / total);
        let subset = subset_pct as f64 / 100.0;
        let samples: Vec<Sample> = (0..n)
            .map(|i| Sample {
                repo: "prop".into(),
                path: format!("{i}.py"),
                language: "python".into(),
                code: format!("def f{i}(): pass"),
                docstring: "d".into(),
                code_tokens: vec!["def".into()],
                docstring_tokens: vec!["d".into()],
                url: None,
            })
            .collect();
        let spec = SplitSpec::new(seed, fractions, subset).unwrap();
        let (train, valid, test) = split(&samples, &spec).unwrap();

        let retained = (subset * n as f64).round() as usize;
        prop_assert_eq!(train.len() + valid.len() + test.len(), retained);
        let mut seen = std::collections::HashSet::new();
        for s in train.iter().chain(&valid).chain(&test) {
            prop_assert!(seen.insert(s.path.clone()), "duplicate {} across splits", s.path);
        }

        // same seed, same membership
        let again = split(&samples, &spec).unwrap();
        prop_assert_eq!((train, valid, test), again);
    }

    /// Statistics ignore sample order.
    #[test]
    fn stats_are_permutation_invariant(mut samples in vec(arb_sample(), 1..10), rotate in 0usize..10) {
        let before = compute_stats(&samples);
        let k = rotate % samples.len();
        samples.rotate_left(k);
        samples.reverse();
        prop_assert_eq!(compute_stats(&samples), before);
    }

    /// The char codec reproduces any string drawn from its own vocabulary.
    #[test]
    fn char_codec_roundtrips_vocab_strings(corpus in ".{1,60}", picks in vec(any::<prop::sample::Index>(), 0..40)) {
        let vocab = CharVocab::build(&corpus);
        let chars: Vec<char> = corpus.chars().collect();
        let text: String = picks.iter().map(|ix| chars[ix.index(chars.len())]).collect();
        let ids = vocab.encode(&text).unwrap();
        prop_assert_eq!(vocab.decode(&ids).unwrap(), text);
    }

    /// Byte-level BPE roundtrips arbitrary unicode, regardless of the
    /// corpus it was trained on.
    #[test]
    fn bpe_roundtrips_arbitrary_text(corpus in "[ -~]{0,80}", text in ".*") {
        let model = BpeModel::train(corpus.as_bytes(), 280).unwrap();
        prop_assert_eq!(model.decode(&model.encode(&text)).unwrap(), text);
    }

    /// Encoding is deterministic: identical input and model give
    /// identical ids.
    #[test]
    fn bpe_encoding_is_deterministic(corpus in "[ -~]{1,60}", text in "[ -~]{0,60}") {
        let a = BpeModel::train(corpus.as_bytes(), 270).unwrap();
        let b = BpeModel::train(corpus.as_bytes(), 270).unwrap();
        prop_assert_eq!(a.encode(&text), b.encode(&text));
        prop_assert_eq!(a.merges(), b.merges());
    }

    /// Softmax rows sum to one within 1e-6 for any lane shape.
    #[test]
    fn softmax_lanes_sum_to_one(rows in 1usize..5, cols in 1usize..7, scale in 0.1f64..4.0, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::<f32>::rand_normal(&[rows, cols], scale, &mut rng);
        let s = t.softmax(1).unwrap();
        let data = s.to_vec();
        for r in 0..rows {
            let sum: f64 = data[r * cols..(r + 1) * cols].iter().map(|&x| x as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row {} sums to {}", r, sum);
        }
    }

    /// NBoW is exactly order-invariant on any token multiset.
    #[test]
    fn nbow_is_bag_invariant(tokens in vec(0u32..20, 1..12), rotate in 0usize..12) {
        let enc = Encoder::<f32>::init(EncoderConfig::nbow(20, 6, 4), 5).unwrap();
        let base = enc.encode(&tokens).unwrap().to_vec();
        let mut shuffled = tokens.clone();
        let k = rotate % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        prop_assert_eq!(enc.encode(&shuffled).unwrap().to_vec(), base);
    }
}

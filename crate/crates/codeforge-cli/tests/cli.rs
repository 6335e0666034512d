//! End-to-end tests of the `codeforge` binary: the dispatch contract
//! (exit codes, stderr shape), the per-subcommand artifacts, and the
//! determinism criterion (bit-identical checkpoints under a fixed seed).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_codeforge"));
    // keep the environment's global seed out of the contract tests
    cmd.env_remove("CODEFORGE_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn codeforge")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// Writes a small CodeSearchNet-shaped JSONL fixture.
fn write_fixture(path: &Path, n: usize) {
    let mut lines = String::new();
    for i in 0..n {
        let code = format!(
            "def item_fn_{i}(values):\n    \"\"\"Return item {i} of the values.\"\"\"\n    out = []\n    for v in values:\n        out.append(v + {i})\n    return out\n"
        );
        let doc = format!("Return item {i} of the values.");
        let tokens: Vec<String> = codeforge::tokenizers::split_code_tokens(&code);
        let sample = serde_json::json!({
            "repo": "fixture",
            "path": format!("m/{i}.py"),
            "language": "python",
            "code": code,
            "docstring": doc,
            "code_tokens": tokens,
            "docstring_tokens": doc.split_whitespace().collect::<Vec<_>>(),
            "url": format!("https://example.com/{i}"),
        });
        lines.push_str(&sample.to_string());
        lines.push('\n');
    }
    // one record in another language, exercising the filter
    lines.push_str(
        &serde_json::json!({
            "repo": "fixture", "path": "g.go", "language": "go",
            "code": "func G() {}", "docstring": "go doc",
            "code_tokens": ["func"], "docstring_tokens": ["go"]
        })
        .to_string(),
    );
    lines.push('\n');
    std::fs::write(path, lines).unwrap();
}

fn ingest_fixture(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let corpus = dir.join("corpus.jsonl");
    write_fixture(&corpus, n);
    let data = dir.join("data");
    let out = run(&[
        "ingest",
        "--input",
        corpus.to_str().unwrap(),
        "--language",
        "python",
        "--seed",
        &seed.to_string(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn help_lists_every_subcommand_and_exits_zero() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "ingest", "stats", "tokenize", "train-lm", "train-search", "sweep", "generate", "search", "eval",
    ] {
        assert!(text.contains(sub), "--help is missing {sub}");
    }
}

#[test]
fn unknown_subcommand_exits_two() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn operational_error_exits_one_with_single_line_json() {
    let out = run(&["stats", "--input", "/definitely/not/here.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let mut lines = stderr.lines().filter(|l| !l.trim().is_empty());
    let line = lines.next().expect("one stderr line");
    assert!(lines.next().is_none(), "stderr must be a single line: {stderr}");
    let parsed: serde_json::Value = serde_json::from_str(line).expect("machine-parsable stderr");
    assert!(parsed.get("error").is_some());
}

#[test]
fn ingest_writes_splits_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    write_fixture(&corpus, 40);
    let data = dir.path().join("data");
    let out = run(&[
        "ingest",
        "--input",
        corpus.to_str().unwrap(),
        "--language",
        "python",
        "--subset",
        "0.5",
        "--seed",
        "3",
        "--out",
        data.to_str().unwrap(),
    ]);
    let summary = stdout_json(&out);
    assert_eq!(summary["loaded"], 40);
    assert_eq!(summary["filtered_language"], 1);
    let train = summary["train"].as_u64().unwrap();
    let valid = summary["valid"].as_u64().unwrap();
    let test = summary["test"].as_u64().unwrap();
    assert_eq!(train + valid + test, 20, "subset 0.5 of 40");

    for name in ["train.jsonl", "valid.jsonl", "test.jsonl", "run_manifest.json"] {
        assert!(data.join(name).exists(), "missing {name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "ingest");
    assert_eq!(manifest["seed"], 3);
    assert!(manifest["toolkit_version"].is_string());
}

#[test]
fn stats_reports_corpus_shape() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    write_fixture(&corpus, 12);
    let out = run(&["stats", "--input", corpus.to_str().unwrap(), "--language", "python"]);
    let stats = stdout_json(&out);
    assert_eq!(stats["method_count"], 12);
    assert_eq!(stats["sample_count"], 12);
    assert!(stats["code_token_length_quantiles"]["50"].as_u64().unwrap() > 0);
}

#[test]
fn tokenize_subcommands_produce_loadable_codecs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    write_fixture(&corpus, 8);

    let bpe_path = dir.path().join("bpe.json");
    let out = run(&[
        "tokenize",
        "train-bpe",
        "--input",
        corpus.to_str().unwrap(),
        "--vocab-size",
        "300",
        "--out",
        bpe_path.to_str().unwrap(),
    ]);
    let info = stdout_json(&out);
    assert!(info["vocab_size"].as_u64().unwrap() <= 300);
    let codec = codeforge::tokenizers::TokenCodec::load(&bpe_path).unwrap();
    assert_eq!(codec.decode(&codec.encode("def f(x):\n").unwrap()).unwrap(), "def f(x):\n");

    let char_path = dir.path().join("char.json");
    let out = run(&[
        "tokenize",
        "build-char",
        "--input",
        corpus.to_str().unwrap(),
        "--out",
        char_path.to_str().unwrap(),
    ]);
    stdout_json(&out);
    assert!(codeforge::tokenizers::TokenCodec::load(&char_path).is_ok());
}

fn train_tiny_lm(data: &Path, out_dir: &Path, seed_args: &[&str]) -> Output {
    let mut args = vec![
        "train-lm",
        "--arch",
        "char",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--epochs",
        "2",
        "--hidden",
        "12",
        "--layers",
        "1",
        "--batch-size",
        "4",
        "--seq-len",
        "24",
    ];
    args.extend_from_slice(seed_args);
    bin().args(&args).output().expect("spawn")
}

#[test]
fn acceptance_c11_train_subcommands_are_bit_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = ingest_fixture(dir.path(), 24, 5);

    // train-lm twice with identical config + seed
    let (lm_a, lm_b) = (dir.path().join("lm_a"), dir.path().join("lm_b"));
    for out_dir in [&lm_a, &lm_b] {
        let out = train_tiny_lm(&data, out_dir, &["--seed", "17"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["epoch_000.ckpt", "epoch_001.ckpt", "codec.json"] {
        let a = std::fs::read(lm_a.join(name)).unwrap();
        let b = std::fs::read(lm_b.join(name)).unwrap();
        if a != b {
            println!("ACCEPTANCE C11 determinism: FAIL (train-lm {name} differs)");
            panic!("train-lm artifact {name} not bit-identical");
        }
    }

    // train-search twice with identical config + seed
    let (se_a, se_b) = (dir.path().join("se_a"), dir.path().join("se_b"));
    for out_dir in [&se_a, &se_b] {
        let out = run(&[
            "train-search",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            "23",
            "--epochs",
            "2",
            "--batch-size",
            "8",
            "--embed-dim",
            "12",
            "--output-dim",
            "12",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["dual.ckpt", "snippets.idx", "snippets.idx.entries.jsonl"] {
        let a = std::fs::read(se_a.join(name)).unwrap();
        let b = std::fs::read(se_b.join(name)).unwrap();
        if a != b {
            println!("ACCEPTANCE C11 determinism: FAIL (train-search {name} differs)");
            panic!("train-search artifact {name} not bit-identical");
        }
    }
    println!("ACCEPTANCE C11 determinism: PASS");
}

#[test]
fn codeforge_seed_env_is_the_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let data = ingest_fixture(dir.path(), 16, 2);
    let run_with_env = |out_dir: &Path| {
        let mut cmd = bin();
        cmd.env("CODEFORGE_SEED", "99");
        cmd.args([
            "train-lm",
            "--arch",
            "char",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--epochs",
            "1",
            "--hidden",
            "8",
            "--layers",
            "1",
            "--batch-size",
            "4",
            "--seq-len",
            "16",
        ]);
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let (a, b) = (dir.path().join("env_a"), dir.path().join("env_b"));
    run_with_env(&a);
    run_with_env(&b);
    assert_eq!(
        std::fs::read(a.join("epoch_000.ckpt")).unwrap(),
        std::fs::read(b.join("epoch_000.ckpt")).unwrap()
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 99);
}

#[test]
fn generate_is_deterministic_under_greedy() {
    let dir = tempfile::tempdir().unwrap();
    let data = ingest_fixture(dir.path(), 16, 4);
    let lm_dir = dir.path().join("lm");
    let out = train_tiny_lm(&data, &lm_dir, &["--seed", "8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let prompt = dir.path().join("prompt.txt");
    std::fs::write(&prompt, "def item_fn_0(values):\nReturn item 0 of the values.\n").unwrap();
    let model = lm_dir.join("epoch_001.ckpt");
    let gen = |seed: &str| {
        let out = run(&[
            "generate",
            "--model",
            model.to_str().unwrap(),
            "--prompt-file",
            prompt.to_str().unwrap(),
            "--max-new-tokens",
            "24",
            "--stop",
            "budget",
            "--seed",
            seed,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    assert_eq!(gen("1"), gen("2"), "greedy decode must ignore the sampling seed");
}

#[test]
fn search_returns_ranked_hits() {
    let dir = tempfile::tempdir().unwrap();
    let data = ingest_fixture(dir.path(), 20, 6);
    let se_dir = dir.path().join("se");
    let out = run(&[
        "train-search",
        "--data",
        data.to_str().unwrap(),
        "--out",
        se_dir.to_str().unwrap(),
        "--seed",
        "6",
        "--epochs",
        "3",
        "--batch-size",
        "8",
        "--embed-dim",
        "16",
        "--output-dim",
        "16",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = run(&[
        "search",
        "--index",
        se_dir.join("snippets.idx").to_str().unwrap(),
        "--query",
        "Return item 3 of the values",
        "-k",
        "4",
    ]);
    let result = stdout_json(&out);
    let hits = result["hits"].as_array().unwrap();
    assert_eq!(hits.len(), 4);
    assert_eq!(hits[0]["rank"], 1);
    let scores: Vec<f64> = hits.iter().map(|h| h["score"].as_f64().unwrap()).collect();
    for w in scores.windows(2) {
        assert!(w[0] >= w[1], "hits must be score-descending: {scores:?}");
    }
    assert_eq!(result["truncated_k"], false);

    let out = run(&[
        "search",
        "--index",
        se_dir.join("snippets.idx").to_str().unwrap(),
        "--query",
        "anything",
        "-k",
        "999",
    ]);
    let result = stdout_json(&out);
    assert_eq!(result["truncated_k"], true);
}

#[test]
fn eval_subcommands_emit_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = ingest_fixture(dir.path(), 16, 7);
    let lm_dir = dir.path().join("lm");
    let out = train_tiny_lm(&data, &lm_dir, &["--seed", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model = lm_dir.join("epoch_001.ckpt");

    let out = run(&[
        "eval",
        "perplexity",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.join("train.jsonl").to_str().unwrap(),
    ]);
    let ppl = stdout_json(&out);
    assert!(ppl["perplexity"].as_f64().unwrap() > 1.0);

    let out = run(&[
        "eval",
        "bleu",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.join("train.jsonl").to_str().unwrap(),
        "--max-samples",
        "2",
        "--max-new-tokens",
        "24",
    ]);
    let bleu = stdout_json(&out);
    assert!(bleu["bleu"].as_f64().unwrap() >= 0.0);
    assert_eq!(bleu["precisions"].as_array().unwrap().len(), 4);
}

#[test]
fn transformer_arch_trains_and_generates() {
    let dir = tempfile::tempdir().unwrap();
    let data = ingest_fixture(dir.path(), 16, 12);
    let lm_dir = dir.path().join("gpt");
    let out = run(&[
        "train-lm",
        "--arch",
        "transformer",
        "--data",
        data.to_str().unwrap(),
        "--out",
        lm_dir.to_str().unwrap(),
        "--seed",
        "3",
        "--epochs",
        "1",
        "--hidden",
        "16",
        "--layers",
        "1",
        "--heads",
        "2",
        "--context",
        "32",
        "--batch-size",
        "2",
        "--seq-len",
        "24",
        "--bpe-vocab-size",
        "300",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(lm_dir.join("codec.json").exists(), "on-the-fly BPE codec saved");

    let prompt = dir.path().join("prompt.txt");
    std::fs::write(&prompt, "def item_fn_1(values):\n").unwrap();
    let out = run(&[
        "generate",
        "--model",
        lm_dir.join("epoch_000.ckpt").to_str().unwrap(),
        "--prompt-file",
        prompt.to_str().unwrap(),
        "--max-new-tokens",
        "16",
        "--stop",
        "budget",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_applies_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = ingest_fixture(dir.path(), 16, 13);
    let config = dir.path().join("train.json");
    std::fs::write(
        &config,
        serde_json::json!({"epochs": 1, "batch_size": 4, "seq_len": 16, "starter_lr": 0.004}).to_string(),
    )
    .unwrap();

    // config file alone: one epoch
    let out_a = dir.path().join("a");
    let out = run(&[
        "train-lm",
        "--arch",
        "char",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_a.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--hidden",
        "8",
        "--layers",
        "1",
        "--seed",
        "2",
    ]);
    let report = stdout_json(&out);
    assert_eq!(report["epochs"].as_array().unwrap().len(), 1);

    // an explicit flag beats the file
    let out_b = dir.path().join("b");
    let out = run(&[
        "train-lm",
        "--arch",
        "char",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--epochs",
        "2",
        "--hidden",
        "8",
        "--layers",
        "1",
        "--seed",
        "2",
    ]);
    let report = stdout_json(&out);
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_b.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train"]["epochs"], 2);
    assert_eq!(manifest["config"]["train"]["starter_lr"], 0.004);
}

#[test]
fn eval_novelty_reports_too_short_generations_as_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = ingest_fixture(dir.path(), 12, 14);
    let lm_dir = dir.path().join("lm");
    let out = train_tiny_lm(&data, &lm_dir, &["--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // an untrained model generates whitespace; every candidate tokenizes
    // empty, which must surface as a clean operational error
    let out = run(&[
        "eval",
        "novelty",
        "--model",
        lm_dir.join("epoch_001.ckpt").to_str().unwrap(),
        "--data",
        data.join("valid.jsonl").to_str().unwrap(),
        "--train-data",
        data.join("train.jsonl").to_str().unwrap(),
        "-n",
        "2",
        "--max-samples",
        "2",
        "--max-new-tokens",
        "8",
    ]);
    match out.status.code() {
        Some(0) => {
            let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
            let mean = report["mean_novelty"].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&mean));
        }
        Some(1) => {
            let parsed: serde_json::Value =
                serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
            assert!(parsed["error"].as_str().unwrap().contains("shorter than n"));
        }
        other => panic!("unexpected exit status {other:?}"),
    }
}

#[test]
fn sweep_emits_requested_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = ingest_fixture(dir.path(), 16, 8);
    let grid_path = dir.path().join("grid.json");
    std::fs::write(
        &grid_path,
        serde_json::json!([
            {"batch_size": 4, "starter_lr": 0.01, "reg_weight": 0.01},
            {"batch_size": 8, "starter_lr": 0.002, "reg_weight": 0.1},
        ])
        .to_string(),
    )
    .unwrap();
    let sweep_dir = dir.path().join("sweep");
    let out = run(&[
        "sweep",
        "--grid",
        grid_path.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        sweep_dir.to_str().unwrap(),
        "--seed",
        "4",
        "--epochs",
        "1",
        "--hidden",
        "8",
        "--layers",
        "1",
        "--max-eval-samples",
        "2",
        "--gen-tokens",
        "16",
        "--seq-len",
        "24",
    ]);
    let rows = stdout_json(&out);
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert!(sweep_dir.join("sweep.json").exists());
    assert!(sweep_dir.join("run_manifest.json").exists());
}

//! CodeSearchNet-format corpus ingestion, deterministic splits, and statistics.
//!
//! Input files are JSONL: UTF-8, one JSON object per line, with the
//! CodeSearchNet field names (`repo`, `path`, `language`, `code`,
//! `docstring`, `code_tokens`, `docstring_tokens`, `url`). Unknown fields
//! are ignored; `url` and `repo`/`path` are optional.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One (docstring, code) pair with provenance metadata.
///
/// `code` holds the raw function source including the signature. A sample
/// with an empty `docstring` can still enter the LM-only corpus; only
/// samples with both docstring and token sequences participate in the
/// paired retrieval dataset (see [`Sample::is_paired`]).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    #[serde(default)]
    pub repo: String,
    #[serde(default)]
    pub path: String,
    pub language: String,
    pub code: String,
    pub docstring: String,
    pub code_tokens: Vec<String>,
    pub docstring_tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

impl Sample {
    /// Text this sample contributes to an LM training stream: the raw
    /// `code` field, docstring left in place.
    pub fn lm_text(&self) -> &str {
        &self.code
    }

    /// Whether the sample qualifies for the paired (docstring, code)
    /// dataset: non-empty docstring and non-empty token sequences.
    pub fn is_paired(&self) -> bool {
        !self.docstring.trim().is_empty()
            && !self.code_tokens.is_empty()
            && !self.docstring_tokens.is_empty()
    }
}

/// Skip accounting for one [`load_jsonl`] run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    /// Lines that failed to parse as JSON at all.
    pub malformed_lines: usize,
    /// Records missing a mandatory field (`language`, `code`, `docstring`,
    /// `code_tokens`, `docstring_tokens`) or with an all-whitespace `code`.
    pub missing_fields: usize,
    /// Well-formed records whose `language` did not match the filter.
    pub filtered_language: usize,
}

impl LoadReport {
    /// Records skipped for cause (malformed or incomplete). Language
    /// filtering is selection, not a skip.
    pub fn skipped(&self) -> usize {
        self.malformed_lines + self.missing_fields
    }
}

// Loose mirror of Sample used to distinguish "missing field" from
// "malformed JSON" while parsing.
#[derive(Deserialize)]
struct RawSample {
    #[serde(default)]
    repo: String,
    #[serde(default)]
    path: String,
    language: Option<String>,
    code: Option<String>,
    docstring: Option<String>,
    code_tokens: Option<Vec<String>>,
    docstring_tokens: Option<Vec<String>>,
    #[serde(default)]
    url: Option<String>,
}

/// Loads all records from a JSONL file whose `language` equals
/// `language_filter`, in file order.
///
/// Malformed lines and records with missing mandatory fields are skipped
/// and counted in the returned [`LoadReport`]; an unreadable file is fatal.
pub fn load_jsonl(path: impl AsRef<Path>, language_filter: &str) -> Result<(Vec<Sample>, LoadReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut samples = Vec::new();
    let mut report = LoadReport::default();

    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = match serde_json::from_str(&line) {
            Ok(raw) => raw,
            Err(_) => {
                report.malformed_lines += 1;
                continue;
            }
        };
        let language = match raw.language {
            Some(ref l) => l.as_str(),
            None => {
                report.missing_fields += 1;
                continue;
            }
        };
        if language != language_filter {
            report.filtered_language += 1;
            continue;
        }
        match (raw.code, raw.docstring, raw.code_tokens, raw.docstring_tokens) {
            (Some(code), Some(docstring), Some(code_tokens), Some(docstring_tokens))
                if !code.trim().is_empty() =>
            {
                samples.push(Sample {
                    repo: raw.repo,
                    path: raw.path,
                    language: language.to_string(),
                    code,
                    docstring,
                    code_tokens,
                    docstring_tokens,
                    url: raw.url,
                });
            }
            _ => report.missing_fields += 1,
        }
    }

    Ok((samples, report))
}

/// [`load_jsonl`] without the language filter: every well-formed record
/// is returned regardless of language.
pub fn load_jsonl_any_language(path: impl AsRef<Path>) -> Result<(Vec<Sample>, LoadReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut samples = Vec::new();
    let mut report = LoadReport::default();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Sample>(&line) {
            Ok(sample) if !sample.code.trim().is_empty() => samples.push(sample),
            Ok(_) => report.missing_fields += 1,
            Err(_) => report.malformed_lines += 1,
        }
    }
    Ok((samples, report))
}

/// Writes samples as JSONL, one object per line, using the same field
/// names [`load_jsonl`] reads. Loading the output yields field-identical
/// samples.
pub fn save_jsonl(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    for sample in samples {
        serde_json::to_writer(&mut writer, sample)?;
        writer.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Deterministic split configuration.
///
/// `fractions` must sum to 1 within 1e-9; `subset_fraction` is the share
/// of the corpus retained at all (the rest is dropped before splitting).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub fractions: (f64, f64, f64),
    pub subset_fraction: f64,
}

impl SplitSpec {
    pub fn new(seed: u64, fractions: (f64, f64, f64), subset_fraction: f64) -> Result<Self> {
        let spec = SplitSpec {
            seed,
            fractions,
            subset_fraction,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.fractions;
        if a < 0.0 || b < 0.0 || c < 0.0 {
            return Err(Error::Config(format!(
                "split fractions must be non-negative, got {:?}",
                self.fractions
            )));
        }
        if (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {:?} (sum {})",
                self.fractions,
                a + b + c
            )));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "subset_fraction must lie in (0, 1], got {}",
                self.subset_fraction
            )));
        }
        Ok(())
    }
}

// SplitMix64: cheap, well-distributed, and stable across platforms.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample_key(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}

/// Exact integer sizes for the three splits by largest remainder, so the
/// counts always sum to `retained`.
fn split_sizes(retained: usize, fractions: (f64, f64, f64)) -> [usize; 3] {
    let fracs = [fractions.0, fractions.1, fractions.2];
    let mut sizes = [0usize; 3];
    let mut remainders = [0.0f64; 3];
    let mut assigned = 0usize;
    for i in 0..3 {
        let target = fracs[i] * retained as f64;
        sizes[i] = target.floor() as usize;
        remainders[i] = target - target.floor();
        assigned += sizes[i];
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| remainders[b].partial_cmp(&remainders[a]).unwrap().then(a.cmp(&b)));
    let mut leftover = retained - assigned;
    for &i in &order {
        if leftover == 0 {
            break;
        }
        sizes[i] += 1;
        leftover -= 1;
    }
    sizes
}

/// Splits samples into (train, valid, test) deterministically.
///
/// Each sample index is ranked by a seeded hash; the first
/// `round(subset_fraction * n)` ranks are retained and partitioned into
/// exact split sizes. The same seed always yields the same membership.
/// Within each split, samples keep their original file order.
pub fn split(samples: &[Sample], spec: &SplitSpec) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    spec.validate()?;
    let n = samples.len();
    let retained = (spec.subset_fraction * n as f64).round() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (sample_key(spec.seed, i), i));
    order.truncate(retained);

    let sizes = split_sizes(retained, spec.fractions);
    let mut memberships: Vec<(usize, u8)> = Vec::with_capacity(retained);
    for (rank, &idx) in order.iter().enumerate() {
        let part = if rank < sizes[0] {
            0
        } else if rank < sizes[0] + sizes[1] {
            1
        } else {
            2
        };
        memberships.push((idx, part));
    }
    memberships.sort_unstable();

    let mut out: [Vec<Sample>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (idx, part) in memberships {
        out[part as usize].push(samples[idx].clone());
    }
    let [train, valid, test] = out;
    Ok((train, valid, test))
}

/// Corpus summary statistics.
///
/// `sample_count` counts docstring-paired samples; `method_count` counts
/// every loaded function. Quantiles use the nearest-rank method over the
/// percentiles in [`QUANTILE_PERCENTILES`]. Character counts run over the
/// raw `code` text of all samples.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sample_count: usize,
    pub method_count: usize,
    pub code_token_length_quantiles: BTreeMap<u8, usize>,
    pub doc_token_length_quantiles: BTreeMap<u8, usize>,
    pub distinct_char_count: usize,
    pub total_char_count: usize,
}

/// Percentiles reported in [`CorpusStats`] quantile maps.
pub const QUANTILE_PERCENTILES: [u8; 5] = [5, 25, 50, 75, 95];

/// Nearest-rank quantile: the value at 1-based index ceil(p/100 * n) of
/// the sorted list.
fn nearest_rank_quantiles(mut lengths: Vec<usize>) -> BTreeMap<u8, usize> {
    let mut out = BTreeMap::new();
    if lengths.is_empty() {
        for p in QUANTILE_PERCENTILES {
            out.insert(p, 0);
        }
        return out;
    }
    lengths.sort_unstable();
    let n = lengths.len();
    for p in QUANTILE_PERCENTILES {
        let rank = ((p as f64 / 100.0) * n as f64).ceil() as usize;
        let rank = rank.clamp(1, n);
        out.insert(p, lengths[rank - 1]);
    }
    out
}

/// Computes corpus statistics. Empty input yields all-zero stats.
pub fn compute_stats(samples: &[Sample]) -> CorpusStats {
    let code_lengths: Vec<usize> = samples.iter().map(|s| s.code_tokens.len()).collect();
    let doc_lengths: Vec<usize> = samples.iter().map(|s| s.docstring_tokens.len()).collect();

    let mut distinct = std::collections::BTreeSet::new();
    let mut total = 0usize;
    for sample in samples {
        for ch in sample.code.chars() {
            distinct.insert(ch);
            total += 1;
        }
    }

    CorpusStats {
        sample_count: samples.iter().filter(|s| s.is_paired()).count(),
        method_count: samples.len(),
        code_token_length_quantiles: nearest_rank_quantiles(code_lengths),
        doc_token_length_quantiles: nearest_rank_quantiles(doc_lengths),
        distinct_char_count: distinct.len(),
        total_char_count: total,
    }
}

/// Concatenates every sample's LM text into one training stream,
/// newline-separated, in corpus order.
pub fn lm_corpus_text(samples: &[Sample]) -> String {
    let mut text = String::new();
    for (i, sample) in samples.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        text.push_str(sample.lm_text());
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(language: &str, code: &str, doc: &str) -> Sample {
        Sample {
            repo: "r".into(),
            path: "p.py".into(),
            language: language.into(),
            code: code.into(),
            docstring: doc.into(),
            code_tokens: code.split_whitespace().map(String::from).collect(),
            docstring_tokens: doc.split_whitespace().map(String::from).collect(),
            url: None,
        }
    }

    fn write_jsonl(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn load_filters_by_language_in_file_order() {
        let mut lines = Vec::new();
        for i in 0..3 {
            lines.push(serde_json::to_string(&sample("python", &format!("def f{i}(): pass"), "doc")).unwrap());
        }
        for i in 0..2 {
            lines.push(serde_json::to_string(&sample("go", &format!("func g{i}() {{}}"), "doc")).unwrap());
        }
        let f = write_jsonl(&lines);
        let (samples, report) = load_jsonl(f.path(), "python").unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(report.skipped(), 0);
        assert_eq!(report.filtered_language, 2);
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(s.code, format!("def f{i}(): pass"));
        }
    }

    #[test]
    fn load_empty_file() {
        let f = write_jsonl(&[]);
        let (samples, report) = load_jsonl(f.path(), "python").unwrap();
        assert!(samples.is_empty());
        assert_eq!(report.skipped(), 0);
    }

    #[test]
    fn load_skips_missing_mandatory_field() {
        let line = r#"{"language":"python","docstring":"d","code_tokens":["a"],"docstring_tokens":["d"]}"#;
        let f = write_jsonl(&[line.to_string()]);
        let (samples, report) = load_jsonl(f.path(), "python").unwrap();
        assert!(samples.is_empty());
        assert_eq!(report.skipped(), 1);
        assert_eq!(report.missing_fields, 1);
    }

    #[test]
    fn load_counts_malformed_lines() {
        let good = serde_json::to_string(&sample("python", "def f(): pass", "doc")).unwrap();
        let f = write_jsonl(&["{not json".to_string(), good]);
        let (samples, report) = load_jsonl(f.path(), "python").unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(report.malformed_lines, 1);
    }

    #[test]
    fn load_missing_file_is_fatal() {
        assert!(load_jsonl("/nonexistent/nope.jsonl", "python").is_err());
    }

    #[test]
    fn jsonl_roundtrip_is_field_identical() {
        let samples = vec![
            sample("python", "def f(x):\n    return x", "adds \"quotes\" and \u{3bb}"),
            Sample {
                url: Some("https://example.com".into()),
                ..sample("python", "def g(): pass", "G\u{f6}del \u{2014} unicode")
            },
        ];
        let f = tempfile::NamedTempFile::new().unwrap();
        save_jsonl(f.path(), &samples).unwrap();
        let (reloaded, report) = load_jsonl(f.path(), "python").unwrap();
        assert_eq!(report.skipped(), 0);
        assert_eq!(reloaded, samples);
    }

    #[test]
    fn split_exact_sizes() {
        let samples: Vec<Sample> = (0..100)
            .map(|i| sample("python", &format!("def f{i}(): pass"), "d"))
            .collect();
        let spec = SplitSpec::new(7, (0.8, 0.1, 0.1), 1.0).unwrap();
        let (train, valid, test) = split(&samples, &spec).unwrap();
        assert_eq!((train.len(), valid.len(), test.len()), (80, 10, 10));
    }

    #[test]
    fn split_same_seed_identical_membership() {
        let samples: Vec<Sample> = (0..57)
            .map(|i| sample("python", &format!("def f{i}(): pass"), "d"))
            .collect();
        let spec = SplitSpec::new(7, (0.6, 0.2, 0.2), 0.5).unwrap();
        let a = split(&samples, &spec).unwrap();
        let b = split(&samples, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_subset_fraction_retains_rounded_count() {
        let samples: Vec<Sample> = (0..100)
            .map(|i| sample("python", &format!("def f{i}(): pass"), "d"))
            .collect();
        let spec = SplitSpec::new(3, (0.8, 0.1, 0.1), 0.1).unwrap();
        let (train, valid, test) = split(&samples, &spec).unwrap();
        assert_eq!(train.len() + valid.len() + test.len(), 10);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(SplitSpec::new(1, (0.8, 0.1, 0.2), 1.0).is_err());
        assert!(SplitSpec::new(1, (0.8, 0.1, 0.1), 0.0).is_err());
    }

    #[test]
    fn split_partition_no_duplicates() {
        let samples: Vec<Sample> = (0..83)
            .map(|i| sample("python", &format!("def f{i}(): pass"), "d"))
            .collect();
        for seed in [0u64, 1, 42] {
            let spec = SplitSpec::new(seed, (0.7, 0.2, 0.1), 0.9).unwrap();
            let (train, valid, test) = split(&samples, &spec).unwrap();
            let mut seen = std::collections::HashSet::new();
            for s in train.iter().chain(&valid).chain(&test) {
                assert!(seen.insert(s.code.clone()), "duplicate across splits");
            }
            assert_eq!(seen.len(), (0.9f64 * 83.0).round() as usize);
        }
    }

    #[test]
    fn stats_median_nearest_rank() {
        let samples = vec![
            sample("python", "a b", "d"),
            sample("python", "a b c d", "d"),
            sample("python", "a b c d e f", "d"),
        ];
        let stats = compute_stats(&samples);
        assert_eq!(stats.code_token_length_quantiles[&50], 4);
    }

    #[test]
    fn stats_char_counts() {
        let samples = vec![sample("python", "aba", "d"), sample("python", "\nc", "d")];
        let stats = compute_stats(&samples);
        assert_eq!(stats.distinct_char_count, 4);
        assert_eq!(stats.total_char_count, 5);
    }

    #[test]
    fn stats_empty_input_all_zero() {
        let stats = compute_stats(&[]);
        assert_eq!(stats.sample_count, 0);
        assert_eq!(stats.method_count, 0);
        assert_eq!(stats.distinct_char_count, 0);
        assert_eq!(stats.total_char_count, 0);
        assert_eq!(stats.code_token_length_quantiles[&50], 0);
    }

    #[test]
    fn stats_permutation_invariant() {
        let mut samples: Vec<Sample> = (0..20)
            .map(|i| sample("python", &format!("def f{i}(x): return x + {i}"), "doc here"))
            .collect();
        let before = compute_stats(&samples);
        samples.reverse();
        samples.swap(0, 5);
        assert_eq!(compute_stats(&samples), before);
    }
}

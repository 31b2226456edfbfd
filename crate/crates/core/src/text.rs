//! Monolingual corpus cleaning, translation into the source language, and
//! pair filtering.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ports::TranslatorPort;
use crate::seed::item_rng;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("invalid filter policy: {0}")]
    InvalidPolicy(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, TextError>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextCorpus {
    pub language: String,
    pub sentences: Vec<String>,
}

impl TextCorpus {
    pub fn new(language: impl Into<String>, sentences: Vec<String>) -> Self {
        Self {
            language: language.into(),
            sentences,
        }
    }

    /// One sentence per line. A trailing `\r` is dropped; blank lines are kept
    /// so they show up in the cleaning statistics.
    pub fn read(path: impl AsRef<Path>, language: impl Into<String>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TextError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let sentences = text
            .lines()
            .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
            .collect();
        Ok(Self::new(language, sentences))
    }

    /// Uniform reservoir sample of `n` sentences, kept in corpus order.
    pub fn sample(&self, n: usize, seed: u64) -> Self {
        if n >= self.sentences.len() {
            return self.clone();
        }
        let mut rng = item_rng(seed, "take-n");
        let mut reservoir: Vec<usize> = (0..n).collect();
        for i in n..self.sentences.len() {
            let j = rng.gen_range(0..=i);
            if j < n {
                reservoir[j] = i;
            }
        }
        reservoir.sort_unstable();
        Self::new(
            self.language.clone(),
            reservoir.into_iter().map(|i| self.sentences[i].clone()).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub id: String,
    pub source: String,
    pub target: String,
}

/// Thresholds for cleaning and pair filtering. The numeric defaults are
/// tunable choices, not values from any reference setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterPolicy {
    pub max_length_ratio: f64,
    pub max_token_repetition_run: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub reject_url: bool,
    pub reject_bracketed: bool,
    pub reject_special_char_ratio: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            max_length_ratio: 3.0,
            max_token_repetition_run: 3,
            min_tokens: 1,
            max_tokens: 200,
            reject_url: true,
            reject_bracketed: true,
            reject_special_char_ratio: 0.2,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TextError::InvalidPolicy(m.into()));
        if !(self.max_length_ratio >= 1.0 && self.max_length_ratio.is_finite()) {
            return bad("max_length_ratio must be a finite ratio >= 1");
        }
        if self.max_token_repetition_run == 0 || self.min_tokens == 0 || self.max_tokens == 0 {
            return bad("token thresholds must be positive");
        }
        if self.min_tokens > self.max_tokens {
            return bad("min_tokens exceeds max_tokens");
        }
        if !(self.reject_special_char_ratio > 0.0 && self.reject_special_char_ratio <= 1.0) {
            return bad("reject_special_char_ratio must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let policy: Self = toml::from_str(text).map_err(|e| TextError::InvalidPolicy(e.to_string()))?;
        policy.validate()?;
        Ok(policy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Empty,
    Url,
    Bracketed,
    SpecialChars,
    TooFewTokens,
    TooManyTokens,
    LengthRatio,
    Repetition,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict<T> {
    Accepted(T),
    Rejected(RejectReason),
}

impl<T> Verdict<T> {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted(_))
    }
}

fn has_url(s: &str) -> bool {
    let lower = s.to_lowercase();
    ["http://", "https://", "www."].iter().any(|p| lower.contains(p))
}

/// True when some opening bracket is later closed by its partner.
fn has_bracketed_span(s: &str) -> bool {
    [('(', ')'), ('[', ']'), ('{', '}')].iter().any(|&(open, close)| {
        s.find(open)
            .is_some_and(|at| s[at + open.len_utf8()..].contains(close))
    })
}

/// Sentence punctuation that does not count as a special character.
fn is_common_punctuation(c: char) -> bool {
    matches!(
        c,
        '.' | ',' | ';' | ':' | '!' | '?' | '\'' | '"' | '-' | '¿' | '¡' | '…' | '’' | '‘' | '“' | '”'
            | '«' | '»' | '–' | '—'
    )
}

fn special_char_ratio(s: &str) -> f64 {
    let (mut special, mut total) = (0usize, 0usize);
    for c in s.chars().filter(|c| !c.is_whitespace()) {
        total += 1;
        if !(c.is_alphanumeric() || is_common_punctuation(c)) {
            special += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        special as f64 / total as f64
    }
}

pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Drops non-conversational sentences (URLs, bracketed spans, symbol-heavy
/// text) and normalizes whitespace in the rest.
pub fn clean_sentence(s: &str, policy: &FilterPolicy) -> Verdict<String> {
    let normalized = normalize_whitespace(s);
    if normalized.is_empty() {
        return Verdict::Rejected(RejectReason::Empty);
    }
    if policy.reject_url && has_url(&normalized) {
        return Verdict::Rejected(RejectReason::Url);
    }
    if policy.reject_bracketed && has_bracketed_span(&normalized) {
        return Verdict::Rejected(RejectReason::Bracketed);
    }
    if special_char_ratio(&normalized) > policy.reject_special_char_ratio {
        return Verdict::Rejected(RejectReason::SpecialChars);
    }
    Verdict::Accepted(normalized)
}

fn longest_run(tokens: &[&str]) -> usize {
    tokens
        .chunk_by(|a, b| a == b)
        .map(<[&str]>::len)
        .max()
        .unwrap_or(0)
}

/// Token-count bounds, then the length ratio, then consecutive repetition.
pub fn filter_pair(pair: &TextPair, policy: &FilterPolicy) -> Verdict<()> {
    let src: Vec<&str> = pair.source.split_whitespace().collect();
    let tgt: Vec<&str> = pair.target.split_whitespace().collect();
    let (short, long) = if src.len() <= tgt.len() {
        (src.len(), tgt.len())
    } else {
        (tgt.len(), src.len())
    };
    if short < policy.min_tokens {
        return Verdict::Rejected(RejectReason::TooFewTokens);
    }
    if long > policy.max_tokens {
        return Verdict::Rejected(RejectReason::TooManyTokens);
    }
    if long as f64 / short as f64 > policy.max_length_ratio {
        return Verdict::Rejected(RejectReason::LengthRatio);
    }
    if longest_run(&src).max(longest_run(&tgt)) > policy.max_token_repetition_run {
        return Verdict::Rejected(RejectReason::Repetition);
    }
    Verdict::Accepted(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionStats {
    pub input: usize,
    pub accepted: usize,
    pub cleaning: BTreeMap<RejectReason, usize>,
    pub translation_failures: usize,
    pub filtering: BTreeMap<RejectReason, usize>,
}

impl RejectionStats {
    pub fn cleaned(&self) -> usize {
        self.input - self.cleaning.values().sum::<usize>()
    }

    pub fn total_rejected(&self) -> usize {
        self.cleaning.values().sum::<usize>() + self.filtering.values().sum::<usize>()
    }

    /// `accepted + rejected + failed == input`.
    pub fn is_conserved(&self) -> bool {
        self.accepted + self.total_rejected() + self.translation_failures == self.input
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats always serialize")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationFailure {
    pub id: String,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct TextStageOutput {
    pub pairs: Vec<TextPair>,
    pub stats: RejectionStats,
    pub failures: Vec<TranslationFailure>,
}

#[derive(Clone, Debug)]
pub struct TextStageOptions {
    /// Language the corpus is translated into (the speech source side).
    pub source_language: String,
    /// Upper bound on concurrent translator calls.
    pub max_in_flight: usize,
}

/// Stable id for the sentence on corpus line `index` (0-based).
pub fn pair_id(language: &str, index: usize) -> String {
    format!("{language}-{index:08}")
}

/// Clean, translate each surviving sentence into the source language, then
/// filter the resulting pairs.
///
/// Translator failures are recorded and skipped. Pairs come back in corpus
/// order regardless of how many calls ran concurrently.
pub fn run_text_stage(
    corpus: &TextCorpus,
    translator: &dyn TranslatorPort,
    policy: &FilterPolicy,
    options: &TextStageOptions,
) -> Result<TextStageOutput> {
    policy.validate()?;
    let mut out = TextStageOutput::default();
    out.stats.input = corpus.sentences.len();

    let mut cleaned = Vec::new();
    for (i, s) in corpus.sentences.iter().enumerate() {
        match clean_sentence(s, policy) {
            Verdict::Accepted(text) => cleaned.push((pair_id(&corpus.language, i), text)),
            Verdict::Rejected(r) => *out.stats.cleaning.entry(r).or_default() += 1,
        }
    }

    let workers = options
        .max_in_flight
        .min(translator.max_concurrency().unwrap_or(usize::MAX))
        .max(1);
    let pool = crate::batch::pool(workers).map_err(|e| TextError::Pool(e.to_string()))?;
    let translated: Vec<_> = pool.install(|| {
        use rayon::prelude::*;
        cleaned
            .par_iter()
            .map(|(_, text)| translator.translate(text, &corpus.language, &options.source_language))
            .collect()
    });

    for ((id, target), result) in cleaned.into_iter().zip(translated) {
        let source = match result {
            Ok(s) => normalize_whitespace(&s),
            Err(e) => {
                out.stats.translation_failures += 1;
                out.failures.push(TranslationFailure {
                    id,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let pair = TextPair { id, source, target };
        match filter_pair(&pair, policy) {
            Verdict::Accepted(()) => out.pairs.push(pair),
            Verdict::Rejected(r) => *out.stats.filtering.entry(r).or_default() += 1,
        }
    }
    out.stats.accepted = out.pairs.len();
    Ok(out)
}

/// `id TAB source TAB target` per line.
pub fn write_pairs_tsv<W: Write>(pairs: &[TextPair], mut w: W) -> io::Result<()> {
    for p in pairs {
        writeln!(w, "{}\t{}\t{}", p.id, p.source, p.target)?;
    }
    w.flush()
}

pub fn read_pairs_tsv<R: BufRead>(r: R) -> Result<Vec<TextPair>> {
    let mut pairs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| TextError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, source, target] = fields[..] else {
            return Err(TextError::Malformed {
                line: i + 1,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        };
        if id.is_empty() || source.trim().is_empty() || target.trim().is_empty() {
            return Err(TextError::Malformed {
                line: i + 1,
                message: "empty field".into(),
            });
        }
        pairs.push(TextPair {
            id: id.to_string(),
            source: source.to_string(),
            target: target.to_string(),
        });
    }
    Ok(pairs)
}

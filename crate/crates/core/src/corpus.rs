//! Parallel corpus loading, rule-based filtering and statistics.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

static NUMBER_ONLY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[0-9]+([.,/-][0-9]+)*$").unwrap());
static DATE_ONLY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[0-9]{1,4}[./-][0-9]{1,2}[./-][0-9]{1,4}$").unwrap());
static UPPER_REF: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[A-Z]{2,}[0-9]*$").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SentencePair {
    pub source_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
    /// 1-based line number in the input files.
    pub origin_line: usize,
}

impl SentencePair {
    pub fn new(source: &str, target: &str, origin_line: usize) -> Self {
        Self {
            source_tokens: tokenize(source),
            target_tokens: tokenize(target),
            origin_line,
        }
    }
}

/// Whitespace tokenizer; input is expected to be tokenized already.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_owned).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterRuleSet {
    pub drop_single_token_number: bool,
    pub drop_single_token_date: bool,
    pub drop_single_token_upper_ref: bool,
    /// Test sets only: sources with at most this many tokens are dropped.
    /// 0 disables the rule.
    pub test_min_source_tokens: usize,
}

impl Default for FilterRuleSet {
    fn default() -> Self {
        Self {
            drop_single_token_number: true,
            drop_single_token_date: true,
            drop_single_token_upper_ref: true,
            test_min_source_tokens: 5,
        }
    }
}

impl FilterRuleSet {
    pub fn validate(&self) -> Result<()> {
        if self.test_min_source_tokens > 100 {
            return Err(Error::Config(format!(
                "test_min_source_tokens must be in [0, 100], got {}",
                self.test_min_source_tokens
            )));
        }
        Ok(())
    }

    fn rejects_token(&self, token: &str) -> bool {
        (self.drop_single_token_number && NUMBER_ONLY.is_match(token))
            || (self.drop_single_token_date && DATE_ONLY.is_match(token))
            || (self.drop_single_token_upper_ref && UPPER_REF.is_match(token))
    }

    fn keeps(&self, pair: &SentencePair, is_test_set: bool) -> bool {
        let single = pair.source_tokens.len() == 1 && pair.target_tokens.len() == 1;
        if single && self.rejects_token(&pair.source_tokens[0]) {
            return false;
        }
        if is_test_set
            && self.test_min_source_tokens > 0
            && pair.source_tokens.len() <= self.test_min_source_tokens
        {
            return false;
        }
        true
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

pub fn load_parallel(source_path: &Path, target_path: &Path) -> Result<Vec<SentencePair>> {
    let src = read_lines(source_path)?;
    let tgt = read_lines(target_path)?;
    if src.len() != tgt.len() {
        return Err(Error::LineCountMismatch {
            source_lines: src.len(),
            target_lines: tgt.len(),
        });
    }
    let mut pairs = Vec::with_capacity(src.len());
    for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
        let line = i + 1;
        for (text, path) in [(s, source_path), (t, target_path)] {
            if text.trim().is_empty() {
                return Err(Error::data(path, Some(line), "empty line"));
            }
        }
        pairs.push(SentencePair::new(s, t, line));
    }
    Ok(pairs)
}

pub fn write_parallel(
    pairs: &[SentencePair],
    source_path: &Path,
    target_path: &Path,
) -> Result<()> {
    let join = |side: &dyn Fn(&SentencePair) -> &Vec<String>| {
        pairs
            .iter()
            .map(|p| side(p).join(" ") + "\n")
            .collect::<String>()
    };
    fs::write(source_path, join(&|p| &p.source_tokens)).map_err(|e| Error::io(source_path, e))?;
    fs::write(target_path, join(&|p| &p.target_tokens)).map_err(|e| Error::io(target_path, e))?;
    Ok(())
}

/// Drop single-token number/date/reference pairs and, for test sets, short
/// sources. Survivors keep their order.
pub fn filter_pairs(
    pairs: &[SentencePair],
    rules: &FilterRuleSet,
    is_test_set: bool,
) -> Vec<SentencePair> {
    pairs
        .iter()
        .filter(|p| rules.keeps(p, is_test_set))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub sentence_count: usize,
    pub token_count_source: usize,
    pub token_count_target: usize,
    pub unique_token_count_source: usize,
    pub unique_token_count_target: usize,
}

pub fn compute_stats(pairs: &[SentencePair]) -> CorpusStats {
    let mut src_types = HashSet::new();
    let mut tgt_types = HashSet::new();
    let mut stats = CorpusStats {
        sentence_count: pairs.len(),
        ..Default::default()
    };
    for p in pairs {
        stats.token_count_source += p.source_tokens.len();
        stats.token_count_target += p.target_tokens.len();
        src_types.extend(p.source_tokens.iter().map(String::as_str));
        tgt_types.extend(p.target_tokens.iter().map(String::as_str));
    }
    stats.unique_token_count_source = src_types.len();
    stats.unique_token_count_target = tgt_types.len();
    stats
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16}{:>12}", "Sentences", self.sentence_count)?;
        writeln!(f, "{:<16}{:>12}{:>12}", "", "Source", "Target")?;
        writeln!(
            f,
            "{:<16}{:>12}{:>12}",
            "Tokens", self.token_count_source, self.token_count_target
        )?;
        write!(
            f,
            "{:<16}{:>12}{:>12}",
            "Unique tokens", self.unique_token_count_source, self.unique_token_count_target
        )
    }
}

/// Seeded shuffle, then contiguous train/valid/test split. Train and valid
/// sizes are floors of the fractions; the remainder goes to test.
pub fn split_corpus(
    pairs: &[SentencePair],
    train_fraction: f64,
    valid_fraction: f64,
    seed: u64,
) -> Result<(Vec<SentencePair>, Vec<SentencePair>, Vec<SentencePair>)> {
    if pairs.len() < 3 {
        return Err(Error::invalid(format!(
            "split_corpus needs at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    if train_fraction <= 0.0 || valid_fraction <= 0.0 || train_fraction + valid_fraction >= 1.0 {
        return Err(Error::invalid(format!(
            "split fractions must be positive with sum < 1, got {train_fraction} and {valid_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    Rng::new(seed).shuffle(&mut order);
    let n = pairs.len() as f64;
    let n_train = (n * train_fraction).floor() as usize;
    let n_valid = (n * valid_fraction).floor() as usize;
    let take = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_valid]),
        take(&order[n_train + n_valid..]),
    ))
}

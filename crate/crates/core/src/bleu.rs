//! Corpus BLEU with clipped n-gram precisions up to 4-grams, single reference,
//! no smoothing, scaled to 0–100.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(AsRef::as_ref).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram total, summed over the corpus.
pub fn modified_precision<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<S>],
    n: usize,
) -> (usize, usize) {
    let (mut matches, mut total) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        let cand = ngram_counts(c, n);
        let refs = ngram_counts(r, n);
        for (gram, &k) in &cand {
            matches += k.min(refs.get(gram).copied().unwrap_or(0));
            total += k;
        }
    }
    (matches, total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// 0–100.
    pub bleu: f64,
    /// Modified precisions p1..p4 as fractions.
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
}

impl BleuReport {
    pub fn ratio(&self) -> f64 {
        if self.reference_length == 0 {
            0.0
        } else {
            self.candidate_length as f64 / self.reference_length as f64
        }
    }
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p: Vec<String> = self
            .precisions
            .iter()
            .map(|p| format!("{:.1}", 100.0 * p))
            .collect();
        write!(
            f,
            "BLEU = {:.2}, p1/p2/p3/p4 = {}, BP = {:.3}, ratio = {:.3}",
            self.bleu,
            p.join("/"),
            self.brevity_penalty,
            self.ratio()
        )
    }
}

/// Corpus BLEU. An order with no candidate n-grams at all (every sentence
/// shorter than n) counts as precision 1 rather than 0/0.
pub fn bleu_corpus<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<S>],
) -> Result<BleuReport> {
    if candidates.len() != references.len() {
        return Err(Error::LineCountMismatch {
            source_lines: candidates.len(),
            target_lines: references.len(),
        });
    }
    let mut matches = [0; MAX_ORDER];
    let mut totals = [0; MAX_ORDER];
    let mut precisions = [0.0; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        let (m, t) = modified_precision(candidates, references, n);
        matches[n - 1] = m;
        totals[n - 1] = t;
        precisions[n - 1] = if t == 0 { 1.0 } else { m as f64 / t as f64 };
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let brevity_penalty = if c >= r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        candidate_length: c,
        reference_length: r,
    })
}

fn read_tokenized(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_owned).collect())
        .collect())
}

/// BLEU of a candidate file against a reference file, one tokenized
/// sentence per line.
pub fn bleu_files(candidate: &Path, reference: &Path) -> Result<BleuReport> {
    bleu_corpus(&read_tokenized(candidate)?, &read_tokenized(reference)?)
}

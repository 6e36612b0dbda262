//! Beam search and greedy decoding.

use serde::{Deserialize, Serialize};

use crate::bpe::FactoredSequence;
use crate::error::{Error, Result};
use crate::model::{Model, SourceBatch};
use crate::tensor::{Real, Tensor};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub length_penalty: f64,
    /// Output length cap is `max_len_a · source_len + max_len_b` units.
    pub max_len_a: f64,
    pub max_len_b: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            length_penalty: 1.2,
            max_len_a: 2.0,
            max_len_b: 10,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.length_penalty.is_nan() || self.length_penalty < 0.0 {
            return Err(Error::Config(format!(
                "length_penalty {} must be ≥ 0",
                self.length_penalty
            )));
        }
        if self.max_len_a.is_nan() || self.max_len_a < 0.0 {
            return Err(Error::Config("max_len_a must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn max_target_len(&self, source_len: usize) -> usize {
        (self.max_len_a * source_len as f64).floor() as usize + self.max_len_b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Output ids; a finished hypothesis ends with EOS.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// log_prob / len^α with len counting EOS.
    pub fn score(&self, alpha: f64) -> f64 {
        length_normalized(self.log_prob, self.tokens.len(), alpha)
    }

    /// Tokens without the closing EOS.
    pub fn content(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&Vocabulary::EOS_ID, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

fn length_normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(alpha)
}

/// Next-token log-probabilities for a set of equal-length prefixes.
pub trait StepScorer {
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// A model conditioned on one encoded source sentence.
pub struct ModelScorer<'a, T> {
    model: &'a Model<T>,
    enc: Tensor<T>,
    src_pad: Vec<bool>,
}

impl<'a, T: Real> ModelScorer<'a, T> {
    pub fn new(model: &'a Model<T>, source: &FactoredSequence) -> Result<Self> {
        let src = SourceBatch {
            batch: 1,
            len: source.len(),
            unit_ids: source.unit_ids.clone(),
            tag_ids: source.tag_ids.clone(),
        };
        Ok(Self {
            enc: model.encode(&src)?,
            src_pad: src.pad_mask(),
            model,
        })
    }
}

impl<T: Real> StepScorer for ModelScorer<'_, T> {
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        self.model
            .next_log_probs(&self.enc, &self.src_pad, prefixes)
    }
}

/// PAD and BOS are never produced.
fn allowed(token: usize) -> bool {
    token != Vocabulary::PAD_ID && token != Vocabulary::BOS_ID
}

/// Beam search over at most `max_len` output tokens (EOS included).
///
/// Each step ranks every extension of every live hypothesis by log
/// probability. EOS extensions ranked within the top `beam_size` become
/// finished; the best `beam_size` other extensions stay live. Search stops at
/// `max_len`, when nothing is live, or once `beam_size` hypotheses have
/// finished and no live one can still beat the best of them. Live scores are
/// bounded by log_prob / max_len^α, which holds for α ≥ 0 since log
/// probabilities only decrease.
pub fn beam_search_with(
    scorer: &mut dyn StepScorer,
    cfg: &DecodeConfig,
    max_len: usize,
) -> Result<Hypothesis> {
    cfg.validate()?;
    if max_len == 0 {
        return Err(Error::invalid("maximum output length must be at least 1"));
    }
    let k = cfg.beam_size;
    let alpha = cfg.length_penalty;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| h.tokens.clone()).collect();
        let lps = scorer.next_log_probs(&prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (parent, (h, row)) in live.iter().zip(&lps).enumerate() {
            for (w, &lp) in row.iter().enumerate() {
                if allowed(w) && lp > f64::NEG_INFINITY {
                    cands.push((h.log_prob + lp, parent, w));
                }
            }
        }
        // Score descending; ties keep hypothesis then token order.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(k);
        for (rank, &(lp, parent, w)) in cands.iter().enumerate() {
            let parent = &live[parent];
            let mut tokens = parent.tokens.clone();
            tokens.push(w);
            if w == Vocabulary::EOS_ID {
                if rank < k {
                    finished.push(Hypothesis {
                        tokens,
                        log_prob: lp,
                        finished: true,
                    });
                }
            } else if next.len() < k {
                next.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    finished: false,
                });
            }
            if next.len() == k && rank + 1 >= k {
                break;
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if finished.len() >= k {
            let best_finished = finished
                .iter()
                .map(|h| h.score(alpha))
                .fold(f64::NEG_INFINITY, f64::max);
            let best_bound = live
                .iter()
                .map(|h| length_normalized(h.log_prob, max_len, alpha))
                .fold(f64::NEG_INFINITY, f64::max);
            if best_bound <= best_finished {
                break;
            }
        }
    }
    let pick = |hs: Vec<Hypothesis>| {
        hs.into_iter().reduce(|best, h| {
            if h.score(alpha) > best.score(alpha) {
                h
            } else {
                best
            }
        })
    };
    pick(finished)
        .or_else(|| pick(live))
        .ok_or_else(|| Error::Numeric("beam search produced no hypothesis".into()))
}

/// Argmax decoding until EOS or `max_len`.
pub fn greedy_with(scorer: &mut dyn StepScorer, max_len: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while h.tokens.len() < max_len {
        let row = scorer
            .next_log_probs(std::slice::from_ref(&h.tokens))?
            .remove(0);
        let (w, lp) = row.iter().enumerate().filter(|&(w, _)| allowed(w)).fold(
            (usize::MAX, f64::NEG_INFINITY),
            |best, (w, &lp)| if lp > best.1 { (w, lp) } else { best },
        );
        if w == usize::MAX {
            break;
        }
        h.tokens.push(w);
        h.log_prob += lp;
        if w == Vocabulary::EOS_ID {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Output length cap for a source, limited by the model's position table.
pub fn max_len_for<T: Real>(
    model: &Model<T>,
    source: &FactoredSequence,
    cfg: &DecodeConfig,
) -> usize {
    let words = source.len().saturating_sub(1);
    cfg.max_target_len(words)
        .min(model.config.max_positions - 1)
}

fn check_source(source: &FactoredSequence) -> Result<()> {
    if source.unit_ids.iter().all(|&u| u == Vocabulary::EOS_ID) {
        return Err(Error::invalid("cannot translate an empty source sentence"));
    }
    Ok(())
}

pub fn beam_search<T: Real>(
    model: &Model<T>,
    source: &FactoredSequence,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    check_source(source)?;
    let mut scorer = ModelScorer::new(model, source)?;
    beam_search_with(&mut scorer, cfg, max_len_for(model, source, cfg))
}

pub fn greedy<T: Real>(
    model: &Model<T>,
    source: &FactoredSequence,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    check_source(source)?;
    let mut scorer = ModelScorer::new(model, source)?;
    greedy_with(&mut scorer, max_len_for(model, source, cfg))
}

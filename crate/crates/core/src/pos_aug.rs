//! Encoder input assembly with optional POS factors.
//!
//! Three layouts, all producing `d_model`-wide vectors:
//!
//! ```text
//! baseline     √d_model·E_w[unit]                        + PE_{d_model}[pos]
//! embed_concat [ √d_w·E_w[unit] | √d_p·E_p[tag] ]        + PE_{d_model}[pos]
//! pe_concat    [ √d_w·E_w[unit] + PE_{d_w}[pos] | √d_p·E_p[tag] ]
//! ```
//!
//! In `embed_concat` the POS block is joined to the subword block first and
//! the sinusoid is added to the joined vector. In `pe_concat` the sinusoid is
//! only added to the subword block (at width `d_w = d_model − d_p`) and the
//! POS block is appended afterwards, so its coordinates carry no position.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bound, Mode, PeCache, SourceBatch};
use crate::tensor::{Graph, Real, Rng, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AugMode {
    #[default]
    Baseline,
    EmbedConcat,
    PeConcat,
}

impl AugMode {
    pub const ALL: [AugMode; 3] = [AugMode::Baseline, AugMode::EmbedConcat, AugMode::PeConcat];

    pub fn as_str(self) -> &'static str {
        match self {
            AugMode::Baseline => "baseline",
            AugMode::EmbedConcat => "embed_concat",
            AugMode::PeConcat => "pe_concat",
        }
    }
}

impl fmt::Display for AugMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(AugMode::Baseline),
            "embed_concat" => Ok(AugMode::EmbedConcat),
            "pe_concat" => Ok(AugMode::PeConcat),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected baseline|embed_concat|pe_concat)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PosAugConfig {
    pub mode: AugMode,
    /// Width of the POS block. Zero in baseline mode.
    #[serde(default)]
    pub d_pos: usize,
}

impl PosAugConfig {
    pub fn baseline() -> Self {
        Self::default()
    }

    pub fn new(mode: AugMode, d_pos: usize) -> Self {
        Self { mode, d_pos }
    }

    /// Default POS width for a model width: a quarter of it, or 0 for baseline.
    pub fn with_default_width(mode: AugMode, d_model: usize) -> Self {
        let d_pos = if mode == AugMode::Baseline {
            0
        } else {
            d_model / 4
        };
        Self { mode, d_pos }
    }

    /// Width of the subword block.
    pub fn d_word(&self, d_model: usize) -> usize {
        d_model - self.d_pos
    }

    pub fn has_pos_table(&self) -> bool {
        self.mode != AugMode::Baseline && self.d_pos > 0
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        match self.mode {
            AugMode::Baseline if self.d_pos != 0 => Err(Error::Config(format!(
                "baseline mode requires d_pos = 0, got {}",
                self.d_pos
            ))),
            _ if self.d_pos >= d_model => Err(Error::Config(format!(
                "d_pos {} must be smaller than d_model {d_model}",
                self.d_pos
            ))),
            AugMode::PeConcat if !self.d_word(d_model).is_multiple_of(2) => {
                Err(Error::Config(format!(
                    "pe_concat needs an even subword width, got d_w = {}",
                    self.d_word(d_model)
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Trainable E_p with one row per tag id.
#[derive(Debug, Clone, PartialEq)]
pub struct PosEmbeddingTable<T> {
    pub weights: Tensor<T>,
}

/// Uniform ±d_p^{-1/2} initialisation, one row per tag (reserved tags included).
pub fn build_pos_embedding_table<T: Real>(
    tag_vocab_size: usize,
    d_pos: usize,
    seed: u64,
) -> Result<PosEmbeddingTable<T>> {
    if d_pos == 0 {
        return Err(Error::invalid("POS embedding width must be at least 1"));
    }
    let bound = (d_pos as f64).powf(-0.5);
    let mut rng = Rng::derived(seed, crate::model::name_stream("pos_embed"));
    let data = (0..tag_vocab_size * d_pos)
        .map(|_| T::lit(rng.uniform(-bound, bound)))
        .collect();
    Ok(PosEmbeddingTable {
        weights: Tensor::new(vec![tag_vocab_size, d_pos], data)?,
    })
}

/// Build the (B, L, d_model) encoder input for one source batch.
#[allow(clippy::too_many_arguments)]
pub fn assemble_encoder_input<T: Real>(
    g: &mut Graph<T>,
    params: &Bound,
    src: &SourceBatch,
    pe: &PeCache<T>,
    aug: &PosAugConfig,
    d_model: usize,
    dropout_p: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    if src.tag_ids.len() != src.unit_ids.len() {
        return Err(Error::invalid(format!(
            "{} unit ids but {} tag ids",
            src.unit_ids.len(),
            src.tag_ids.len()
        )));
    }
    let idx_shape = [src.batch, src.len];
    let d_w = aug.d_word(d_model);
    let words = g.embedding(params.get("src_embed")?, &src.unit_ids, &idx_shape)?;
    let words = g.scale(words, T::lit((d_w as f64).sqrt()));

    let x = match aug.mode {
        AugMode::Baseline => {
            let pos = g.leaf(pe.rows(d_model, src.len)?);
            g.add(words, pos)?
        }
        AugMode::EmbedConcat => {
            let joined = match pos_block(g, params, src, aug)? {
                Some(tags) => g.concat_last_dim(&[words, tags])?,
                None => words,
            };
            let pos = g.leaf(pe.rows(d_model, src.len)?);
            g.add(joined, pos)?
        }
        AugMode::PeConcat => {
            if !d_w.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "pe_concat needs an even subword width, got d_w = {d_w}"
                )));
            }
            let pos = g.leaf(pe.rows(d_w, src.len)?);
            let positioned = g.add(words, pos)?;
            match pos_block(g, params, src, aug)? {
                Some(tags) => g.concat_last_dim(&[positioned, tags])?,
                None => positioned,
            }
        }
    };
    debug_assert_eq!(g.value(x).last_dim(), d_model);
    mode.dropout(g, x, dropout_p)
}

fn pos_block<T: Real>(
    g: &mut Graph<T>,
    params: &Bound,
    src: &SourceBatch,
    aug: &PosAugConfig,
) -> Result<Option<Var>> {
    if !aug.has_pos_table() {
        return Ok(None);
    }
    let table = params.get("pos_embed")?;
    let rows = g.shape(table)[0];
    if let Some(&bad) = src.tag_ids.iter().find(|&&t| t >= rows) {
        return Err(Error::invalid(format!(
            "tag id {bad} out of range for POS table with {rows} rows"
        )));
    }
    let tags = g.embedding(table, &src.tag_ids, &[src.batch, src.len])?;
    Ok(Some(g.scale(tags, T::lit((aug.d_pos as f64).sqrt()))))
}

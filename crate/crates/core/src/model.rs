//! Post-norm encoder-decoder Transformer.
//!
//! Linear layers store their weight as (fan_in, fan_out) so a layer is
//! `x · W + b`. Embedding tables store one row per id.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pos_aug::{assemble_encoder_input, build_pos_embedding_table, PosAugConfig};
use crate::tensor::graph::softmax_in_place;
use crate::tensor::{Graph, Real, Rng, Tensor, Var};
use crate::vocab::Vocabulary;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub dropout_p: f64,
    /// Vocabulary sizes are filled in from the training data.
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub tag_vocab_size: usize,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 5,
            num_heads: 2,
            d_model: 512,
            d_ffn: 2048,
            dropout_p: 0.4,
            source_vocab_size: 0,
            target_vocab_size: 0,
            tag_vocab_size: 0,
            max_positions: 512,
        }
    }
}

impl ModelConfig {
    /// Small profile for tests and desk-scale experiments.
    pub fn desk() -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            d_model: 16,
            d_ffn: 32,
            dropout_p: 0.1,
            max_positions: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("num_heads", self.num_heads),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("source_vocab_size", self.source_vocab_size),
            ("target_vocab_size", self.target_vocab_size),
            ("tag_vocab_size", self.tag_vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} not in [0,1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Forward-pass mode. Dropout only draws from the generator in `Train`.
pub enum Mode<'a> {
    Train(&'a mut Rng),
    Eval,
}

impl Mode<'_> {
    pub fn dropout<T: Real>(&mut self, g: &mut Graph<T>, x: Var, p: f64) -> Result<Var> {
        match self {
            Mode::Train(rng) => g.dropout(x, p, rng),
            Mode::Eval => Ok(x),
        }
    }
}

/// Sinusoidal position table: PE(pos, 2i) = sin(pos / 10000^(2i/dim)),
/// PE(pos, 2i+1) = cos(pos / 10000^(2i/dim)).
pub fn sinusoidal_pe<T: Real>(max_len: usize, dim: usize) -> Result<Tensor<T>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "sinusoidal encoding needs an even dim, got {dim}"
        )));
    }
    let mut data = Vec::with_capacity(max_len * dim);
    for pos in 0..max_len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data.push(T::lit(angle.sin()));
            data.push(T::lit(angle.cos()));
        }
    }
    Tensor::new(vec![max_len, dim], data)
}

/// Precomputed sinusoid tables for the widths a configuration needs.
#[derive(Debug, Clone)]
pub struct PeCache<T> {
    max_len: usize,
    tables: Vec<(usize, Tensor<T>)>,
}

impl<T: Real> PeCache<T> {
    pub fn new(max_len: usize, cfg: &ModelConfig, aug: &PosAugConfig) -> Result<Self> {
        let mut dims = vec![cfg.d_model];
        let d_w = aug.d_word(cfg.d_model);
        if d_w != cfg.d_model && d_w.is_multiple_of(2) {
            dims.push(d_w);
        }
        let tables = dims
            .into_iter()
            .map(|d| Ok((d, sinusoidal_pe(max_len, d)?)))
            .collect::<Result<_>>()?;
        Ok(Self { max_len, tables })
    }

    /// First `len` rows of the table of width `dim`.
    pub fn rows(&self, dim: usize, len: usize) -> Result<Tensor<T>> {
        if len > self.max_len {
            return Err(Error::invalid(format!(
                "sequence length {len} exceeds max_positions {}",
                self.max_len
            )));
        }
        let (_, t) = self
            .tables
            .iter()
            .find(|(d, _)| *d == dim)
            .ok_or_else(|| Error::invalid(format!("no positional table of width {dim}")))?;
        Tensor::new(vec![len, dim], t.data()[..len * dim].to_vec())
    }
}

/// All trainable tensors, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Parameters<T> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Register every tensor as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone())))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

impl<T: Real> Default for Parameters<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter name → graph leaf for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: IndexMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Stable 64-bit stream label for a parameter name (FNV-1a), so each tensor's
/// initial values depend only on the seed and its own name.
pub fn name_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

fn uniform<T: Real>(shape: &[usize], bound: f64, seed: u64, name: &str) -> Tensor<T> {
    let mut rng = Rng::derived(seed, name_stream(name));
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.uniform(-bound, bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

fn add_linear<T: Real>(
    p: &mut Parameters<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    seed: u64,
) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = format!("{name}.w");
    p.insert(w.clone(), uniform(&[fan_in, fan_out], bound, seed, &w));
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn add_layer_norm<T: Real>(p: &mut Parameters<T>, name: &str, d: usize) {
    p.insert(format!("{name}.gain"), Tensor::full(&[d], T::one()));
    p.insert(format!("{name}.bias"), Tensor::zeros(&[d]));
}

/// Attention projections are plain matrices, as in the original formulation.
fn add_attention<T: Real>(p: &mut Parameters<T>, name: &str, d: usize, seed: u64) {
    let bound = (6.0 / (2 * d) as f64).sqrt();
    for proj in ["q", "k", "v", "o"] {
        let w = format!("{name}.{proj}.w");
        p.insert(w.clone(), uniform(&[d, d], bound, seed, &w));
    }
}

/// Scaled-uniform matrices (±√(6/(fan_in+fan_out))), embeddings ±d^{-1/2},
/// zero biases, unit layer-norm gains.
pub fn init_parameters<T: Real>(
    cfg: &ModelConfig,
    aug: &PosAugConfig,
    seed: u64,
) -> Result<Parameters<T>> {
    cfg.validate()?;
    aug.validate(cfg.d_model)?;
    let d = cfg.d_model;
    let d_w = aug.d_word(d);
    let mut p = Parameters::new();
    p.insert(
        "src_embed",
        uniform(
            &[cfg.source_vocab_size, d_w],
            (d_w as f64).powf(-0.5),
            seed,
            "src_embed",
        ),
    );
    if aug.has_pos_table() {
        p.insert(
            "pos_embed",
            build_pos_embedding_table(cfg.tag_vocab_size, aug.d_pos, seed)?.weights,
        );
    }
    p.insert(
        "tgt_embed",
        uniform(
            &[cfg.target_vocab_size, d],
            (d as f64).powf(-0.5),
            seed,
            "tgt_embed",
        ),
    );
    for l in 0..cfg.num_layers {
        let pre = format!("enc.{l}");
        add_attention(&mut p, &format!("{pre}.self_attn"), d, seed);
        add_layer_norm(&mut p, &format!("{pre}.ln1"), d);
        add_linear(&mut p, &format!("{pre}.ffn1"), d, cfg.d_ffn, seed);
        add_linear(&mut p, &format!("{pre}.ffn2"), cfg.d_ffn, d, seed);
        add_layer_norm(&mut p, &format!("{pre}.ln2"), d);
    }
    for l in 0..cfg.num_layers {
        let pre = format!("dec.{l}");
        add_attention(&mut p, &format!("{pre}.self_attn"), d, seed);
        add_layer_norm(&mut p, &format!("{pre}.ln1"), d);
        add_attention(&mut p, &format!("{pre}.cross_attn"), d, seed);
        add_layer_norm(&mut p, &format!("{pre}.ln2"), d);
        add_linear(&mut p, &format!("{pre}.ffn1"), d, cfg.d_ffn, seed);
        add_linear(&mut p, &format!("{pre}.ffn2"), cfg.d_ffn, d, seed);
        add_layer_norm(&mut p, &format!("{pre}.ln3"), d);
    }
    add_linear(&mut p, "out_proj", d, cfg.target_vocab_size, seed);
    Ok(p)
}

/// Padded source ids and aligned tag ids, row-major (batch, len).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceBatch {
    pub batch: usize,
    pub len: usize,
    pub unit_ids: Vec<usize>,
    pub tag_ids: Vec<usize>,
}

impl SourceBatch {
    pub fn pad_mask(&self) -> Vec<bool> {
        self.unit_ids
            .iter()
            .map(|&u| u == Vocabulary::PAD_ID)
            .collect()
    }
}

/// Decoder input (BOS-prefixed) and output (EOS-terminated) ids, padded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetBatch {
    pub batch: usize,
    pub len: usize,
    pub input_ids: Vec<usize>,
    pub output_ids: Vec<usize>,
}

impl TargetBatch {
    pub fn pad_mask(&self) -> Vec<bool> {
        self.output_ids
            .iter()
            .map(|&u| u == Vocabulary::PAD_ID)
            .collect()
    }
}

fn linear<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let h = g.matmul(x, w)?;
    g.add(h, b)
}

fn project<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    g.matmul(x, w)
}

fn layer_norm<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let gain = p.get(&format!("{name}.gain"))?;
    let bias = p.get(&format!("{name}.bias"))?;
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

/// Single-head attention softmax(q·kᵀ/√d_k)·v with masked scores. Returns the
/// output and the attention weights.
pub fn scaled_dot_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &[bool],
) -> Result<(Var, Var)> {
    let d_k = g.value(q).last_dim();
    let kt = g.transpose_last_two(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::lit(1.0 / (d_k as f64).sqrt()));
    let scores = g.masked_fill(scores, mask, T::lit(MASK_FILL))?;
    let weights = g.softmax(scores)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Split q, k, v (B, L, d) into `num_heads` column blocks, attend per head and
/// concatenate. `mask` is (B, Lq, Lk), true = blocked.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &[bool],
    num_heads: usize,
) -> Result<Var> {
    let d = g.value(q).last_dim();
    if num_heads == 0 || !d.is_multiple_of(num_heads) {
        return Err(Error::invalid(format!(
            "feature dim {d} not divisible by {num_heads} heads"
        )));
    }
    for other in [k, v] {
        if g.value(other).last_dim() != d {
            return Err(Error::Shape {
                op: "multi_head_attention",
                lhs: g.shape(q).to_vec(),
                rhs: g.shape(other).to_vec(),
            });
        }
    }
    let widths = vec![d / num_heads; num_heads];
    let qs = g.split_last_dim(q, &widths)?;
    let ks = g.split_last_dim(k, &widths)?;
    let vs = g.split_last_dim(v, &widths)?;
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        heads.push(scaled_dot_attention(g, qs[h], ks[h], vs[h], mask)?.0);
    }
    if heads.len() == 1 {
        return Ok(heads[0]);
    }
    g.concat_last_dim(&heads)
}

fn attention_block<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    x_q: Var,
    x_kv: Var,
    mask: &[bool],
    num_heads: usize,
) -> Result<Var> {
    let q = project(g, p, &format!("{name}.q"), x_q)?;
    let k = project(g, p, &format!("{name}.k"), x_kv)?;
    let v = project(g, p, &format!("{name}.v"), x_kv)?;
    let a = multi_head_attention(g, q, k, v, mask, num_heads)?;
    project(g, p, &format!("{name}.o"), a)
}

/// (B, Lq, Lk) mask blocking padded keys, and future keys when `causal`.
pub fn attention_mask(batch: usize, lq: usize, key_pad: &[bool], causal: bool) -> Vec<bool> {
    let lk = key_pad.len() / batch.max(1);
    let mut m = Vec::with_capacity(batch * lq * lk);
    for b in 0..batch {
        for i in 0..lq {
            for j in 0..lk {
                m.push(key_pad[b * lk + j] || (causal && j > i));
            }
        }
    }
    m
}

fn feed_forward<T: Real>(g: &mut Graph<T>, p: &Bound, pre: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{pre}.ffn1"), x)?;
    let h = g.relu(h);
    linear(g, p, &format!("{pre}.ffn2"), h)
}

fn residual<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    ln: &str,
    x: Var,
    sub: Var,
    dropout_p: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let sub = mode.dropout(g, sub, dropout_p)?;
    let sum = g.add(x, sub)?;
    layer_norm(g, p, ln, sum)
}

/// Encoder stack over assembled inputs `x` (B, L, d_model).
pub fn encoder_forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    x: Var,
    src_pad: &[bool],
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != cfg.d_model || src_pad.len() != shape[0] * shape[1] {
        return Err(Error::Shape {
            op: "encoder_forward",
            lhs: shape,
            rhs: vec![src_pad.len(), cfg.d_model],
        });
    }
    let mask = attention_mask(shape[0], shape[1], src_pad, false);
    let mut x = x;
    for l in 0..cfg.num_layers {
        let pre = format!("enc.{l}");
        let a = attention_block(
            g,
            p,
            &format!("{pre}.self_attn"),
            x,
            x,
            &mask,
            cfg.num_heads,
        )?;
        x = residual(g, p, &format!("{pre}.ln1"), x, a, cfg.dropout_p, mode)?;
        let f = feed_forward(g, p, &pre, x)?;
        x = residual(g, p, &format!("{pre}.ln2"), x, f, cfg.dropout_p, mode)?;
    }
    Ok(x)
}

/// √d_model·E_t[y] + PE, then dropout.
#[allow(clippy::too_many_arguments)]
pub fn embed_target<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    pe: &PeCache<T>,
    ids: &[usize],
    batch: usize,
    len: usize,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let e = g.embedding(p.get("tgt_embed")?, ids, &[batch, len])?;
    let e = g.scale(e, T::lit((cfg.d_model as f64).sqrt()));
    let pos = g.leaf(pe.rows(cfg.d_model, len)?);
    let x = g.add(e, pos)?;
    mode.dropout(g, x, cfg.dropout_p)
}

/// Decoder stack and output projection. Returns logits (B, Lt, V_tgt).
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    y: Var,
    tgt_pad: &[bool],
    enc: Var,
    src_pad: &[bool],
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let enc_shape = g.shape(enc).to_vec();
    if shape.len() != 3
        || enc_shape.len() != 3
        || shape[0] != enc_shape[0]
        || shape[2] != cfg.d_model
    {
        return Err(Error::Shape {
            op: "decoder_forward",
            lhs: shape,
            rhs: enc_shape,
        });
    }
    let (batch, lt) = (shape[0], shape[1]);
    let self_mask = attention_mask(batch, lt, tgt_pad, true);
    let cross_mask = attention_mask(batch, lt, src_pad, false);
    let mut x = y;
    for l in 0..cfg.num_layers {
        let pre = format!("dec.{l}");
        let a = attention_block(
            g,
            p,
            &format!("{pre}.self_attn"),
            x,
            x,
            &self_mask,
            cfg.num_heads,
        )?;
        x = residual(g, p, &format!("{pre}.ln1"), x, a, cfg.dropout_p, mode)?;
        let c = attention_block(
            g,
            p,
            &format!("{pre}.cross_attn"),
            x,
            enc,
            &cross_mask,
            cfg.num_heads,
        )?;
        x = residual(g, p, &format!("{pre}.ln2"), x, c, cfg.dropout_p, mode)?;
        let f = feed_forward(g, p, &pre, x)?;
        x = residual(g, p, &format!("{pre}.ln3"), x, f, cfg.dropout_p, mode)?;
    }
    linear(g, p, "out_proj", x)
}

/// Parameters together with the configuration that shapes them.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub aug: PosAugConfig,
    pub params: Parameters<T>,
    pe: PeCache<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, aug: PosAugConfig, params: Parameters<T>) -> Result<Self> {
        config.validate()?;
        aug.validate(config.d_model)?;
        let pe = PeCache::new(config.max_positions, &config, &aug)?;
        Ok(Self {
            config,
            aug,
            params,
            pe,
        })
    }

    pub fn init(config: ModelConfig, aug: PosAugConfig, seed: u64) -> Result<Self> {
        let params = init_parameters(&config, &aug, seed)?;
        Self::new(config, aug, params)
    }

    pub fn pe(&self) -> &PeCache<T> {
        &self.pe
    }

    pub fn encode_graph(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        src: &SourceBatch,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let x = assemble_encoder_input(
            g,
            p,
            src,
            &self.pe,
            &self.aug,
            self.config.d_model,
            self.config.dropout_p,
            mode,
        )?;
        encoder_forward(g, p, &self.config, x, &src.pad_mask(), mode)
    }

    pub fn logits_graph(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        src: &SourceBatch,
        tgt: &TargetBatch,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let enc = self.encode_graph(g, p, src, mode)?;
        let y = embed_target(
            g,
            p,
            &self.config,
            &self.pe,
            &tgt.input_ids,
            tgt.batch,
            tgt.len,
            mode,
        )?;
        decoder_forward(
            g,
            p,
            &self.config,
            y,
            &tgt.pad_mask(),
            enc,
            &src.pad_mask(),
            mode,
        )
    }

    /// Label-smoothed loss node over non-pad target tokens, with token count.
    pub fn loss_graph(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        src: &SourceBatch,
        tgt: &TargetBatch,
        label_smoothing: f64,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, usize)> {
        let logits = self.logits_graph(g, p, src, tgt, mode)?;
        g.smoothed_nll(logits, &tgt.output_ids, label_smoothing, Vocabulary::PAD_ID)
    }

    /// Loss value in eval mode (no dropout).
    pub fn eval_loss(
        &self,
        src: &SourceBatch,
        tgt: &TargetBatch,
        label_smoothing: f64,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let (loss, _) = self.loss_graph(&mut g, &p, src, tgt, label_smoothing, &mut Mode::Eval)?;
        Ok(g.value(loss).data()[0].as_f64())
    }

    /// Encoder states for one source sentence, eval mode.
    pub fn encode(&self, src: &SourceBatch) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let enc = self.encode_graph(&mut g, &p, src, &mut Mode::Eval)?;
        Ok(g.value(enc).clone())
    }

    /// Log-probabilities of the next target token after each prefix (all of
    /// equal length, BOS excluded), given the encoder states of one sentence.
    pub fn next_log_probs(
        &self,
        enc: &Tensor<T>,
        src_pad: &[bool],
        prefixes: &[Vec<usize>],
    ) -> Result<Vec<Vec<f64>>> {
        let k = prefixes.len();
        let t = prefixes.first().map_or(0, Vec::len) + 1;
        if prefixes.iter().any(|p| p.len() + 1 != t) {
            return Err(Error::invalid("prefixes must have equal length"));
        }
        let mut ids = Vec::with_capacity(k * t);
        for p in prefixes {
            ids.push(Vocabulary::BOS_ID);
            ids.extend_from_slice(p);
        }
        let es = enc.shape();
        let mut tiled = Vec::with_capacity(k * enc.len());
        let mut pad = Vec::with_capacity(k * src_pad.len());
        for _ in 0..k {
            tiled.extend_from_slice(enc.data());
            pad.extend_from_slice(src_pad);
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let enc_v = g.leaf(Tensor::new(vec![k, es[1], es[2]], tiled)?);
        let mode = &mut Mode::Eval;
        let y = embed_target(&mut g, &p, &self.config, &self.pe, &ids, k, t, mode)?;
        let tgt_pad = vec![false; k * t];
        let logits = decoder_forward(&mut g, &p, &self.config, y, &tgt_pad, enc_v, &pad, mode)?;
        let v = self.config.target_vocab_size;
        let lv = g.value(logits).data();
        Ok((0..k)
            .map(|b| {
                let row = &lv[(b * t + t - 1) * v..(b * t + t) * v];
                let mut probs: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
                softmax_in_place(&mut probs);
                probs.into_iter().map(f64::ln).collect()
            })
            .collect())
    }
}

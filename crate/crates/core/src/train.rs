//! Label-smoothed training with Adam and the inverse-square-root warmup
//! schedule, batching and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bpe::{apply_bpe, propagate_tags, BpeModel, FactoredSequence, Segmentation};
use crate::checkpoint::{self, Record};
use crate::error::{Error, Result};
use crate::model::{name_stream, Mode, Model, ModelConfig, Parameters, SourceBatch, TargetBatch};
use crate::pos_aug::PosAugConfig;
use crate::tagging::{build_tag_vocab, TagVocabulary, TaggedSentence};
use crate::tensor::{DType, Graph, Real, Rng, Tensor};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_sentences: usize,
    pub label_smoothing: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub seed: u64,
    /// Save a checkpoint and compute validation loss every this many steps
    /// (0: only at the end).
    pub checkpoint_every: u64,
    pub precision: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_sentences: 32,
            label_smoothing: 0.2,
            warmup_steps: 4000,
            max_steps: 100_000,
            seed: 1,
            checkpoint_every: 1000,
            precision: DType::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_sentences == 0 {
            return Err(Error::Config("batch_sentences must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} not in [0,1)",
                self.label_smoothing
            )));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta1 < beta2 < 1, got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("optimizer eps must be positive".into()));
        }
        Ok(())
    }
}

/// d^{-1/2} · min(step^{-1/2}, step · warmup^{-3/2}).
pub fn lr_at(step: u64, d_model: usize, warmup_steps: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::invalid("learning rate schedule starts at step 1"));
    }
    let s = step as f64;
    let w = warmup_steps as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Label-smoothed cross-entropy of `logits` (…, V) against `targets`, mean
/// over non-pad positions. Returns the loss and the number of counted tokens.
pub fn label_smoothed_loss<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    label_smoothing: f64,
    pad_id: usize,
) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let l = g.leaf(logits.clone());
    let (loss, count) = g.smoothed_nll(l, targets, label_smoothing, pad_id)?;
    Ok((g.value(loss).data()[0].as_f64(), count))
}

/// Minimum of the smoothed loss: the entropy of the smoothed target.
pub fn smoothed_loss_floor(vocab_size: usize, label_smoothing: f64) -> f64 {
    let v = vocab_size as f64;
    let off = label_smoothing / v;
    let on = 1.0 - label_smoothing + off;
    let xlogx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    -xlogx(on) - (v - 1.0) * xlogx(off)
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Parameters<T>,
    pub v: Parameters<T>,
}

impl<T: Real> AdamState<T> {
    pub fn zeros_like(params: &Parameters<T>) -> Self {
        let mut m = Parameters::new();
        for (name, t) in params.iter() {
            m.insert(name, Tensor::zeros(t.shape()));
        }
        Self { m: m.clone(), v: m }
    }
}

/// One bias-corrected Adam update at 1-based `step`. Gradients are checked for
/// NaN/inf before anything is modified.
pub fn adam_step<T: Real>(
    params: &mut Parameters<T>,
    grads: &[(String, Tensor<T>)],
    state: &mut AdamState<T>,
    step: u64,
    lr: f64,
    opt: &OptimizerConfig,
) -> Result<()> {
    if step == 0 {
        return Err(Error::invalid("adam step count starts at 1"));
    }
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in {name}")));
        }
    }
    let b1 = T::lit(opt.beta1);
    let b2 = T::lit(opt.beta2);
    let c1 = T::lit(1.0 - opt.beta1);
    let c2 = T::lit(1.0 - opt.beta2);
    let corr1 = T::lit(1.0 - opt.beta1.powf(step as f64));
    let corr2 = T::lit(1.0 - opt.beta2.powf(step as f64));
    let lr = T::lit(lr);
    let eps = T::lit(opt.eps);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.get_mut(name).expect("moments match parameters");
        let v = state.v.get_mut(name).expect("moments match parameters");
        for (((p, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Vocabularies a trained model depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabs {
    pub source: Vocabulary,
    pub target: Vocabulary,
    pub tags: TagVocabulary,
}

/// BPE segmentation, or one unit per token without a model.
pub fn segment<S: AsRef<str>>(tokens: &[S], bpe: Option<&BpeModel>) -> Segmentation {
    match bpe {
        Some(m) => apply_bpe(tokens, m),
        None => Segmentation {
            units: tokens.iter().map(|t| t.as_ref().to_owned()).collect(),
            word_index: (0..tokens.len()).collect(),
        },
    }
}

pub fn build_vocabs(
    sources: &[TaggedSentence],
    targets: &[Vec<String>],
    bpe: Option<&BpeModel>,
) -> Vocabs {
    let src_units: Vec<Vec<String>> = sources
        .iter()
        .map(|s| segment(&s.tokens, bpe).units)
        .collect();
    let tgt_units: Vec<Vec<String>> = targets.iter().map(|t| segment(t, bpe).units).collect();
    Vocabs {
        source: Vocabulary::build(src_units.iter().map(Vec::as_slice)),
        target: Vocabulary::build(tgt_units.iter().map(Vec::as_slice)),
        tags: build_tag_vocab(sources),
    }
}

pub fn encode_source(
    src: &TaggedSentence,
    bpe: Option<&BpeModel>,
    vocabs: &Vocabs,
) -> Result<FactoredSequence> {
    propagate_tags(
        &segment(&src.tokens, bpe),
        src,
        &vocabs.tags,
        &vocabs.source,
    )
}

/// A source sequence (EOS-terminated) and target unit ids (without EOS).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub source: FactoredSequence,
    pub target_ids: Vec<usize>,
}

impl TrainingPair {
    pub fn encode(
        src: &TaggedSentence,
        tgt: &[String],
        bpe: Option<&BpeModel>,
        vocabs: &Vocabs,
    ) -> Result<Self> {
        Ok(Self {
            source: encode_source(src, bpe, vocabs)?,
            target_ids: vocabs.target.encode(&segment(tgt, bpe).units),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Corpus positions of the pairs in this batch.
    pub indices: Vec<usize>,
    pub source: SourceBatch,
    pub target: TargetBatch,
}

/// Pad the selected pairs to a common length.
pub fn collate(pairs: &[TrainingPair], indices: &[usize]) -> Batch {
    let batch = indices.len();
    let src_len = indices
        .iter()
        .map(|&i| pairs[i].source.len())
        .max()
        .unwrap_or(0);
    let tgt_len = indices
        .iter()
        .map(|&i| pairs[i].target_ids.len() + 1)
        .max()
        .unwrap_or(0);
    let mut source = SourceBatch {
        batch,
        len: src_len,
        unit_ids: vec![Vocabulary::PAD_ID; batch * src_len],
        tag_ids: vec![TagVocabulary::PAD; batch * src_len],
    };
    let mut target = TargetBatch {
        batch,
        len: tgt_len,
        input_ids: vec![Vocabulary::PAD_ID; batch * tgt_len],
        output_ids: vec![Vocabulary::PAD_ID; batch * tgt_len],
    };
    for (b, &i) in indices.iter().enumerate() {
        let s = &pairs[i].source;
        source.unit_ids[b * src_len..b * src_len + s.len()].copy_from_slice(&s.unit_ids);
        source.tag_ids[b * src_len..b * src_len + s.len()].copy_from_slice(&s.tag_ids);
        let t = &pairs[i].target_ids;
        let row = b * tgt_len;
        target.input_ids[row] = Vocabulary::BOS_ID;
        target.input_ids[row + 1..row + 1 + t.len()].copy_from_slice(t);
        target.output_ids[row..row + t.len()].copy_from_slice(t);
        target.output_ids[row + t.len()] = Vocabulary::EOS_ID;
    }
    Batch {
        indices: indices.to_vec(),
        source,
        target,
    }
}

/// Shuffle deterministically per (seed, epoch), then cut into batches of
/// `batch_sentences` pairs; the last batch may be short.
pub fn make_batches(
    pairs: &[TrainingPair],
    batch_sentences: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if pairs.is_empty() {
        return Err(Error::invalid("cannot batch an empty corpus"));
    }
    if batch_sentences == 0 {
        return Err(Error::invalid("batch_sentences must be at least 1"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    Rng::derived(seed, name_stream(&format!("batches/{epoch}"))).shuffle(&mut order);
    Ok(order
        .chunks(batch_sentences)
        .map(|c| collate(pairs, c))
        .collect())
}

/// Model, optimizer state and data position: everything a resumed run needs.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub train_cfg: TrainConfig,
    pub opt: OptimizerConfig,
    pub adam: AdamState<T>,
    /// Updates completed so far.
    pub step: u64,
    pub epoch: u64,
    pub batch_in_epoch: u64,
    pub rng: Rng,
    pub vocabs: Vocabs,
    pub bpe: Option<BpeModel>,
}

/// Configuration block stored inside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub model: ModelConfig,
    pub pos_aug: PosAugConfig,
    pub train: TrainConfig,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub final_step: u64,
    pub losses: Vec<f64>,
    /// Checkpoint with the lowest validation loss (the last one when there is
    /// no validation set).
    pub best_checkpoint: Option<PathBuf>,
    pub best_valid_loss: Option<f64>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.ckpt")
}

impl<T: Real> Trainer<T> {
    pub fn new(
        model: Model<T>,
        train_cfg: TrainConfig,
        opt: OptimizerConfig,
        vocabs: Vocabs,
        bpe: Option<BpeModel>,
    ) -> Result<Self> {
        train_cfg.validate()?;
        opt.validate()?;
        let adam = AdamState::zeros_like(&model.params);
        Ok(Self {
            model,
            train_cfg,
            opt,
            adam,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            rng: Rng::derived(train_cfg.seed, name_stream("dropout")),
            vocabs,
            bpe,
        })
    }

    /// Forward, backward and Adam update on one batch.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepOutcome> {
        let step = self.step + 1;
        let lr = lr_at(step, self.model.config.d_model, self.train_cfg.warmup_steps)?;
        let mut g = Graph::new();
        let bound = self.model.params.bind(&mut g);
        let mut mode = Mode::Train(&mut self.rng);
        let (loss, _) = self.model.loss_graph(
            &mut g,
            &bound,
            &batch.source,
            &batch.target,
            self.train_cfg.label_smoothing,
            &mut mode,
        )?;
        let loss_value = g.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss_value} at step {step}"
            )));
        }
        let mut grads = g.backward(loss)?;
        let grads: Vec<(String, Tensor<T>)> = bound
            .iter()
            .map(|(name, v)| (name.to_owned(), grads.take(v)))
            .collect();
        adam_step(
            &mut self.model.params,
            &grads,
            &mut self.adam,
            step,
            lr,
            &self.opt,
        )?;
        self.step = step;
        Ok(StepOutcome {
            step,
            lr,
            loss: loss_value,
        })
    }

    /// Token-weighted mean smoothed loss in eval mode.
    pub fn validation_loss(&self, valid: &[TrainingPair]) -> Result<Option<f64>> {
        if valid.is_empty() {
            return Ok(None);
        }
        let order: Vec<usize> = (0..valid.len()).collect();
        let (mut total, mut tokens) = (0.0, 0usize);
        for chunk in order.chunks(self.train_cfg.batch_sentences) {
            let b = collate(valid, chunk);
            let mut g = Graph::new();
            let bound = self.model.params.bind(&mut g);
            let (loss, count) = self.model.loss_graph(
                &mut g,
                &bound,
                &b.source,
                &b.target,
                self.train_cfg.label_smoothing,
                &mut Mode::Eval,
            )?;
            total += g.value(loss).data()[0].as_f64() * count as f64;
            tokens += count;
        }
        Ok(Some(total / tokens as f64))
    }

    pub fn meta(&self) -> RunMeta {
        RunMeta {
            model: self.model.config,
            pos_aug: self.model.aug,
            train: self.train_cfg,
            optimizer: self.opt,
        }
    }

    pub fn to_records(&self) -> Vec<Record> {
        let wp = self.rng.word_pos();
        let mut records = vec![
            Record::words(
                "meta/state",
                &[
                    self.step,
                    self.epoch,
                    self.batch_in_epoch,
                    self.rng.seed(),
                    self.rng.stream(),
                    wp as u64,
                    (wp >> 64) as u64,
                ],
            ),
            Record::bytes(
                "meta/config",
                serde_json::to_string(&self.meta())
                    .expect("config serializes")
                    .as_bytes(),
            ),
            Record::bytes("meta/source_vocab", self.vocabs.source.to_text().as_bytes()),
            Record::bytes("meta/target_vocab", self.vocabs.target.to_text().as_bytes()),
            Record::bytes("meta/tag_vocab", self.vocabs.tags.to_text().as_bytes()),
        ];
        if let Some(bpe) = &self.bpe {
            records.push(Record::bytes(
                "meta/bpe",
                crate::bpe::to_text(bpe).as_bytes(),
            ));
        }
        for (prefix, params) in [
            ("param/", &self.model.params),
            ("adam_m/", &self.adam.m),
            ("adam_v/", &self.adam.v),
        ] {
            records.extend(
                params
                    .iter()
                    .map(|(n, t)| Record::from_tensor(format!("{prefix}{n}"), t)),
            );
        }
        records
    }

    pub fn from_records(records: &[Record], path: &Path) -> Result<Self> {
        let meta = read_meta(records)?;
        let text = |name: &str| -> Result<String> {
            String::from_utf8(checkpoint::find(records, name)?.as_bytes()?.to_vec())
                .map_err(|_| Error::data(path, None, format!("{name} is not UTF-8")))
        };
        let vocabs = Vocabs {
            source: Vocabulary::from_text(&text("meta/source_vocab")?)?,
            target: Vocabulary::from_text(&text("meta/target_vocab")?)?,
            tags: TagVocabulary::from_text(&text("meta/tag_vocab")?)?,
        };
        let bpe = match checkpoint::find(records, "meta/bpe") {
            Ok(_) => Some(crate::bpe::from_text(&text("meta/bpe")?, path)?),
            Err(_) => None,
        };
        let load = |prefix: &str| -> Result<Parameters<T>> {
            let mut p = Parameters::new();
            for r in records.iter().filter(|r| r.name.starts_with(prefix)) {
                p.insert(&r.name[prefix.len()..], r.to_tensor::<T>()?);
            }
            Ok(p)
        };
        let params = load("param/")?;
        let expected = crate::model::init_parameters::<T>(&meta.model, &meta.pos_aug, 0)?;
        if params.len() != expected.len()
            || expected
                .iter()
                .any(|(n, t)| params.get(n).map(Tensor::shape) != Some(t.shape()))
        {
            return Err(Error::data(
                path,
                None,
                "checkpoint parameters do not match its configuration",
            ));
        }
        let adam = AdamState {
            m: load("adam_m/")?,
            v: load("adam_v/")?,
        };
        let state = checkpoint::find(records, "meta/state")?.as_words()?;
        if state.len() != 7 {
            return Err(Error::data(path, None, "malformed meta/state record"));
        }
        let mut t = Self::new(
            Model::new(meta.model, meta.pos_aug, params)?,
            meta.train,
            meta.optimizer,
            vocabs,
            bpe,
        )?;
        if adam.m.len() == t.adam.m.len() && adam.v.len() == t.adam.v.len() {
            t.adam = adam;
        } else {
            return Err(Error::data(
                path,
                None,
                "checkpoint optimizer state incomplete",
            ));
        }
        t.step = state[0];
        t.epoch = state[1];
        t.batch_in_epoch = state[2];
        t.rng = Rng::restore(
            state[3],
            state[4],
            state[5] as u128 | (state[6] as u128) << 64,
        );
        Ok(t)
    }

    /// Make sure `batches` holds the current epoch with a batch left,
    /// moving to the next epoch when this one is used up.
    fn refresh_batches(&mut self, train: &[TrainingPair], batches: &mut Vec<Batch>) -> Result<()> {
        let (bs, seed) = (self.train_cfg.batch_sentences, self.train_cfg.seed);
        if batches.is_empty() {
            *batches = make_batches(train, bs, seed, self.epoch)?;
        }
        if self.batch_in_epoch as usize >= batches.len() {
            self.epoch += 1;
            self.batch_in_epoch = 0;
            *batches = make_batches(train, bs, seed, self.epoch)?;
        }
        Ok(())
    }

    /// `steps` further updates without checkpoints or logging; returns the
    /// per-step training losses.
    pub fn fit(&mut self, train: &[TrainingPair], steps: u64) -> Result<Vec<f64>> {
        let mut batches = Vec::new();
        let mut losses = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            self.refresh_batches(train, &mut batches)?;
            losses.push(
                self.train_step(&batches[self.batch_in_epoch as usize])?
                    .loss,
            );
            self.batch_in_epoch += 1;
        }
        Ok(losses)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.to_records())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(&checkpoint::read(path)?, path)
    }

    /// Train until `max_steps`, writing one metrics line per step and
    /// checkpoints into `checkpoint_dir`. On a numeric failure the pre-failure
    /// state is saved as `last.ckpt` and the error is returned.
    pub fn run(
        &mut self,
        train: &[TrainingPair],
        valid: &[TrainingPair],
        checkpoint_dir: &Path,
        metrics: &mut dyn Write,
    ) -> Result<TrainSummary> {
        std::fs::create_dir_all(checkpoint_dir).map_err(|e| Error::io(checkpoint_dir, e))?;
        let metrics_err = |e| Error::io("<metrics>", e);
        let mut losses = Vec::new();
        let mut best: Option<(f64, PathBuf)> = None;
        let mut last_ckpt = None;
        let mut batches = Vec::new();
        while self.step < self.train_cfg.max_steps {
            self.refresh_batches(train, &mut batches)?;
            // A failed step leaves parameters and moments untouched; only the
            // dropout stream has advanced.
            let rng_before = self.rng.clone();
            let out = match self.train_step(&batches[self.batch_in_epoch as usize]) {
                Ok(o) => o,
                Err(e @ Error::Numeric(_)) => {
                    self.rng = rng_before;
                    self.save(&checkpoint_dir.join("last.ckpt"))?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            self.batch_in_epoch += 1;
            losses.push(out.loss);
            let every = self.train_cfg.checkpoint_every;
            let at_checkpoint =
                (every > 0 && out.step % every == 0) || out.step == self.train_cfg.max_steps;
            let mut line = format!("{}\t{:.6e}\t{:.6}", out.step, out.lr, out.loss);
            if at_checkpoint {
                let valid_loss = self.validation_loss(valid)?;
                if let Some(v) = valid_loss {
                    line.push_str(&format!("\t{v:.6}"));
                }
                let path = checkpoint_dir.join(checkpoint_name(out.step));
                self.save(&path)?;
                log::info!("step {}: saved {}", out.step, path.display());
                match valid_loss {
                    Some(v) if best.as_ref().is_none_or(|(b, _)| v < *b) => {
                        best = Some((v, path.clone()))
                    }
                    _ => {}
                }
                last_ckpt = Some(path);
            }
            writeln!(metrics, "{line}").map_err(metrics_err)?;
        }
        metrics.flush().map_err(metrics_err)?;
        let (best_valid_loss, best_checkpoint) = match best {
            Some((v, p)) => (Some(v), Some(p)),
            None => (None, last_ckpt),
        };
        if let Some(p) = &best_checkpoint {
            let dst = checkpoint_dir.join("best.ckpt");
            std::fs::copy(p, &dst).map_err(|e| Error::io(&dst, e))?;
        }
        Ok(TrainSummary {
            final_step: self.step,
            losses,
            best_checkpoint,
            best_valid_loss,
        })
    }
}

pub fn read_meta(records: &[Record]) -> Result<RunMeta> {
    let bytes = checkpoint::find(records, "meta/config")?.as_bytes()?;
    serde_json::from_slice(bytes).map_err(|e| Error::invalid(format!("checkpoint config: {e}")))
}

//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure during training.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bleu::bleu_files;
use crate::bpe::{
    self, apply_bpe, learn_bpe, merge_subwords, tagged_units, token_frequencies, BpeModel,
};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::corpus::{compute_stats, filter_pairs, load_parallel, tokenize, write_parallel};
use crate::decode::{beam_search, greedy};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pos_aug::AugMode;
use crate::tagging::{
    fallback_tag, parse_tagged_file, write_tagged_file, TagFormat, TaggedSentence,
};
use crate::tensor::{DType, Real};
use crate::train::{build_vocabs, encode_source, read_meta, Trainer, TrainingPair, Vocabs};

#[derive(Debug, Parser)]
#[command(
    name = "posnmt",
    version,
    about = "Transformer NMT with source-side POS factors"
)]
pub struct Cli {
    /// Run configuration (TOML); command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Start from the tiny desk-scale profile instead of the full-size defaults.
    #[arg(long, global = true)]
    pub desk: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter a parallel corpus.
    Preprocess {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out_source: PathBuf,
        #[arg(long)]
        out_target: PathBuf,
        /// Also apply the short-sentence rule for test sets.
        #[arg(long)]
        test: bool,
    },
    /// Learn BPE merges from one or more tokenized files.
    LearnBpe {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        merges: Option<usize>,
    },
    /// Segment a tokenized file; with --tags, also write tag-propagated units.
    ApplyBpe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Slash-format tagged version of --input.
        #[arg(long, requires = "tags_output")]
        tags: Option<PathBuf>,
        #[arg(long)]
        tags_output: Option<PathBuf>,
    },
    /// Tag a tokenized file with the built-in rule tagger, or validate an
    /// externally tagged file.
    Tag {
        #[arg(long, conflicts_with = "validate", requires = "output")]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        validate: Option<PathBuf>,
        #[arg(long, default_value = "slash", value_parser = parse_format)]
        format: TagFormat,
    },
    /// Print corpus statistics.
    Stats {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Train a model.
    Train(TrainArgs),
    /// Translate a tokenized source file with a checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Slash-format tags for --input; the rule tagger is used otherwise.
        #[arg(long)]
        tags: Option<PathBuf>,
        #[arg(long)]
        beam_size: Option<usize>,
        #[arg(long)]
        length_penalty: Option<f64>,
        /// Argmax decoding instead of beam search.
        #[arg(long)]
        greedy: bool,
    },
    /// Corpus BLEU of a candidate file against a reference file.
    Score {
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// baseline, embed_concat or pe_concat.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<AugMode>,
    /// Width of the POS part of the encoder input.
    #[arg(long)]
    pub d_pos: Option<usize>,
    /// Seed for initialization, batching and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub train_source: Option<PathBuf>,
    #[arg(long)]
    pub train_target: Option<PathBuf>,
    /// Slash-format tags for --train-source; the rule tagger is used otherwise.
    #[arg(long)]
    pub train_tags: Option<PathBuf>,
    #[arg(long)]
    pub valid_source: Option<PathBuf>,
    #[arg(long)]
    pub valid_target: Option<PathBuf>,
    #[arg(long)]
    pub valid_tags: Option<PathBuf>,
    /// Merges from learn-bpe; word-level units without it.
    #[arg(long)]
    pub bpe_model: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Metrics log; defaults to metrics.tsv in the checkpoint directory.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<AugMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<TagFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        Error::Io { .. }
        | Error::Data { .. }
        | Error::LineCountMismatch { .. }
        | Error::Shape { .. }
        | Error::Invalid(_) => 2,
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn main_with_args<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => RunConfig::load(p, cli.desk),
        None => Ok(RunConfig::base(cli.desk)),
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(cli)?;
    let stdout_err = |e| Error::io("<stdout>", e);
    match &cli.command {
        Command::Preprocess {
            source,
            target,
            out_source,
            out_target,
            test,
        } => {
            cfg.filter.validate()?;
            let pairs = load_parallel(source, target)?;
            let kept = filter_pairs(&pairs, &cfg.filter, *test);
            write_parallel(&kept, out_source, out_target)?;
            writeln!(out, "kept {} of {} pairs", kept.len(), pairs.len()).map_err(stdout_err)
        }
        Command::LearnBpe {
            input,
            output,
            merges,
        } => {
            let mut sentences = Vec::new();
            for p in input {
                sentences.extend(read_tokenized(p)?);
            }
            let freqs = token_frequencies(sentences.iter().map(Vec::as_slice));
            let model = learn_bpe(&freqs, merges.unwrap_or(cfg.bpe.merges))?;
            bpe::serialize_bpe(&model, output)?;
            writeln!(out, "learned {} merges", model.merges().len()).map_err(stdout_err)
        }
        Command::ApplyBpe {
            model,
            input,
            output,
            tags,
            tags_output,
        } => {
            let model = bpe::deserialize_bpe(model)?;
            let sentences = read_tokenized(input)?;
            let segs: Vec<_> = sentences.iter().map(|s| apply_bpe(s, &model)).collect();
            let text: String = segs.iter().map(|s| s.units.join(" ") + "\n").collect();
            fs::write(output, text).map_err(|e| Error::io(output, e))?;
            if let (Some(tags), Some(tags_output)) = (tags, tags_output) {
                let tagged = read_tags_for(tags, &sentences)?;
                let units = segs
                    .iter()
                    .zip(&tagged)
                    .map(|(s, t)| tagged_units(s, t))
                    .collect::<Result<Vec<_>>>()?;
                write_tagged_file(tags_output, &units, TagFormat::Slash)?;
            }
            Ok(())
        }
        Command::Tag {
            input,
            output,
            validate,
            format,
        } => {
            if let Some(path) = validate {
                let n = parse_tagged_file(path, *format)?.len();
                return writeln!(out, "{}: {n} tagged sentences", path.display())
                    .map_err(stdout_err);
            }
            let (Some(input), Some(output)) = (input, output) else {
                return Err(Error::Config(
                    "tag needs --input and --output, or --validate".into(),
                ));
            };
            let tagged = read_tokenized_nonempty(input)?
                .iter()
                .map(|s| fallback_tag(s))
                .collect::<Result<Vec<_>>>()?;
            write_tagged_file(output, &tagged, *format)
        }
        Command::Stats { source, target } => {
            let stats = compute_stats(&load_parallel(source, target)?);
            writeln!(out, "{stats}").map_err(stdout_err)
        }
        Command::Train(args) => train(cfg, args, out),
        Command::Translate {
            checkpoint,
            input,
            output,
            tags,
            beam_size,
            length_penalty,
            greedy,
        } => {
            let mut decode = cfg.decode;
            if let Some(b) = beam_size {
                decode.beam_size = *b;
            }
            if let Some(a) = length_penalty {
                decode.length_penalty = *a;
            }
            decode.validate()?;
            let records = checkpoint::read(checkpoint)?;
            let req = TranslateRequest {
                input,
                tags: tags.as_deref(),
                output,
                decode,
                greedy: *greedy,
            };
            match read_meta(&records)?.train.precision {
                DType::F32 => translate::<f32>(&records, checkpoint, &req),
                DType::F64 => translate::<f64>(&records, checkpoint, &req),
            }
        }
        Command::Score {
            candidate,
            reference,
        } => {
            let report = bleu_files(candidate, reference)?;
            writeln!(out, "{report}").map_err(stdout_err)
        }
    }
}

fn read_tokenized(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(tokenize).collect())
}

fn read_tokenized_nonempty(path: &Path) -> Result<Vec<Vec<String>>> {
    let sentences = read_tokenized(path)?;
    if let Some(i) = sentences.iter().position(Vec::is_empty) {
        return Err(Error::data(path, Some(i + 1), "empty line"));
    }
    Ok(sentences)
}

/// Tagged sentences aligned with `sentences`, read from a slash-format file.
fn read_tags_for(path: &Path, sentences: &[Vec<String>]) -> Result<Vec<TaggedSentence>> {
    let tagged = parse_tagged_file(path, TagFormat::Slash)?;
    if tagged.len() != sentences.len() {
        return Err(Error::data(
            path,
            None,
            format!(
                "{} tagged sentences for {} input lines",
                tagged.len(),
                sentences.len()
            ),
        ));
    }
    for (i, (t, s)) in tagged.iter().zip(sentences).enumerate() {
        if &t.tokens != s {
            return Err(Error::data(
                path,
                Some(i + 1),
                "tagged tokens differ from the input line",
            ));
        }
    }
    Ok(tagged)
}

fn tags_or_fallback(path: Option<&Path>, sentences: &[Vec<String>]) -> Result<Vec<TaggedSentence>> {
    match path {
        Some(p) => read_tags_for(p, sentences),
        None => sentences.iter().map(|s| fallback_tag(s)).collect(),
    }
}

struct Side {
    sources: Vec<TaggedSentence>,
    targets: Vec<Vec<String>>,
}

fn load_side(source: &Path, target: &Path, tags: Option<&Path>) -> Result<Side> {
    let pairs = load_parallel(source, target)?;
    let (src, targets): (Vec<_>, Vec<_>) = pairs
        .into_iter()
        .map(|p| (p.source_tokens, p.target_tokens))
        .unzip();
    Ok(Side {
        sources: tags_or_fallback(tags, &src)?,
        targets,
    })
}

/// Encode pairs, dropping (with a warning) those longer than the model's
/// position table.
fn encode_side(
    side: &Side,
    bpe: Option<&BpeModel>,
    vocabs: &Vocabs,
    max_positions: usize,
) -> Result<Vec<TrainingPair>> {
    let mut pairs = Vec::with_capacity(side.sources.len());
    for (i, (s, t)) in side.sources.iter().zip(&side.targets).enumerate() {
        let p = TrainingPair::encode(s, t, bpe, vocabs)?;
        if p.source.len() > max_positions || p.target_ids.len() + 1 > max_positions {
            log::warn!("pair {} exceeds {max_positions} positions, skipped", i + 1);
            continue;
        }
        pairs.push(p);
    }
    Ok(pairs)
}

fn required<'a>(
    flag: &'a Option<PathBuf>,
    file: &'a Option<PathBuf>,
    name: &str,
) -> Result<&'a Path> {
    flag.as_deref()
        .or(file.as_deref())
        .ok_or_else(|| Error::Config(format!("missing {name} (flag or [paths] entry)")))
}

fn train(mut cfg: RunConfig, args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(m) = args.mode {
        cfg.pos_aug.mode = m;
        if m == AugMode::Baseline && args.d_pos.is_none() {
            cfg.pos_aug.d_pos = 0;
        }
    }
    if let Some(d) = args.d_pos {
        cfg.pos_aug.d_pos = d;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = args.max_steps {
        cfg.train.max_steps = n;
    }
    let p = &cfg.paths;
    let train_source = required(&args.train_source, &p.train_source, "train_source")?;
    let train_target = required(&args.train_target, &p.train_target, "train_target")?;
    let train_tags = args.train_tags.as_deref().or(p.train_tags.as_deref());
    let valid_source = args.valid_source.as_deref().or(p.valid_source.as_deref());
    let valid_target = args.valid_target.as_deref().or(p.valid_target.as_deref());
    let valid_tags = args.valid_tags.as_deref().or(p.valid_tags.as_deref());
    let checkpoint_dir =
        required(&args.checkpoint_dir, &p.checkpoint_dir, "checkpoint_dir")?.to_path_buf();
    let metrics_path = args
        .metrics
        .clone()
        .or(p.metrics_log.clone())
        .unwrap_or_else(|| checkpoint_dir.join("metrics.tsv"));
    let bpe_path = args.bpe_model.as_deref().or(p.bpe_model.as_deref());

    let train_side = load_side(train_source, train_target, train_tags)?;
    let valid_side = match (valid_source, valid_target) {
        (Some(s), Some(t)) => Some(load_side(s, t, valid_tags)?),
        (None, None) => None,
        _ => {
            return Err(Error::Config(
                "valid_source and valid_target go together".into(),
            ))
        }
    };

    let precision = match &args.resume {
        Some(path) => read_meta(&checkpoint::read(path)?)?.train.precision,
        None => cfg.train.precision,
    };
    let job = TrainJob {
        cfg: &cfg,
        train: &train_side,
        valid: valid_side.as_ref(),
        bpe_path,
        resume: args.resume.as_deref(),
        max_steps: args.max_steps,
        checkpoint_dir: &checkpoint_dir,
        metrics_path: &metrics_path,
    };
    let summary = match precision {
        DType::F32 => run_training::<f32>(&job)?,
        DType::F64 => run_training::<f64>(&job)?,
    };
    let stdout_err = |e| Error::io("<stdout>", e);
    writeln!(out, "trained to step {}", summary.0).map_err(stdout_err)?;
    if let Some(best) = summary.1 {
        writeln!(out, "best checkpoint: {}", best.display()).map_err(stdout_err)?;
    }
    Ok(())
}

struct TrainJob<'a> {
    cfg: &'a RunConfig,
    train: &'a Side,
    valid: Option<&'a Side>,
    bpe_path: Option<&'a Path>,
    resume: Option<&'a Path>,
    max_steps: Option<u64>,
    checkpoint_dir: &'a Path,
    metrics_path: &'a Path,
}

fn run_training<T: Real>(job: &TrainJob<'_>) -> Result<(u64, Option<PathBuf>)> {
    let cfg = job.cfg;
    let mut trainer: Trainer<T> = match job.resume {
        Some(path) => {
            let mut t = Trainer::load(path)?;
            if let Some(n) = job.max_steps {
                t.train_cfg.max_steps = n;
            }
            t
        }
        None => {
            let bpe = job.bpe_path.map(bpe::deserialize_bpe).transpose()?;
            let vocabs = build_vocabs(&job.train.sources, &job.train.targets, bpe.as_ref());
            let mut model_cfg = cfg.model;
            model_cfg.source_vocab_size = vocabs.source.len();
            model_cfg.target_vocab_size = vocabs.target.len();
            model_cfg.tag_vocab_size = vocabs.tags.len();
            let model = Model::init(model_cfg, cfg.pos_aug, cfg.train.seed)?;
            Trainer::new(model, cfg.train, cfg.optimizer, vocabs, bpe)?
        }
    };
    let max_pos = trainer.model.config.max_positions;
    let train = encode_side(job.train, trainer.bpe.as_ref(), &trainer.vocabs, max_pos)?;
    if train.is_empty() {
        return Err(Error::data(
            job.cfg.paths.train_source.clone().unwrap_or_default(),
            None,
            "no usable training pairs",
        ));
    }
    let valid = match job.valid {
        Some(v) => encode_side(v, trainer.bpe.as_ref(), &trainer.vocabs, max_pos)?,
        None => Vec::new(),
    };
    fs::create_dir_all(job.checkpoint_dir).map_err(|e| Error::io(job.checkpoint_dir, e))?;
    let file = if job.resume.is_some() {
        OpenOptions::new()
            .append(true)
            .create(true)
            .open(job.metrics_path)
    } else {
        File::create(job.metrics_path)
    }
    .map_err(|e| Error::io(job.metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let summary = trainer.run(&train, &valid, job.checkpoint_dir, &mut metrics)?;
    Ok((summary.final_step, summary.best_checkpoint))
}

struct TranslateRequest<'a> {
    input: &'a Path,
    tags: Option<&'a Path>,
    output: &'a Path,
    decode: crate::decode::DecodeConfig,
    greedy: bool,
}

fn translate<T: Real>(
    records: &[checkpoint::Record],
    path: &Path,
    req: &TranslateRequest<'_>,
) -> Result<()> {
    let trainer = Trainer::<T>::from_records(records, path)?;
    let sentences = read_tokenized_nonempty(req.input)?;
    let tagged = tags_or_fallback(req.tags, &sentences)?;
    let mut text = String::new();
    for (i, s) in tagged.iter().enumerate() {
        let source = encode_source(s, trainer.bpe.as_ref(), &trainer.vocabs)?;
        if source.len() > trainer.model.config.max_positions {
            return Err(Error::data(
                req.input,
                Some(i + 1),
                format!(
                    "sentence longer than {} units",
                    trainer.model.config.max_positions
                ),
            ));
        }
        let hyp = if req.greedy {
            greedy(&trainer.model, &source, &req.decode)?
        } else {
            beam_search(&trainer.model, &source, &req.decode)?
        };
        let units = trainer.vocabs.target.decode(hyp.content());
        text.push_str(&merge_subwords(&units).join(" "));
        text.push('\n');
    }
    fs::write(req.output, text).map_err(|e| Error::io(req.output, e))
}

#![allow(dead_code)]

use posnmt::model::{Model, ModelConfig};
use posnmt::pos_aug::{AugMode, PosAugConfig};
use posnmt::tagging::{fallback_tag, PosTag, TaggedSentence};
use posnmt::tensor::{Real, Rng};
use posnmt::train::{build_vocabs, OptimizerConfig, TrainConfig, Trainer, TrainingPair, Vocabs};

pub const COPY_WORDS: &[&str] = &[
    "the", "report", "running", "tabled", "quickly", "papers", "of", "it", "2021", "budget",
];

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

/// `n` random sequences of 3–8 words; target = source.
pub fn copy_corpus(n: usize, seed: u64) -> (Vec<TaggedSentence>, Vec<Vec<String>>) {
    let mut rng = Rng::new(seed);
    let mut sources = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..n {
        let len = 3 + rng.below(6);
        let words: Vec<String> = (0..len)
            .map(|_| COPY_WORDS[rng.below(COPY_WORDS.len())].to_owned())
            .collect();
        sources.push(fallback_tag(&words).unwrap());
        targets.push(words);
    }
    (sources, targets)
}

pub const CONTEXT_WORDS: &[&str] = &[
    "please", "we", "can", "now", "today", "soon", "also", "then",
];

/// Sentences with the ambiguous word "book" tagged VB or NN at a random
/// position among context words. The target is a single token naming the tag.
/// Each context appears once with each tag.
pub fn pos_signal_corpus(contexts: usize, seed: u64) -> (Vec<TaggedSentence>, Vec<Vec<String>>) {
    let mut rng = Rng::new(seed);
    let mut sources = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..contexts {
        let len = 2 + rng.below(3);
        let mut words: Vec<String> = (0..len)
            .map(|_| CONTEXT_WORDS[rng.below(CONTEXT_WORDS.len())].to_owned())
            .collect();
        let at = rng.below(len + 1);
        words.insert(at, "book".to_owned());
        for (tag, out) in [(PosTag::Vb, "reserve"), (PosTag::Nn, "volume")] {
            let mut tagged = fallback_tag(&words).unwrap();
            tagged.tags[at] = tag;
            sources.push(tagged);
            targets.push(vec![out.to_owned()]);
        }
    }
    (sources, targets)
}

pub fn desk_model_config(vocabs: &Vocabs) -> ModelConfig {
    ModelConfig {
        source_vocab_size: vocabs.source.len(),
        target_vocab_size: vocabs.target.len(),
        tag_vocab_size: vocabs.tags.len(),
        ..ModelConfig::desk()
    }
}

pub fn aug_for(mode: AugMode, d_model: usize) -> PosAugConfig {
    PosAugConfig::with_default_width(mode, d_model)
}

pub fn encode_all(
    sources: &[TaggedSentence],
    targets: &[Vec<String>],
    vocabs: &Vocabs,
) -> Vec<TrainingPair> {
    sources
        .iter()
        .zip(targets)
        .map(|(s, t)| TrainingPair::encode(s, t, None, vocabs).unwrap())
        .collect()
}

/// Desk-scale trainer over word-level units.
pub fn desk_trainer<T: Real>(
    sources: &[TaggedSentence],
    targets: &[Vec<String>],
    aug: PosAugConfig,
    train_cfg: TrainConfig,
) -> (Trainer<T>, Vec<TrainingPair>) {
    let vocabs = build_vocabs(sources, targets, None);
    let cfg = desk_model_config(&vocabs);
    let model = Model::init(cfg, aug, train_cfg.seed).unwrap();
    let pairs = encode_all(sources, targets, &vocabs);
    let trainer = Trainer::new(model, train_cfg, OptimizerConfig::default(), vocabs, None).unwrap();
    (trainer, pairs)
}

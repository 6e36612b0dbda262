//! Byte pair encoding: learning, segmentation, and propagation of each word's
//! POS tag to all of its subword units.
//!
//! Non-final units of a word carry the `@@` continuation marker, so
//! `["n@@", "e@@", "w@@", "est"]` is the single word `newest`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tagging::{PosTag, TagVocabulary, TaggedSentence};
use crate::vocab::{self, Vocabulary};

pub const CONTINUATION_MARKER: &str = "@@";
const HEADER: &str = "#bpe v1";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    vocab: BTreeSet<String>,
}

impl BpeModel {
    /// Model from an ordered merge list; the vocabulary is every symbol
    /// mentioned by or produced from the merges.
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let mut vocab = BTreeSet::new();
        for (l, r) in &merges {
            vocab.insert(l.clone());
            vocab.insert(r.clone());
            vocab.insert(format!("{l}{r}"));
        }
        Self { merges, vocab }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab(&self) -> &BTreeSet<String> {
        &self.vocab
    }

    fn ranks(&self) -> HashMap<(&str, &str), usize> {
        self.merges
            .iter()
            .enumerate()
            .map(|(i, (l, r))| ((l.as_str(), r.as_str()), i))
            .collect()
    }
}

/// Token type counts over whitespace-tokenized sentences.
pub fn token_frequencies<'a, I, S>(sentences: I) -> BTreeMap<String, usize>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut freq = BTreeMap::new();
    for s in sentences {
        for t in s {
            *freq.entry(t.as_ref().to_owned()).or_insert(0) += 1;
        }
    }
    freq
}

/// Learn up to `num_merges` merges. Each round merges the most frequent
/// adjacent symbol pair inside words (ties: lexicographically smallest pair),
/// stopping early once no pair occurs at least twice.
pub fn learn_bpe(corpus: &BTreeMap<String, usize>, num_merges: usize) -> Result<BpeModel> {
    if corpus.is_empty() {
        return Err(Error::invalid("learn_bpe: empty corpus"));
    }
    let mut words: Vec<(Vec<String>, usize)> = corpus
        .iter()
        .map(|(w, &f)| (w.chars().map(String::from).collect(), f))
        .collect();
    let mut vocab: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    let mut merges = Vec::new();

    while merges.len() < num_merges {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, f) in &words {
            for p in syms.windows(2) {
                *counts.entry((p[0].as_str(), p[1].as_str())).or_insert(0) += f;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((l, r), count)) = best else { break };
        if count < 2 {
            break;
        }
        let pair = (l.to_owned(), r.to_owned());
        log::debug!("merge {}: {} {} ({count})", merges.len(), pair.0, pair.1);
        for (syms, _) in &mut words {
            merge_pair(syms, &pair.0, &pair.1);
        }
        vocab.insert(format!("{}{}", pair.0, pair.1));
        merges.push(pair);
    }
    Ok(BpeModel { merges, vocab })
}

fn merge_pair(syms: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == left && syms[i + 1] == right {
            let r = syms.remove(i + 1);
            syms[i].push_str(&r);
        }
        i += 1;
    }
}

fn segment_word(word: &str, ranks: &HashMap<(&str, &str), usize>) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(String::from).collect();
    loop {
        let best = syms
            .windows(2)
            .filter_map(|p| ranks.get(&(p[0].as_str(), p[1].as_str())).map(|&r| (r, p)))
            .min_by_key(|(r, _)| *r)
            .map(|(_, p)| (p[0].clone(), p[1].clone()));
        match best {
            Some((l, r)) => merge_pair(&mut syms, &l, &r),
            None => return syms,
        }
    }
}

/// Subword units of a sentence with, for each unit, the index of its word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub units: Vec<String>,
    pub word_index: Vec<usize>,
}

/// Segment each token independently by replaying the learned merges in order.
/// Characters never seen in training pass through as single units.
pub fn apply_bpe<S: AsRef<str>>(tokens: &[S], model: &BpeModel) -> Segmentation {
    let ranks = model.ranks();
    let mut seg = Segmentation {
        units: Vec::new(),
        word_index: Vec::new(),
    };
    for (wi, tok) in tokens.iter().enumerate() {
        let pieces = segment_word(tok.as_ref(), &ranks);
        let last = pieces.len().saturating_sub(1);
        for (k, mut p) in pieces.into_iter().enumerate() {
            if k < last {
                p.push_str(CONTINUATION_MARKER);
            }
            seg.units.push(p);
            seg.word_index.push(wi);
        }
    }
    seg
}

/// Join `@@`-marked units with their successors. A dangling marker on the
/// final unit is stripped with a warning.
pub fn merge_subwords<S: AsRef<str>>(units: &[S]) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut open = false;
    for u in units {
        let u = u.as_ref();
        match u.strip_suffix(CONTINUATION_MARKER) {
            Some(stem) => {
                cur.push_str(stem);
                open = true;
            }
            None => {
                cur.push_str(u);
                out.push(std::mem::take(&mut cur));
                open = false;
            }
        }
    }
    if open {
        log::warn!("trailing {CONTINUATION_MARKER} at sentence end");
        out.push(cur);
    }
    out
}

/// Recover word indices from continuation markers.
pub fn word_index_from_markers<S: AsRef<str>>(units: &[S]) -> Vec<usize> {
    let mut wi = 0;
    units
        .iter()
        .map(|u| {
            let cur = wi;
            if !u.as_ref().ends_with(CONTINUATION_MARKER) {
                wi += 1;
            }
            cur
        })
        .collect()
}

/// A source sentence ready for the encoder: subword ids with an aligned,
/// equal-length POS tag id sequence, terminated by EOS / EOS_T.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactoredSequence {
    pub units: Vec<String>,
    pub unit_ids: Vec<usize>,
    pub tag_ids: Vec<usize>,
    pub word_index: Vec<usize>,
}

impl FactoredSequence {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

/// Give every unit the tag of the word it came from and append EOS.
pub fn propagate_tags(
    seg: &Segmentation,
    tagged: &TaggedSentence,
    tag_vocab: &TagVocabulary,
    unit_vocab: &Vocabulary,
) -> Result<FactoredSequence> {
    let n_words = tagged.tokens.len();
    if seg.units.len() != seg.word_index.len() {
        return Err(Error::invalid(format!(
            "alignment: {} units but {} word indices",
            seg.units.len(),
            seg.word_index.len()
        )));
    }
    if let Some(&bad) = seg.word_index.iter().find(|&&w| w >= n_words) {
        return Err(Error::invalid(format!(
            "alignment: word index {bad} out of range for {n_words} words"
        )));
    }
    let covered: BTreeSet<usize> = seg.word_index.iter().copied().collect();
    if covered.len() != n_words || seg.word_index.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid(format!(
            "alignment: word indices do not cover 0..{n_words} in order"
        )));
    }
    let mut out = FactoredSequence {
        units: seg.units.clone(),
        unit_ids: unit_vocab.encode(&seg.units),
        tag_ids: seg
            .word_index
            .iter()
            .map(|&w| tag_vocab.id(tagged.tags[w]))
            .collect(),
        word_index: seg.word_index.clone(),
    };
    out.units.push(vocab::EOS.to_owned());
    out.unit_ids.push(Vocabulary::EOS_ID);
    out.tag_ids.push(TagVocabulary::EOS);
    out.word_index.push(n_words);
    Ok(out)
}

/// Factored sequence from a line of the factored corpus format (`unit_TAG`),
/// where the tagged "tokens" are already subword units.
pub fn factored_from_units(
    tagged_units: &TaggedSentence,
    tag_vocab: &TagVocabulary,
    unit_vocab: &Vocabulary,
) -> Result<FactoredSequence> {
    let word_index = word_index_from_markers(&tagged_units.tokens);
    let n_words = word_index.last().map_or(0, |&w| w + 1);
    let mut word_tags: Vec<Option<PosTag>> = vec![None; n_words];
    for (&w, &t) in word_index.iter().zip(&tagged_units.tags) {
        match word_tags[w] {
            Some(prev) if prev != t => {
                return Err(Error::invalid(format!(
                    "units of word {w} carry different tags {prev} and {t}"
                )))
            }
            _ => word_tags[w] = Some(t),
        }
    }
    let words = merge_subwords(&tagged_units.tokens);
    let tagged_words =
        TaggedSentence::new(words, word_tags.into_iter().map(|t| t.unwrap()).collect())?;
    let seg = Segmentation {
        units: tagged_units.tokens.clone(),
        word_index,
    };
    propagate_tags(&seg, &tagged_words, tag_vocab, unit_vocab)
}

/// Tagged units in the factored corpus format: each unit carries its word's tag.
pub fn tagged_units(seg: &Segmentation, tagged: &TaggedSentence) -> Result<TaggedSentence> {
    let tags =
        seg.word_index
            .iter()
            .map(|&w| {
                tagged.tags.get(w).copied().ok_or_else(|| {
                    Error::invalid(format!("alignment: word index {w} out of range"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
    TaggedSentence::new(seg.units.clone(), tags)
}

pub fn serialize_bpe(model: &BpeModel, path: &Path) -> Result<()> {
    fs::write(path, to_text(model)).map_err(|e| Error::io(path, e))
}

pub fn to_text(model: &BpeModel) -> String {
    let mut s = format!("{HEADER}\n");
    for (l, r) in &model.merges {
        s.push_str(l);
        s.push(' ');
        s.push_str(r);
        s.push('\n');
    }
    s
}

pub fn deserialize_bpe(path: &Path) -> Result<BpeModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text, path)
}

pub fn from_text(text: &str, path: &Path) -> Result<BpeModel> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::data(path, Some(1), "unrecognized BPE file"));
    }
    let mut merges = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                merges.push((l.to_owned(), r.to_owned()))
            }
            _ => {
                return Err(Error::data(
                    path,
                    Some(i + 2),
                    format!("bad merge line {line:?}"),
                ))
            }
        }
    }
    Ok(BpeModel::from_merges(merges))
}

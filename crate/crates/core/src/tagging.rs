//! Penn Treebank tagset, tagged-file readers/writers, a rule-based fallback
//! tagger and the tag ↔ id vocabulary used by the POS embedding table.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! tagset {
    ($($variant:ident => $label:literal),* $(,)?) => {
        /// A Penn Treebank tag, or one of the reserved sequence-assembly tags.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum PosTag {
            $($variant),*
        }

        impl PosTag {
            pub const ALL: &'static [PosTag] = &[$(PosTag::$variant),*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(PosTag::$variant => $label),*
                }
            }
        }

        impl FromStr for PosTag {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($label => Ok(PosTag::$variant),)*
                    _ => Err(Error::invalid(format!("unknown POS tag {s:?}"))),
                }
            }
        }
    };
}

tagset! {
    Cc => "CC", Cd => "CD", Dt => "DT", Ex => "EX", Fw => "FW", In => "IN",
    Jj => "JJ", Jjr => "JJR", Jjs => "JJS", Ls => "LS", Md => "MD", Nn => "NN",
    Nns => "NNS", Nnp => "NNP", Nnps => "NNPS", Pdt => "PDT", Pos => "POS",
    Prp => "PRP", PrpS => "PRP$", Rb => "RB", Rbr => "RBR", Rbs => "RBS",
    Rp => "RP", Sym => "SYM", To => "TO", Uh => "UH", Vb => "VB", Vbd => "VBD",
    Vbg => "VBG", Vbn => "VBN", Vbp => "VBP", Vbz => "VBZ", Wdt => "WDT",
    Wp => "WP", WpS => "WP$", Wrb => "WRB",
    Hash => "#", Dollar => "$", CloseQuote => "''", OpenQuote => "``",
    Comma => ",", Period => ".", Colon => ":", Lrb => "-LRB-", Rrb => "-RRB-",
    LParen => "(", RParen => ")",
    PadT => "PAD_T", UnkT => "UNK_T", EosT => "EOS_T",
}

impl PosTag {
    pub fn is_reserved(self) -> bool {
        matches!(self, PosTag::PadT | PosTag::UnkT | PosTag::EosT)
    }

    /// Parse a tag read from a tagged corpus. Unknown labels and the reserved
    /// labels (which taggers never emit) become `UNK_T`.
    fn from_corpus(label: &str, path: &Path, line: usize) -> PosTag {
        match label.parse::<PosTag>() {
            Ok(t) if !t.is_reserved() => t,
            _ => {
                log::warn!(
                    "{}:{line}: unknown POS tag {label:?}, using UNK_T",
                    path.display()
                );
                PosTag::UnkT
            }
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<PosTag>,
}

impl TaggedSentence {
    pub fn new(tokens: Vec<String>, tags: Vec<PosTag>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("tagged sentence has no tokens"));
        }
        if tokens.len() != tags.len() {
            return Err(Error::invalid(format!(
                "{} tokens but {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        Ok(Self { tokens, tags })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `word_TAG word_TAG ...`
    pub fn to_slash(&self) -> String {
        self.tokens
            .iter()
            .zip(&self.tags)
            .map(|(w, t)| format!("{w}_{t}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagFormat {
    Slash,
    Tsv,
}

impl FromStr for TagFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slash" => Ok(TagFormat::Slash),
            "tsv" => Ok(TagFormat::Tsv),
            _ => Err(Error::invalid(format!(
                "unknown tag format {s:?} (slash|tsv)"
            ))),
        }
    }
}

pub fn parse_tagged_file(path: &Path, format: TagFormat) -> Result<Vec<TaggedSentence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tagged_str(&text, format, path)
}

/// Parse tagged text. `path` is used only in diagnostics.
pub fn parse_tagged_str(text: &str, format: TagFormat, path: &Path) -> Result<Vec<TaggedSentence>> {
    match format {
        TagFormat::Slash => text
            .lines()
            .enumerate()
            .map(|(i, l)| parse_slash_line(l, path, i + 1))
            .collect(),
        TagFormat::Tsv => parse_tsv(text, path),
    }
}

fn parse_slash_line(line: &str, path: &Path, lineno: usize) -> Result<TaggedSentence> {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for item in line.split_whitespace() {
        let (word, tag) = item
            .rsplit_once('_')
            .filter(|(w, t)| !w.is_empty() && !t.is_empty())
            .ok_or_else(|| {
                Error::data(
                    path,
                    Some(lineno),
                    format!("token {item:?} has no _TAG separator"),
                )
            })?;
        tokens.push(word.to_owned());
        tags.push(PosTag::from_corpus(tag, path, lineno));
    }
    if tokens.is_empty() {
        return Err(Error::data(path, Some(lineno), "empty line"));
    }
    Ok(TaggedSentence { tokens, tags })
}

fn parse_tsv(text: &str, path: &Path) -> Result<Vec<TaggedSentence>> {
    let mut out = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    loop {
        while lines.peek().is_some_and(|(_, l)| l.trim().is_empty()) {
            lines.next();
        }
        let Some((i, tok_line)) = lines.next() else {
            break;
        };
        let lineno = i + 1;
        let Some((_, tag_line)) = lines.next() else {
            return Err(Error::data(
                path,
                Some(lineno),
                "token line without tag line",
            ));
        };
        let tokens: Vec<String> = tok_line.split('\t').map(str::to_owned).collect();
        let tags: Vec<PosTag> = tag_line
            .split('\t')
            .map(|t| PosTag::from_corpus(t, path, lineno + 1))
            .collect();
        if tokens.len() != tags.len() {
            return Err(Error::data(
                path,
                Some(lineno),
                format!("{} tokens but {} tags", tokens.len(), tags.len()),
            ));
        }
        out.push(TaggedSentence { tokens, tags });
    }
    Ok(out)
}

pub fn write_tagged_file(
    path: &Path,
    sentences: &[TaggedSentence],
    format: TagFormat,
) -> Result<()> {
    let text = match format {
        TagFormat::Slash => sentences
            .iter()
            .map(|s| s.to_slash() + "\n")
            .collect::<String>(),
        TagFormat::Tsv => sentences
            .iter()
            .map(|s| {
                let tags: Vec<&str> = s.tags.iter().map(|t| t.as_str()).collect();
                format!("{}\n{}\n", s.tokens.join("\t"), tags.join("\t"))
            })
            .collect::<Vec<_>>()
            .join("\n"),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "each", "every", "some", "any", "no",
];
const PREPOSITIONS: &[&str] = &[
    "about", "above", "after", "against", "among", "at", "before", "between", "by", "during",
    "for", "from", "in", "into", "of", "on", "over", "through", "under", "upon", "with", "within",
    "without",
];
const PRONOUNS: &[&str] = &[
    "i", "you", "he", "she", "it", "we", "they", "me", "him", "her", "us", "them",
];
const SUFFIXES: &[(&str, PosTag)] = &[
    ("ing", PosTag::Vbg),
    ("ed", PosTag::Vbd),
    ("ly", PosTag::Rb),
    ("s", PosTag::Nns),
];

fn fallback_tag_one(token: &str) -> PosTag {
    let lower = token.to_lowercase();
    let w = lower.as_str();
    if DETERMINERS.contains(&w) {
        return PosTag::Dt;
    }
    if PREPOSITIONS.contains(&w) {
        return PosTag::In;
    }
    if PRONOUNS.contains(&w) {
        return PosTag::Prp;
    }
    let mut parts = w.split(['.', ',', '/', '-']);
    if parts.all(|p| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit())) {
        return PosTag::Cd;
    }
    for &(suffix, tag) in SUFFIXES {
        // require a stem of at least two characters
        if let Some(stem) = w.strip_suffix(suffix) {
            if stem.chars().count() >= 2 {
                return tag;
            }
        }
    }
    PosTag::Nn
}

/// Deterministic rule cascade: closed-class lexicon (DT, IN, PRP), digit
/// pattern (CD), suffixes (-ing VBG, -ed VBD, -ly RB, -s NNS), else NN.
pub fn fallback_tag(tokens: &[String]) -> Result<TaggedSentence> {
    let tags = tokens.iter().map(|t| fallback_tag_one(t)).collect();
    TaggedSentence::new(tokens.to_vec(), tags)
}

/// Bijective tag ↔ id map with PAD_T = 0, UNK_T = 1, EOS_T = 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagVocabulary {
    tags: Vec<PosTag>,
    ids: HashMap<PosTag, usize>,
}

impl TagVocabulary {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const EOS: usize = 2;

    pub fn reserved() -> Self {
        Self::from_tags([PosTag::PadT, PosTag::UnkT, PosTag::EosT])
    }

    fn from_tags(tags: impl IntoIterator<Item = PosTag>) -> Self {
        let mut v = Self {
            tags: Vec::new(),
            ids: HashMap::new(),
        };
        for t in tags {
            v.insert(t);
        }
        v
    }

    fn insert(&mut self, tag: PosTag) -> usize {
        if let Some(&id) = self.ids.get(&tag) {
            return id;
        }
        self.tags.push(tag);
        self.ids.insert(tag, self.tags.len() - 1);
        self.tags.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Id of `tag`, or UNK_T's id when the tag was never observed.
    pub fn id(&self, tag: PosTag) -> usize {
        self.ids.get(&tag).copied().unwrap_or(Self::UNK)
    }

    pub fn tag(&self, id: usize) -> Option<PosTag> {
        self.tags.get(id).copied()
    }

    pub fn tags(&self) -> &[PosTag] {
        &self.tags
    }

    /// One label per line, in id order.
    pub fn to_text(&self) -> String {
        self.tags.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tags = text
            .lines()
            .map(str::parse::<PosTag>)
            .collect::<Result<Vec<_>>>()?;
        if tags.get(..3) != Some(&[PosTag::PadT, PosTag::UnkT, PosTag::EosT][..]) {
            return Err(Error::invalid(
                "tag vocabulary must start with PAD_T, UNK_T, EOS_T",
            ));
        }
        let v = Self::from_tags(tags.iter().copied());
        if v.len() != tags.len() {
            return Err(Error::invalid("duplicate tag in tag vocabulary"));
        }
        Ok(v)
    }
}

/// Reserved tags first, then observed tags in order of first occurrence.
pub fn build_tag_vocab(corpus: &[TaggedSentence]) -> TagVocabulary {
    let mut v = TagVocabulary::reserved();
    for s in corpus {
        for &t in &s.tags {
            v.insert(t);
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn tagset_size() {
        let word_tags = PosTag::ALL
            .iter()
            .filter(|t| {
                t.as_str().chars().next().unwrap().is_ascii_alphabetic() && !t.is_reserved()
            })
            .count();
        assert_eq!(word_tags, 36);
        for &t in PosTag::ALL {
            assert_eq!(t.as_str().parse::<PosTag>().unwrap(), t);
        }
    }

    #[test]
    fn slash_line() {
        let s = parse_tagged_str(
            "book_VB the_DT flight_NN\n",
            TagFormat::Slash,
            Path::new("x"),
        )
        .unwrap();
        assert_eq!(s[0].tokens, toks("book the flight"));
        assert_eq!(s[0].tags, [PosTag::Vb, PosTag::Dt, PosTag::Nn]);
    }

    #[test]
    fn slash_last_underscore_and_unknown() {
        let s =
            parse_tagged_str("snake_case_NN hello_ZZZ", TagFormat::Slash, Path::new("x")).unwrap();
        assert_eq!(s[0].tokens, toks("snake_case hello"));
        assert_eq!(s[0].tags, [PosTag::Nn, PosTag::UnkT]);
    }

    #[test]
    fn slash_missing_separator() {
        let err = parse_tagged_str("ok_NN\nbad token_NN", TagFormat::Slash, Path::new("f.txt"))
            .unwrap_err()
            .to_string();
        assert!(err.starts_with("f.txt:2:"), "{err}");
    }

    #[test]
    fn empty_file() {
        assert!(parse_tagged_str("", TagFormat::Slash, Path::new("x"))
            .unwrap()
            .is_empty());
        assert!(parse_tagged_str("", TagFormat::Tsv, Path::new("x"))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn tsv_format() {
        let text = "the\treport\nDT\tNN\n\nit\tran\nPRP\tVBD\n";
        let s = parse_tagged_str(text, TagFormat::Tsv, Path::new("x")).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].tags, [PosTag::Prp, PosTag::Vbd]);
        let bad = "a\tb\nDT\n";
        assert!(parse_tagged_str(bad, TagFormat::Tsv, Path::new("x")).is_err());
    }

    #[test]
    fn fallback_examples() {
        assert_eq!(
            fallback_tag(&toks("the report")).unwrap().tags,
            [PosTag::Dt, PosTag::Nn]
        );
        assert_eq!(fallback_tag(&toks("running")).unwrap().tags, [PosTag::Vbg]);
        assert_eq!(fallback_tag(&toks("2021")).unwrap().tags, [PosTag::Cd]);
        assert_eq!(
            fallback_tag(&toks("They quickly tabled reports in 2021-03"))
                .unwrap()
                .tags,
            [
                PosTag::Prp,
                PosTag::Rb,
                PosTag::Vbd,
                PosTag::Nns,
                PosTag::In,
                PosTag::Cd
            ]
        );
        assert!(fallback_tag(&[]).is_err());
    }

    #[test]
    fn vocab_enumeration() {
        let corpus =
            vec![TaggedSentence::new(toks("the report"), vec![PosTag::Dt, PosTag::Nn]).unwrap()];
        let v = build_tag_vocab(&corpus);
        assert_eq!(v.id(PosTag::Dt), 3);
        assert_eq!(v.id(PosTag::Nn), 4);
        assert_eq!(v.id(PosTag::Vb), TagVocabulary::UNK);
        assert_eq!(build_tag_vocab(&corpus), v);
        assert_eq!(build_tag_vocab(&[]).len(), 3);
        assert_eq!(TagVocabulary::from_text(&v.to_text()).unwrap(), v);
    }

    fn arb_sentence() -> impl Strategy<Value = TaggedSentence> {
        let known: Vec<PosTag> = PosTag::ALL
            .iter()
            .copied()
            .filter(|t| !t.is_reserved())
            .collect();
        prop::collection::vec(("[a-z_]{0,4}[a-z]", prop::sample::select(known)), 1..10).prop_map(
            |v| {
                let (tokens, tags) = v.into_iter().unzip();
                TaggedSentence { tokens, tags }
            },
        )
    }

    proptest! {
        #[test]
        fn slash_round_trip(sents in prop::collection::vec(arb_sentence(), 0..10)) {
            let text: String = sents.iter().map(|s| s.to_slash() + "\n").collect();
            let back = parse_tagged_str(&text, TagFormat::Slash, Path::new("x")).unwrap();
            prop_assert_eq!(back, sents);
        }

        #[test]
        fn fallback_aligned_and_pure(words in prop::collection::vec("[A-Za-z0-9.-]{1,8}", 1..12)) {
            let a = fallback_tag(&words).unwrap();
            prop_assert_eq!(a.tokens.len(), a.tags.len());
            prop_assert_eq!(fallback_tag(&words).unwrap(), a);
        }
    }
}

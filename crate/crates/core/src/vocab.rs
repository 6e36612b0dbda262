use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "</s>";
pub const BOS: &str = "<s>";

/// Subword-unit vocabulary for one language side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    units: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const EOS_ID: usize = 2;
    pub const BOS_ID: usize = 3;

    pub fn with_specials() -> Self {
        let mut v = Self {
            units: Vec::new(),
            ids: HashMap::new(),
        };
        for s in [PAD, UNK, EOS, BOS] {
            v.insert(s);
        }
        v
    }

    /// Specials first, then units in order of first occurrence.
    pub fn build<'a, I, S>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut v = Self::with_specials();
        for s in sentences {
            for u in s {
                v.insert(u.as_ref());
            }
        }
        v
    }

    pub fn insert(&mut self, unit: &str) -> usize {
        if let Some(&id) = self.ids.get(unit) {
            return id;
        }
        self.units.push(unit.to_owned());
        self.ids.insert(unit.to_owned(), self.units.len() - 1);
        self.units.len() - 1
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn id(&self, unit: &str) -> usize {
        self.ids.get(unit).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn unit(&self, id: usize) -> &str {
        self.units.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn encode<S: AsRef<str>>(&self, units: &[S]) -> Vec<usize> {
        units.iter().map(|u| self.id(u.as_ref())).collect()
    }

    /// Units for `ids`, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != Self::EOS_ID)
            .filter(|&&i| i != Self::PAD_ID && i != Self::BOS_ID)
            .map(|&i| self.unit(i).to_owned())
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.units.iter().map(|u| format!("{u}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let units: Vec<&str> = text.lines().collect();
        if units.get(..4) != Some(&[PAD, UNK, EOS, BOS][..]) {
            return Err(Error::invalid(
                "vocabulary must start with <pad> <unk> </s> <s>",
            ));
        }
        let mut v = Self::with_specials();
        for u in &units[4..] {
            v.insert(u);
        }
        if v.len() != units.len() {
            return Err(Error::invalid("duplicate unit in vocabulary"));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_and_round_trip() {
        let sents = [vec!["a", "b@@", "c"], vec!["c", "d"]];
        let v = Vocabulary::build(sents.iter().map(|s| s.as_slice()));
        assert_eq!(v.len(), 8);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("zzz"), Vocabulary::UNK_ID);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert_eq!(v.decode(&[3, 4, 5, 2, 6]), ["a", "b@@"]);
    }
}

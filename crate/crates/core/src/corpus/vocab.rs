use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{CorpusError, UserCorpus};

pub const PAD: usize = 0;
pub const INSEP: usize = 1;
pub const UNK: usize = 2;

pub const PAD_TOKEN: &str = "<|pad|>";
pub const INSEP_TOKEN: &str = "<|insep|>";
pub const UNK_TOKEN: &str = "<|unk|>";

/// Whitespace word-level vocabulary. Ids 0, 1, 2 are PAD, INSEP and UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Vocabulary holding the reserved tokens followed by `words` in order.
    /// Duplicates and words colliding with reserved tokens are skipped.
    pub fn from_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in [PAD_TOKEN, INSEP_TOKEN, UNK_TOKEN] {
            v.push(t);
        }
        for w in words {
            v.push(w.as_ref());
        }
        v
    }

    fn push(&mut self, t: &str) {
        if !self.ids.contains_key(t) {
            self.ids.insert(t.to_string(), self.tokens.len());
            self.tokens.push(t.to_string());
        }
    }

    /// Builds from corpus word counts: words seen at least `min_count`
    /// times, most frequent first, ties broken lexicographically.
    pub fn build(corpus: &UserCorpus, min_count: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for u in &corpus.users {
            for m in &u.messages {
                for w in m.text.split_whitespace() {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_words(words.into_iter().map(|(w, _)| w))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Stable fingerprint of the token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([b'\n']);
        }
        h.finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let lines: Vec<&str> = text.lines().collect();
        for (i, expect) in [PAD_TOKEN, INSEP_TOKEN, UNK_TOKEN].iter().enumerate() {
            if lines.get(i) != Some(expect) {
                return Err(CorpusError::Malformed {
                    line: i + 1,
                    reason: format!("vocabulary line {} must be `{expect}`", i + 1),
                });
            }
        }
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for (i, l) in lines.iter().enumerate() {
            if l.is_empty() || l.chars().any(char::is_whitespace) {
                return Err(CorpusError::Malformed {
                    line: i + 1,
                    reason: "token must be non-empty without whitespace".into(),
                });
            }
            if v.ids.contains_key(*l) {
                return Err(CorpusError::Malformed {
                    line: i + 1,
                    reason: format!("duplicate token `{l}`"),
                });
            }
            v.push(l);
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_stable() {
        let v = Vocabulary::from_words(["a", "b", PAD_TOKEN]);
        assert_eq!(v.id(PAD_TOKEN), PAD);
        assert_eq!(v.id(INSEP_TOKEN), INSEP);
        assert_eq!(v.id(UNK_TOKEN), UNK);
        assert_eq!(v.len(), 5);
        let back = Vocabulary::parse(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocabulary::from_words(["hello"]);
        assert_eq!(v.encode("hello there"), vec![3, UNK]);
    }

    #[test]
    fn build_orders_by_frequency() {
        let (c, _) = UserCorpus::parse_tsv("u\t1\tb a b\nu\t2\tc\n").unwrap();
        let v = Vocabulary::build(&c, 1);
        assert_eq!(&v.tokens()[3..], ["b", "a", "c"]);
        assert_eq!(Vocabulary::build(&c, 2).len(), 4);
    }

    #[test]
    fn parse_requires_reserved_header() {
        assert!(Vocabulary::parse("a\nb\nc\n").is_err());
    }
}

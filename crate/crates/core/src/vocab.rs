//! Whitespace vocabulary with reserved special ids.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials first, then tokens with at least `min_count` occurrences,
    /// most frequent first, ties broken lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(w, c)| c >= min_count.max(1) && !SPECIALS.contains(&w))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Self::from_tokens(tokens).expect("specials are distinct")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Schema(format!("vocabulary must start with {SPECIALS:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(Error::UnknownTokenId(id))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Joins non-special tokens with single spaces; stops at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            let t = self.token(id)?;
            if id != PAD && id != BOS {
                words.push(t);
            }
        }
        Ok(words.join(" "))
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Vocabulary::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_and_specials() {
        let v = Vocabulary::build(["b a b", "c b a"], 1);
        assert_eq!(v.tokens(), ["<pad>", "<bos>", "<eos>", "<unk>", "b", "a", "c"]);
        assert_eq!(v.encode("a zz c"), vec![5, UNK, 6]);
        assert_eq!(v.decode(&[BOS, 4, 5, EOS, 6]).unwrap(), "b a");
        assert!(matches!(v.decode(&[99]), Err(Error::UnknownTokenId(99))));
    }

    #[test]
    fn min_count_filters() {
        let v = Vocabulary::build(["x x y"], 2);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("y"), UNK);
    }

    #[test]
    fn serde_roundtrip_and_validation() {
        let v = Vocabulary::build(["hello world"], 1);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocabulary>(r#"["<pad>","<bos>"]"#).is_err());
        assert!(serde_json::from_str::<Vocabulary>(r#"["<pad>","<bos>","<eos>","<unk>","a","a"]"#).is_err());
    }
}

//! Reserved token ids and a frequency-ordered vocabulary.

use std::collections::HashMap;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Out-of-vocabulary marker for text corpora.
pub const UNK: usize = 3;
/// Target-side filler emitted by the lagged-map task past the source end.
pub const FILLER: usize = 3;
pub const RESERVED: usize = 4;

const RESERVED_NAMES: [&str; RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from word counts: most frequent first, ties broken lexically.
    pub fn from_counts(counts: &HashMap<String, usize>) -> Self {
        let mut entries: Vec<(&String, &usize)> = counts
            .iter()
            .filter(|(w, _)| !RESERVED_NAMES.contains(&w.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let words = RESERVED_NAMES
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(w, _)| w.clone()))
            .collect();
        Self::from_words(words)
    }

    /// Vocabulary whose content tokens are the decimal ids `4..size`.
    pub fn numeric(size: usize) -> Self {
        let words = (0..size)
            .map(|i| {
                if i < RESERVED {
                    RESERVED_NAMES[i].to_string()
                } else {
                    i.to_string()
                }
            })
            .collect();
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.word(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_after_reserved() {
        let mut counts = HashMap::new();
        counts.insert("b".to_string(), 2);
        counts.insert("a".to_string(), 2);
        counts.insert("c".to_string(), 5);
        let v = Vocab::from_counts(&counts);
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("c"), 4);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.decode(&[4, 6]), vec!["c", "b"]);
    }

    #[test]
    fn reserved_words_in_text_keep_their_ids() {
        let counts = HashMap::from([("<unk>".to_string(), 9), ("x".to_string(), 1)]);
        let v = Vocab::from_counts(&counts);
        assert_eq!(v.len(), RESERVED + 1);
        assert_eq!(v.id("<unk>"), UNK);
    }
}

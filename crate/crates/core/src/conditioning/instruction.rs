use std::collections::BTreeSet;
use std::collections::HashMap;

use crate::degrade::{TaskCatalog, SEVERITY_WORDS};

pub const UNK: &str = "<unk>";

/// Fixed keyword vocabulary standing in for a language-model encoder.
/// Id 0 is always the unknown-word token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.into().to_lowercase())
            .filter(|w| w != UNK)
            .collect();
        let words: Vec<String> = std::iter::once(UNK.to_string()).chain(set).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// Task ids, every word of every instruction template, and the severity
    /// bucket words.
    pub fn standard() -> Self {
        let catalog = TaskCatalog::standard();
        let mut words: Vec<String> = Vec::new();
        for task in catalog.tasks() {
            words.push(task.id.to_string());
            words.extend(task.template.split_whitespace().filter(|w| !w.starts_with('{')).map(str::to_string));
        }
        words.extend(SEVERITY_WORDS.iter().map(|w| w.to_string()));
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        0
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(&word.to_lowercase())
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }
}

/// Lowercased whitespace tokens mapped to ids; unknown words map to UNK.
pub fn encode_instruction(text: &str, vocab: &Vocab) -> Vec<usize> {
    text.split_whitespace().map(|w| vocab.id(w)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_lookup() {
        let v = Vocab::standard();
        let ids = encode_instruction("remove gaussian noise", &v);
        assert_eq!(ids, vec![v.id("remove"), v.id("gaussian"), v.id("noise")]);
        assert!(ids.iter().all(|&i| i != v.unk_id()));
    }

    #[test]
    fn empty_and_unknown() {
        let v = Vocab::standard();
        assert!(encode_instruction("", &v).is_empty());
        assert_eq!(encode_instruction("frobnicate", &v), vec![0]);
        assert_eq!(v.word(0), Some(UNK));
    }

    #[test]
    fn case_folded() {
        let v = Vocab::standard();
        assert_eq!(
            encode_instruction("Remove GAUSSIAN Noise", &v),
            encode_instruction("remove gaussian noise", &v)
        );
    }

    #[test]
    fn every_template_is_in_vocabulary() {
        let v = Vocab::standard();
        for task in TaskCatalog::standard().tasks() {
            assert!(v.contains(task.id));
            for level in SEVERITY_WORDS {
                let text = task.instruction(level);
                assert!(!text.is_empty());
                for w in text.split_whitespace() {
                    assert!(v.contains(w), "{}: `{w}`", task.id);
                }
            }
        }
    }
}

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const PAD: &str = "<pad>";

pub const UNK_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const PAD_ID: usize = 3;

/// Number of reserved ids at the start of every vocabulary.
pub const NUM_SPECIALS: usize = 4;

pub const SPECIALS: [&str; NUM_SPECIALS] = [UNK, BOS, EOS, PAD];

/// Bijective token/id map. Ids 0..4 hold the special tokens; content tokens
/// follow in the order they were supplied, which [`build_vocab`] makes
/// descending frequency, so an id doubles as a frequency rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from content tokens. Special tokens in the input are
    /// skipped (they always live at their reserved ids) and duplicates keep
    /// their first position.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::specials_only();
        for tok in tokens {
            let tok = tok.into();
            if !v.ids.contains_key(&tok) {
                v.ids.insert(tok.clone(), v.tokens.len());
                v.tokens.push(tok);
            }
        }
        v
    }

    pub fn specials_only() -> Self {
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let ids = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// True when the vocabulary holds nothing but the special tokens.
    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= NUM_SPECIALS
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Content tokens (everything after the specials), in id order.
    pub fn content_tokens(&self) -> &[String] {
        &self.tokens[NUM_SPECIALS..]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIALS
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.tokens
                    .get(id)
                    .cloned()
                    .ok_or(Error::IdOutOfRange {
                        id,
                        size: self.tokens.len(),
                    })
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        for (i, special) in SPECIALS.iter().enumerate() {
            if lines.get(i) != Some(special) {
                return Err(Error::format(
                    path,
                    i + 1,
                    format!("expected special token {special}"),
                ));
            }
        }
        let mut v = Self::specials_only();
        for (i, line) in lines.iter().enumerate().skip(NUM_SPECIALS) {
            if line.is_empty() || v.contains(line) {
                return Err(Error::format(path, i + 1, "empty or duplicate token"));
            }
            v.ids.insert(line.to_string(), v.tokens.len());
            v.tokens.push(line.to_string());
        }
        Ok(v)
    }
}

/// Counts token frequencies over a corpus of token sequences.
pub fn token_counts<'a, I, S>(corpus: I) -> HashMap<String, usize>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    for sent in corpus {
        for tok in sent {
            *counts.entry(tok.as_ref().to_string()).or_default() += 1;
        }
    }
    counts
}

/// Specials first, then tokens by descending frequency with lexicographic
/// tie-breaking; `max_size` caps the total size including specials.
pub fn build_vocab<'a, I, S>(corpus: I, max_size: Option<usize>) -> Vocabulary
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut ranked: Vec<(String, usize)> = token_counts(corpus)
        .into_iter()
        .filter(|(t, _)| !SPECIALS.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let keep = max_size
        .map(|m| m.saturating_sub(NUM_SPECIALS))
        .unwrap_or(ranked.len());
    Vocabulary::from_tokens(ranked.into_iter().take(keep).map(|(t, _)| t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sents(lines: &[&str]) -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(String::from).collect())
            .collect()
    }

    fn vocab_of(lines: &[&str], max: Option<usize>) -> Vocabulary {
        let c = sents(lines);
        build_vocab(c.iter().map(Vec::as_slice), max)
    }

    #[test]
    fn frequency_order() {
        let v = vocab_of(&["a a b"], None);
        assert_eq!(v.tokens(), &["<unk>", "<s>", "</s>", "<pad>", "a", "b"]);
    }

    #[test]
    fn truncation() {
        let v = vocab_of(&["b a a"], Some(5));
        assert_eq!(v.tokens(), &["<unk>", "<s>", "</s>", "<pad>", "a"]);
    }

    #[test]
    fn ties_are_lexicographic() {
        let v = vocab_of(&["c b a"], None);
        assert_eq!(v.content_tokens(), &["a", "b", "c"]);
    }

    #[test]
    fn encode_decode_trivial() {
        let v = vocab_of(&["a a b"], None);
        assert_eq!(v.encode(&["a"]), vec![4]);
        assert_eq!(v.decode(&[4]).unwrap(), vec!["a"]);
        assert_eq!(v.encode(&["zzz"]), vec![UNK_ID]);
    }

    #[test]
    fn decode_out_of_range() {
        let v = vocab_of(&["a"], None);
        assert!(matches!(
            v.decode(&[4, 9]),
            Err(Error::IdOutOfRange { id: 9, size: 5 })
        ));
    }

    #[test]
    fn specials_in_corpus_are_not_duplicated() {
        let v = vocab_of(&["<unk> a <pad>"], None);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("<pad>"), Some(PAD_ID));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        let v = vocab_of(&["x y y z z z"], None);
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    #[test]
    fn file_without_specials_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        std::fs::write(&path, "a\nb\n").unwrap();
        assert!(Vocabulary::load(&path).is_err());
    }

    proptest! {
        #[test]
        fn decode_encode_identity(seq in proptest::collection::vec(0usize..50, 0..40)) {
            let words: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
            let v = Vocabulary::from_tokens(words.clone());
            let toks: Vec<String> = seq.iter().map(|&i| words[i].clone()).collect();
            let ids = v.encode(&toks);
            prop_assert_eq!(v.decode(&ids).unwrap(), toks);
        }

        #[test]
        fn ids_are_a_bijection(words in proptest::collection::hash_set("[a-z]{1,6}", 0..30)) {
            let v = Vocabulary::from_tokens(words);
            for (i, t) in v.tokens().iter().enumerate() {
                prop_assert_eq!(v.id(t), Some(i));
            }
        }
    }
}

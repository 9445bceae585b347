use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Header line of the merges file format.
pub const MERGES_HEADER: &str = "#bpe-v1";

/// Marker appended to every subword that is not the last piece of its word.
pub const DEFAULT_SEPARATOR: &str = "@@";

/// A learned list of byte-pair merges, applied in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    separator: String,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    /// Builds a model from an explicit merge list. Duplicate pairs are rejected.
    pub fn new(merges: Vec<(String, String)>, separator: impl Into<String>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, pair) in merges.iter().enumerate() {
            if ranks.insert(pair.clone(), rank).is_some() {
                return Err(Error::Invalid(format!(
                    "duplicate merge ({}, {})",
                    pair.0, pair.1
                )));
            }
        }
        Ok(Self {
            merges,
            separator: separator.into(),
            ranks,
        })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn separator(&self) -> &str {
        &self.separator
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    /// Segments a single word into subwords, without separators.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (left, right) = &self.merges[rank];
            symbols = merge_symbols(&symbols, left, right);
        }
        symbols
    }

    /// Segments a whitespace-tokenized sentence. Every subword except the last
    /// piece of each word carries the separator.
    pub fn apply<S: AsRef<str>>(&self, sentence: &[S]) -> Vec<String> {
        let mut out = Vec::with_capacity(sentence.len() * 2);
        for word in sentence {
            let pieces = self.segment_word(word.as_ref());
            let last = pieces.len().saturating_sub(1);
            for (i, piece) in pieces.into_iter().enumerate() {
                if i < last {
                    out.push(piece + &self.separator);
                } else {
                    out.push(piece);
                }
            }
        }
        out
    }

    pub fn apply_line(&self, line: &str) -> Vec<String> {
        let words: Vec<&str> = line.split_whitespace().collect();
        self.apply(&words)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::from(MERGES_HEADER);
        text.push('\n');
        for (l, r) in &self.merges {
            let _ = writeln!(text, "{l} {r}");
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == MERGES_HEADER => {}
            _ => return Err(Error::format(path, 1, format!("expected header {MERGES_HEADER}"))),
        }
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => return Err(Error::format(path, i + 2, "expected `left right`")),
            }
        }
        Self::new(merges, DEFAULT_SEPARATOR)
    }
}

/// Joins subwords back into words by removing separators.
pub fn strip_separators<S: AsRef<str>>(tokens: &[S], separator: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        match tok.strip_suffix(separator) {
            Some(stem) if !separator.is_empty() => current.push_str(stem),
            _ => {
                current.push_str(tok);
                words.push(std::mem::take(&mut current));
            }
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

fn merge_symbols(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

type Pair = (u32, u32);

struct Word {
    symbols: Vec<u32>,
    freq: i64,
}

/// Learns up to `num_merges` merges by greedy most-frequent-pair selection.
///
/// Ties are broken on the lexicographically smallest `(left, right)` pair;
/// learning stops early once no pair occurs at least twice.
pub fn learn_bpe<I, S>(sentences: I, num_merges: usize) -> Result<BpeModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_freq: HashMap<String, i64> = HashMap::new();
    for line in sentences {
        for w in line.as_ref().split_whitespace() {
            *word_freq.entry(w.to_string()).or_default() += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::EmptyCorpus("learn_bpe needs at least one word"));
    }

    let mut symbol_names: Vec<String> = Vec::new();
    let mut symbol_ids: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: String, names: &mut Vec<String>| -> u32 {
        *symbol_ids.entry(s.clone()).or_insert_with(|| {
            names.push(s);
            (names.len() - 1) as u32
        })
    };

    let mut sorted_words: Vec<(String, i64)> = word_freq.into_iter().collect();
    sorted_words.sort();
    let mut words: Vec<Word> = sorted_words
        .into_iter()
        .map(|(w, freq)| Word {
            symbols: w
                .chars()
                .map(|c| intern(c.to_string(), &mut symbol_names))
                .collect(),
            freq,
        })
        .collect();

    let mut pair_counts: HashMap<Pair, i64> = HashMap::new();
    let mut pair_words: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (wi, word) in words.iter().enumerate() {
        for p in word.symbols.windows(2) {
            let pair = (p[0], p[1]);
            *pair_counts.entry(pair).or_default() += word.freq;
            pair_words.entry(pair).or_default().insert(wi);
        }
    }

    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let a = (&symbol_names[pa.0 as usize], &symbol_names[pa.1 as usize]);
                    let b = (&symbol_names[pb.0 as usize], &symbol_names[pb.1 as usize]);
                    b.cmp(&a)
                })
            })
            .map(|(p, _)| *p);
        let Some(pair) = best else { break };

        let left = symbol_names[pair.0 as usize].clone();
        let right = symbol_names[pair.1 as usize].clone();
        let merged = intern(format!("{left}{right}"), &mut symbol_names);
        merges.push((left, right));

        let mut affected: Vec<usize> = pair_words
            .remove(&pair)
            .unwrap_or_default()
            .into_iter()
            .collect();
        affected.sort_unstable();
        for wi in affected {
            let word = &mut words[wi];
            for p in word.symbols.windows(2) {
                let old = (p[0], p[1]);
                if let Some(c) = pair_counts.get_mut(&old) {
                    *c -= word.freq;
                    if *c <= 0 {
                        pair_counts.remove(&old);
                    }
                }
            }
            let mut next = Vec::with_capacity(word.symbols.len());
            let mut i = 0;
            while i < word.symbols.len() {
                if i + 1 < word.symbols.len()
                    && word.symbols[i] == pair.0
                    && word.symbols[i + 1] == pair.1
                {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(word.symbols[i]);
                    i += 1;
                }
            }
            word.symbols = next;
            for p in word.symbols.windows(2) {
                let new = (p[0], p[1]);
                *pair_counts.entry(new).or_default() += word.freq;
                pair_words.entry(new).or_default().insert(wi);
            }
        }
    }

    BpeModel::new(merges, DEFAULT_SEPARATOR)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    /// Recounts every pair from scratch on each iteration.
    fn naive_learn(freqs: &[(&str, i64)], n: usize) -> Vec<(String, String)> {
        let mut words: Vec<(Vec<String>, i64)> = freqs
            .iter()
            .map(|(w, f)| (w.chars().map(String::from).collect(), *f))
            .collect();
        let mut out = Vec::new();
        for _ in 0..n {
            let mut counts: std::collections::BTreeMap<(String, String), i64> = Default::default();
            for (syms, f) in &words {
                for w in syms.windows(2) {
                    *counts.entry((w[0].clone(), w[1].clone())).or_default() += f;
                }
            }
            let mut best: Option<((String, String), i64)> = None;
            for (p, c) in counts {
                if c >= 2 && best.as_ref().is_none_or(|(_, bc)| c > *bc) {
                    best = Some((p, c));
                }
            }
            let Some((p, _)) = best else { break };
            for (syms, _) in words.iter_mut() {
                *syms = merge_symbols(syms, &p.0, &p.1);
            }
            out.push(p);
        }
        out
    }

    fn corpus_from_freqs(freqs: &[(&str, i64)]) -> Vec<String> {
        freqs
            .iter()
            .flat_map(|(w, f)| std::iter::repeat_n(w.to_string(), *f as usize))
            .collect()
    }

    #[test]
    fn single_pair_corpus() {
        let m = learn_bpe(["ab ab ab"], 1).unwrap();
        assert_eq!(m.merges(), pairs(&[("a", "b")]).as_slice());
    }

    #[test]
    fn zero_merges_is_empty() {
        let m = learn_bpe(["the quick brown fox", "the lazy dog"], 0).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(learn_bpe(Vec::<String>::new(), 3).is_err());
        assert!(learn_bpe(["   "], 3).is_err());
    }

    #[test]
    fn classic_frequency_dictionary() {
        let freqs = [("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)];
        let expected = naive_learn(&freqs, 4);
        assert_eq!(expected[0], ("e".to_string(), "s".to_string()));
        let m = learn_bpe(corpus_from_freqs(&freqs), 4).unwrap();
        assert_eq!(m.merges(), expected.as_slice());
    }

    #[test]
    fn matches_naive_learner_on_larger_corpus() {
        let freqs = [
            ("banana", 4),
            ("bandana", 3),
            ("ananas", 2),
            ("nab", 5),
            ("aaaa", 3),
            ("cabana", 1),
        ];
        let expected = naive_learn(&freqs, 40);
        let m = learn_bpe(corpus_from_freqs(&freqs), 40).unwrap();
        assert_eq!(m.merges(), expected.as_slice());
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let m = learn_bpe(["xyz"], 10).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn apply_without_merges_splits_characters() {
        let m = BpeModel::new(vec![], "@@").unwrap();
        assert_eq!(m.apply(&["cat"]), vec!["c@@", "a@@", "t"]);
    }

    #[test]
    fn apply_full_merge() {
        let m = BpeModel::new(pairs(&[("a", "b")]), "@@").unwrap();
        assert_eq!(m.apply_line("ab ab"), vec!["ab", "ab"]);
    }

    #[test]
    fn overlapping_pair_merges_left_to_right() {
        let m = BpeModel::new(pairs(&[("a", "a")]), "@@").unwrap();
        assert_eq!(m.segment_word("aaa"), vec!["aa", "a"]);
    }

    #[test]
    fn unknown_characters_pass_through() {
        let m = BpeModel::new(pairs(&[("a", "b")]), "@@").unwrap();
        assert_eq!(m.apply(&["ñab"]), vec!["ñ@@", "ab"]);
    }

    #[test]
    fn duplicate_merges_rejected() {
        assert!(BpeModel::new(pairs(&[("a", "b"), ("a", "b")]), "@@").is_err());
    }

    #[test]
    fn merges_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bpe");
        let m = learn_bpe(["low lower newest widest newest"], 5).unwrap();
        m.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("#bpe-v1\n"));
        assert_eq!(BpeModel::load(&path).unwrap(), m);
    }

    #[test]
    fn merges_file_without_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bpe");
        std::fs::write(&path, "a b\n").unwrap();
        assert!(BpeModel::load(&path).is_err());
    }

    #[test]
    fn strip_restores_words() {
        let toks = ["lo@@", "w", "new@@", "est"];
        assert_eq!(strip_separators(&toks, "@@"), vec!["low", "newest"]);
    }
}

//! Surrogate child languages made by renaming source tokens.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::noise::{inject_noise_traced, NoiseSpec};
use crate::rng::derived_rng;
use crate::synth::ParallelCorpus;

use super::toy::pseudo_words;

const CIPHER_CONSONANTS: &[u8] = b"bdfghvz";
const CIPHER_VOWELS: &[u8] = b"aeiouy";

/// Tokens without letters (digits, punctuation) keep their surface form.
pub fn is_anchor(token: &str) -> bool {
    !token.chars().any(char::is_alphabetic)
}

/// Bijective plain → cipher token renaming.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CipherTable {
    map: BTreeMap<String, String>,
}

impl CipherTable {
    /// Renames every non-anchor token to a fresh pseudo-word distinct from
    /// all input tokens.
    pub fn generate<S: AsRef<str>>(tokens: &[S], seed: u64) -> Self {
        let plain: BTreeSet<&str> = tokens.iter().map(AsRef::as_ref).collect();
        let mut taken: HashSet<String> = plain.iter().map(|s| s.to_string()).collect();
        let renamed: Vec<&str> = plain.iter().copied().filter(|t| !is_anchor(t)).collect();
        let mut rng = derived_rng(seed, &[0xc1f]);
        let names = pseudo_words(renamed.len(), CIPHER_CONSONANTS, CIPHER_VOWELS, &mut taken, &mut rng);
        let mut map: BTreeMap<String, String> = renamed.iter().map(|t| t.to_string()).zip(names).collect();
        for t in plain.iter().filter(|t| is_anchor(t)) {
            map.insert(t.to_string(), t.to_string());
        }
        Self { map }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, plain: &str) -> Option<&str> {
        self.map.get(plain).map(String::as_str)
    }

    /// `(plain, cipher)` in plain-token order.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn inverse(&self) -> CipherTable {
        Self {
            map: self.map.iter().map(|(a, b)| (b.clone(), a.clone())).collect(),
        }
    }

    pub fn encrypt<S: AsRef<str>>(&self, sentence: &[S]) -> Result<Vec<String>> {
        sentence
            .iter()
            .map(|t| {
                self.get(t.as_ref())
                    .map(String::from)
                    .ok_or_else(|| Error::Invalid(format!("token `{}` is not in the cipher table", t.as_ref())))
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text: String = self.pairs().map(|(a, b)| format!("{a}\t{b}\n")).collect();
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = BTreeMap::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(path, i + 1, "expected `plain<TAB>cipher`"))?;
            if !seen.insert(b.to_string()) || map.insert(a.to_string(), b.to_string()).is_some() {
                return Err(Error::format(path, i + 1, "table is not bijective"));
            }
        }
        Ok(Self { map })
    }
}

/// Enciphers source sentences. With `reorder`, tokens are also locally
/// permuted by at most that many positions (per-sentence seeded).
pub fn apply_cipher(
    corpus: &ParallelCorpus,
    table: &CipherTable,
    reorder: Option<usize>,
    seed: u64,
) -> Result<ParallelCorpus> {
    let mut idx = 0u64;
    let mut err = None;
    let out = corpus.map_sources(|s| {
        let i = idx;
        idx += 1;
        match encipher_sentence(s, table, reorder, seed, i) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                Vec::new()
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

pub fn encipher_sentence<S: AsRef<str>>(
    sentence: &[S],
    table: &CipherTable,
    reorder: Option<usize>,
    seed: u64,
    index: u64,
) -> Result<Vec<String>> {
    let renamed = table.encrypt(sentence)?;
    match reorder {
        Some(d) if d > 0 && !renamed.is_empty() => {
            let spec = NoiseSpec {
                d_per: d,
                ..NoiseSpec::identity()
            };
            let mut rng = derived_rng(seed, &[0x4e0, index]);
            Ok(inject_noise_traced(&renamed, &spec, &[], &mut rng)?.tokens)
        }
        _ => Ok(renamed),
    }
}

/// Derives a child corpus from `base` and returns it with the cipher table.
pub fn make_cipher_task(base: &ParallelCorpus, seed: u64, reorder: Option<usize>) -> Result<(ParallelCorpus, CipherTable)> {
    if base.is_empty() {
        return Err(Error::EmptyCorpus("cipher base"));
    }
    let tokens: Vec<&str> = base.sources().flatten().map(String::as_str).collect();
    let table = CipherTable::generate(&tokens, seed);
    Ok((apply_cipher(base, &table, reorder, seed)?, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn base() -> ParallelCorpus {
        ParallelCorpus::from_lines(
            &["lo kata pime 3 sora .", "la mine kata rosu ?", "3 4 pime !"],
            &["x y", "z", "w"],
        )
        .unwrap()
    }

    #[test]
    fn table_inverts_exactly() {
        let b = base();
        let (child, table) = make_cipher_task(&b, 5, None).unwrap();
        let inv = table.inverse();
        for (c, p) in child.pairs().iter().zip(b.pairs()) {
            assert_eq!(inv.encrypt(&c.source).unwrap(), p.source);
            assert_eq!(c.target, p.target);
        }
    }

    #[test]
    fn anchors_shared_and_words_disjoint() {
        let b = base();
        let (child, table) = make_cipher_task(&b, 5, None).unwrap();
        let plain: HashSet<&String> = b.sources().flatten().collect();
        for t in child.sources().flatten() {
            assert_eq!(plain.contains(t), is_anchor(t), "{t}");
        }
        assert_eq!(table.get("3"), Some("3"));
        assert_eq!(table.get("?"), Some("?"));
        assert_ne!(table.get("kata"), Some("kata"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, t) = make_cipher_task(&base(), 2, None).unwrap();
        t.save(dir.path().join("c.tsv")).unwrap();
        assert_eq!(CipherTable::load(dir.path().join("c.tsv")).unwrap(), t);
        std::fs::write(dir.path().join("bad.tsv"), "a\tx\nb\tx\n").unwrap();
        assert!(CipherTable::load(dir.path().join("bad.tsv")).is_err());
    }

    proptest! {
        #[test]
        fn reorder_displacement_bounded(len in 1usize..30, seed in any::<u64>(), d in 1usize..5) {
            // distinct tokens make each output position traceable
            let words: Vec<String> = (0..len).map(|i| format!("w{i}")).collect();
            let table = CipherTable::generate(&words, seed);
            let out = encipher_sentence(&words, &table, Some(d), seed, 0).unwrap();
            let inv = table.inverse();
            for (p, t) in out.iter().enumerate() {
                let orig = inv.get(t).unwrap();
                let i: usize = orig[1..].parse().unwrap();
                prop_assert!(p.abs_diff(i) <= d);
            }
        }
    }
}

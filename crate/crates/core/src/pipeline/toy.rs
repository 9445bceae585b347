//! Generator for a small synthetic language pair.
//!
//! The source side is verb-final with postnominal adjectives, gendered
//! determiners and postpositions; the target side is verb-medial with
//! prenominal adjectives and prepositions. Verbs select their own subject,
//! object and location nouns, and nouns their own adjectives, so every
//! word has a distinctive distribution.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::derived_rng;
use crate::synth::{ParallelCorpus, SentencePair};

pub const PUNCTUATION: [&str; 20] = [
    ".", "!", "?", "...", ",", ";", ":", "\"", "(", ")", "-", "#", "%", "$", "&", "/", "[", "]", "*", "+",
];
pub const DIGITS: [&str; 8] = ["2", "3", "4", "5", "6", "7", "8", "9"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub nouns: usize,
    pub verbs: usize,
    pub adjectives: usize,
    pub adverbs: usize,
    pub adpositions: usize,
    /// Nouns each verb accepts per role.
    pub selection: usize,
    /// Zipf exponent of verb choice.
    pub zipf: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            nouns: 180,
            verbs: 60,
            adjectives: 50,
            adverbs: 16,
            adpositions: 8,
            selection: 6,
            zipf: 0.7,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Word {
    src: String,
    tgt: String,
}

/// A generated language pair.
#[derive(Debug, Clone)]
pub struct ToyLanguage {
    nouns: Vec<Word>,
    gender: Vec<bool>,
    verbs: Vec<Word>,
    adjectives: Vec<Word>,
    adverbs: Vec<Word>,
    adpositions: Vec<Word>,
    subjects: Vec<Vec<usize>>,
    objects: Vec<Vec<usize>>,
    places: Vec<Vec<usize>>,
    noun_adjectives: Vec<Vec<usize>>,
    verb_adverbs: Vec<Vec<usize>>,
    verb_weights: Vec<f64>,
}

/// Distinct pseudo-words from consonant-vowel syllables.
pub(crate) fn pseudo_words(
    n: usize,
    consonants: &[u8],
    vowels: &[u8],
    taken: &mut HashSet<String>,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    let mut syllables = 2;
    let mut misses = 0;
    while out.len() < n {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*consonants.choose(rng).expect("consonants") as char);
            w.push(*vowels.choose(rng).expect("vowels") as char);
        }
        if taken.insert(w.clone()) {
            out.push(w);
            misses = 0;
        } else {
            misses += 1;
            if misses > 50 {
                syllables += 1;
                misses = 0;
            }
        }
    }
    out
}

const SRC_CONSONANTS: &[u8] = b"klmnprst";
const SRC_VOWELS: &[u8] = b"aeiou";
const TGT_CONSONANTS: &[u8] = b"bcdfghlmnprstw";
const TGT_VOWELS: &[u8] = b"aeiouy";

fn enclosed(v: Vec<String>, open: &str, close: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(v.len() + 2);
    out.push(open.to_string());
    out.extend(v);
    out.push(close.to_string());
    out
}

impl ToyLanguage {
    pub fn new(cfg: &ToyConfig) -> Self {
        let mut rng = derived_rng(cfg.seed, &[0x70e]);
        let mut src_taken: HashSet<String> = ["lo", "la", "un", "na"].iter().map(|s| s.to_string()).collect();
        let mut tgt_taken: HashSet<String> = ["the", "a"].iter().map(|s| s.to_string()).collect();
        let mut words = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Word> {
            let s = pseudo_words(n, SRC_CONSONANTS, SRC_VOWELS, &mut src_taken, rng);
            let t = pseudo_words(n, TGT_CONSONANTS, TGT_VOWELS, &mut tgt_taken, rng);
            s.into_iter().zip(t).map(|(src, tgt)| Word { src, tgt }).collect()
        };
        let nouns = words(cfg.nouns, &mut rng);
        let verbs = words(cfg.verbs, &mut rng);
        let adjectives = words(cfg.adjectives, &mut rng);
        let adverbs = words(cfg.adverbs, &mut rng);
        let adpositions = words(cfg.adpositions, &mut rng);
        let gender = (0..cfg.nouns).map(|_| rng.random_bool(0.5)).collect();

        // every noun lands in at least one selection list per role
        let role_lists = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
            let mut lists = vec![Vec::new(); cfg.verbs];
            let mut pool: Vec<usize> = (0..cfg.nouns).collect();
            pool.shuffle(rng);
            for (i, n) in pool.into_iter().enumerate() {
                lists[i % cfg.verbs].push(n);
            }
            for l in lists.iter_mut() {
                while l.len() < cfg.selection.min(cfg.nouns) {
                    let n = rng.random_range(0..cfg.nouns);
                    if !l.contains(&n) {
                        l.push(n);
                    }
                }
            }
            lists
        };
        let subjects = role_lists(&mut rng);
        let objects = role_lists(&mut rng);
        let places = role_lists(&mut rng);
        let pick = |k: usize, n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
            rand::seq::index::sample(rng, n, k.min(n)).into_vec()
        };
        let noun_adjectives = (0..cfg.nouns).map(|_| pick(3, cfg.adjectives, &mut rng)).collect();
        let verb_adverbs = (0..cfg.verbs).map(|_| pick(2, cfg.adverbs, &mut rng)).collect();
        let verb_weights = (0..cfg.verbs).map(|i| 1.0 / ((i + 1) as f64).powf(cfg.zipf)).collect();
        Self {
            nouns,
            gender,
            verbs,
            adjectives,
            adverbs,
            adpositions,
            subjects,
            objects,
            places,
            noun_adjectives,
            verb_adverbs,
            verb_weights,
        }
    }

    /// Every source-side token the grammar can emit.
    pub fn source_lexicon(&self) -> Vec<String> {
        let mut v: Vec<String> = ["lo", "la", "un", "na"].iter().map(|s| s.to_string()).collect();
        for group in [&self.nouns, &self.verbs, &self.adjectives, &self.adverbs, &self.adpositions] {
            v.extend(group.iter().map(|w| w.src.clone()));
        }
        v.extend(DIGITS.iter().chain(&PUNCTUATION).map(|s| s.to_string()));
        v
    }

    /// Translation of each source content word.
    pub fn lexicon_pairs(&self) -> Vec<(String, String)> {
        [&self.nouns, &self.verbs, &self.adjectives, &self.adverbs, &self.adpositions]
            .into_iter()
            .flat_map(|g| g.iter().map(|w| (w.src.clone(), w.tgt.clone())))
            .collect()
    }

    fn noun_phrase(&self, n: usize, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
        let noun = &self.nouns[n];
        let adj = rng.random_bool(0.4).then(|| &self.adjectives[*self.noun_adjectives[n].choose(rng).expect("adjectives")]);
        let (mut s, mut t) = if rng.random_bool(0.15) {
            let d = DIGITS.choose(rng).expect("digits").to_string();
            let r: Vec<String> = match rng.random_range(0..20) {
                0..5 => {
                    let e = DIGITS.choose(rng).expect("digits").to_string();
                    vec![d, "-".into(), e]
                }
                5..8 => vec!["#".into(), d],
                8..11 => vec![d, "%".into()],
                11..13 => vec!["$".into(), d],
                _ => vec![d],
            };
            (r.clone(), r)
        } else if rng.random_bool(0.7) {
            (vec![(if self.gender[n] { "la" } else { "lo" }).to_string()], vec!["the".to_string()])
        } else {
            (vec![(if self.gender[n] { "na" } else { "un" }).to_string()], vec!["a".to_string()])
        };
        s.push(noun.src.clone());
        if let Some(a) = adj {
            s.push(a.src.clone());
            t.push(a.tgt.clone());
            if rng.random_bool(0.15) {
                // "adj / adj"
                let b = &self.adjectives[*self.noun_adjectives[n].choose(rng).expect("adjectives")];
                s.extend(["/".into(), b.src.clone()]);
                t.extend(["/".into(), b.tgt.clone()]);
            }
        }
        t.push(noun.tgt.clone());
        (s, t)
    }

    /// A noun phrase from `pool`, sometimes coordinated with a second one.
    fn coordinated(&self, pool: &[usize], conj: &str, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
        let (mut s, mut t) = self.noun_phrase(*pool.choose(rng).expect("selection"), rng);
        if rng.random_bool(0.08) {
            let (s2, t2) = self.noun_phrase(*pool.choose(rng).expect("selection"), rng);
            s.push(conj.to_string());
            s.extend(s2);
            t.push(conj.to_string());
            t.extend(t2);
        }
        (s, t)
    }

    /// One clause as (source, target) tokens.
    fn clause(&self, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
        let v = rand::distr::weighted::WeightedIndex::new(&self.verb_weights).expect("positive weights");
        let v = rng.sample(v);
        let (subj_s, subj_t) = self.coordinated(&self.subjects[v], "&", rng);
        let (mut obj_s, mut obj_t) = self.coordinated(&self.objects[v], "+", rng);
        if rng.random_bool(0.1) {
            obj_s = enclosed(obj_s, "\"", "\"");
            obj_t = enclosed(obj_t, "\"", "\"");
        }
        let mut verb_s = vec![self.verbs[v].src.clone()];
        let mut verb_t = vec![self.verbs[v].tgt.clone()];
        if rng.random_bool(0.06) {
            verb_s = enclosed(verb_s, "*", "*");
            verb_t = enclosed(verb_t, "*", "*");
        }
        let pp = rng.random_bool(0.35).then(|| {
            let a = &self.adpositions[rng.random_range(0..self.adpositions.len())];
            let (mut ps, pt) = self.noun_phrase(*self.places[v].choose(rng).expect("places"), rng);
            ps.push(a.src.clone());
            let mut pt = [vec![a.tgt.clone()], pt].concat();
            if rng.random_bool(0.2) {
                ps = enclosed(ps, "[", "]");
                pt = enclosed(pt, "[", "]");
            }
            (ps, pt)
        });
        let adv = rng.random_bool(0.3).then(|| {
            let a = &self.adverbs[*self.verb_adverbs[v].choose(rng).expect("adverbs")];
            let (s, t) = (vec![a.src.clone()], vec![a.tgt.clone()]);
            if rng.random_bool(0.25) {
                (enclosed(s, "(", ")"), enclosed(t, "(", ")"))
            } else {
                (s, t)
            }
        });

        // source: S O [PP ,] V [adv];  target: S V O [, PP] [adv]
        let mut src = subj_s;
        src.extend(obj_s);
        let mut tgt = subj_t;
        tgt.extend(verb_t);
        tgt.extend(obj_t);
        if let Some((ps, pt)) = pp {
            src.extend(ps);
            src.push(",".into());
            tgt.push(",".into());
            tgt.extend(pt);
        }
        src.extend(verb_s);
        if let Some((s, t)) = adv {
            src.extend(s);
            tgt.extend(t);
        }
        (src, tgt)
    }

    pub fn sample_pair(&self, rng: &mut ChaCha8Rng) -> SentencePair {
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        if rng.random_bool(0.08) {
            // topic prefix "N :"
            let n = &self.nouns[rng.random_range(0..self.nouns.len())];
            src.extend([n.src.clone(), ":".into()]);
            tgt.extend([n.tgt.clone(), ":".into()]);
        }
        let (s, t) = self.clause(rng);
        src.extend(s);
        tgt.extend(t);
        if rng.random_bool(0.12) {
            let (s, t) = self.clause(rng);
            src.push(";".into());
            tgt.push(";".into());
            src.extend(s);
            tgt.extend(t);
        }
        let punct = match rng.random_range(0..20) {
            0 | 1 => "!",
            2 | 3 => "?",
            4 => "...",
            _ => ".",
        };
        src.push(punct.to_string());
        tgt.push(punct.to_string());
        SentencePair::new(src, tgt)
    }

    /// `n` sentence pairs; distinct `stream` values give independent samples.
    pub fn sample_corpus(&self, n: usize, seed: u64, stream: u64) -> ParallelCorpus {
        let mut rng = derived_rng(seed, &[0x5e17, stream]);
        ParallelCorpus::new((0..n).map(|_| self.sample_pair(&mut rng)).collect()).expect("targets are never empty")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_covering() {
        let cfg = ToyConfig::default();
        let a = ToyLanguage::new(&cfg);
        let b = ToyLanguage::new(&cfg);
        assert_eq!(a.sample_corpus(50, 3, 0), b.sample_corpus(50, 3, 0));
        assert_ne!(a.sample_corpus(50, 3, 0), a.sample_corpus(50, 3, 1));
        let lex: HashSet<String> = a.source_lexicon().into_iter().collect();
        assert_eq!(lex.len(), a.source_lexicon().len());
        for p in a.sample_corpus(200, 1, 0).pairs() {
            assert!(p.source.iter().all(|t| lex.contains(t)));
            assert!(p.source.len() >= 5 && p.target.len() >= 5);
        }
    }

    #[test]
    fn source_and_target_words_have_separate_alphabets() {
        let l = ToyLanguage::new(&ToyConfig::default());
        for (s, _) in l.lexicon_pairs() {
            assert!(s.bytes().all(|c| SRC_CONSONANTS.contains(&c) || SRC_VOWELS.contains(&c)));
        }
    }
}

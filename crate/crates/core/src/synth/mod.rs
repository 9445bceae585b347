//! Synthetic child data built from parent parallel data, the comparison
//! variants (empty source, copied target, cross-lingual replacement), and
//! real/synthetic corpus mixing.

mod corpus;

use std::collections::HashMap;

use ndarray::Axis;
use rand::seq::{index, SliceRandom};

pub use corpus::{read_sentences, write_sentences, ParallelCorpus, Provenance, SentencePair};

use crate::crossmap::{map_embedding, LinearMap};
use crate::embedding::{normalize_rows, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::rng::derived_rng;
use crate::vocab::{Vocabulary, NUM_SPECIALS, UNK};

/// Keeps the source tokens found in `child_vocab` and replaces every other
/// source token with `<unk>`; the target side is copied unchanged.
pub fn filter_to_child_vocab(source: &[String], child_vocab: &Vocabulary) -> Vec<String> {
    source
        .iter()
        .map(|t| {
            if child_vocab.contains(t) {
                t.clone()
            } else {
                UNK.to_string()
            }
        })
        .collect()
}

fn unk_fraction(source: &[String]) -> f64 {
    if source.is_empty() {
        return 1.0;
    }
    source.iter().filter(|t| *t == UNK).count() as f64 / source.len() as f64
}

fn sample_pairs(parent: &ParallelCorpus, sample_size: usize, seed: u64) -> Result<Vec<SentencePair>> {
    if sample_size > parent.len() {
        return Err(Error::Invalid(format!(
            "sample size {sample_size} exceeds parent corpus size {}",
            parent.len()
        )));
    }
    let mut rng = derived_rng(seed, &[0x5a3]);
    let mut picked = index::sample(&mut rng, parent.len(), sample_size).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| parent.pairs()[i].clone()).collect())
}

/// Uniformly samples `sample_size` parent pairs and filters their source
/// side to the child vocabulary. With `max_unk_fraction`, pairs whose source
/// is more unknown than that are dropped after sampling.
pub fn make_parent_synthetic(
    parent: &ParallelCorpus,
    child_vocab: &Vocabulary,
    sample_size: usize,
    seed: u64,
    max_unk_fraction: Option<f64>,
) -> Result<ParallelCorpus> {
    if child_vocab.is_empty() {
        return Err(Error::Invalid("child vocabulary is empty".into()));
    }
    let pairs = sample_pairs(parent, sample_size, seed)?
        .into_iter()
        .map(|p| SentencePair {
            source: filter_to_child_vocab(&p.source, child_vocab),
            target: p.target,
            provenance: Provenance::Synthetic,
        })
        .filter(|p| max_unk_fraction.is_none_or(|m| unk_fraction(&p.source) <= m))
        .collect();
    ParallelCorpus::new(pairs)
}

/// Token overlap between two vocabularies (content tokens only).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlapReport {
    pub parent_size: usize,
    pub child_size: usize,
    pub shared: Vec<String>,
}

pub fn vocabulary_overlap(parent: &Vocabulary, child: &Vocabulary) -> OverlapReport {
    let mut shared: Vec<String> = child
        .content_tokens()
        .iter()
        .filter(|t| parent.contains(t))
        .cloned()
        .collect();
    shared.sort();
    OverlapReport {
        parent_size: parent.content_tokens().len(),
        child_size: child.content_tokens().len(),
        shared,
    }
}

/// Inputs for [`VariantMode::XlingualReplace`].
pub struct CrossLingualInputs<'a> {
    pub child: &'a EmbeddingMatrix,
    pub parent: &'a EmbeddingMatrix,
    pub map: &'a LinearMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantMode {
    EmptySource,
    CopiedTarget,
    XlingualReplace,
}

/// For every parent token, the child token whose mapped embedding has the
/// highest cosine with the parent embedding. Shared surface forms map to
/// themselves.
pub fn replacement_table(inputs: &CrossLingualInputs<'_>) -> Result<HashMap<String, String>> {
    let mapped = map_embedding(inputs.map, inputs.child)?;
    if mapped.dim() != inputs.parent.dim() {
        return Err(Error::Dimension("child and parent embeddings differ in dimension".into()));
    }
    let child_ids: Vec<usize> = (NUM_SPECIALS..mapped.len()).filter(|&i| mapped.is_trained(i)).collect();
    if child_ids.is_empty() {
        return Err(Error::Invalid("child embedding has no trained rows".into()));
    }
    let child_unit = normalize_rows(mapped.weights().select(Axis(0), &child_ids).view());
    let parent_ids: Vec<usize> = (NUM_SPECIALS..inputs.parent.len()).collect();
    let parent_unit = normalize_rows(inputs.parent.weights().select(Axis(0), &parent_ids).view());
    let sim = parent_unit.dot(&child_unit.t());
    let child_vocab = inputs.child.vocab();
    let mut table = HashMap::new();
    for (row, &pid) in sim.rows().into_iter().zip(&parent_ids) {
        let ptok = inputs.parent.vocab().tokens()[pid].clone();
        if child_vocab.contains(&ptok) {
            table.insert(ptok.clone(), ptok);
            continue;
        }
        let best = row
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
            .0;
        table.insert(ptok, child_vocab.tokens()[child_ids[best]].clone());
    }
    Ok(table)
}

/// Builds one of the synthetic-source comparison variants. Every output pair
/// is marked synthetic and keeps its target side.
pub fn make_variant(
    corpus: &ParallelCorpus,
    mode: VariantMode,
    xlingual: Option<CrossLingualInputs<'_>>,
) -> Result<ParallelCorpus> {
    let table = match mode {
        VariantMode::XlingualReplace => {
            let inputs = xlingual.ok_or_else(|| {
                Error::Invalid("cross-lingual replacement needs child/parent embeddings and a map".into())
            })?;
            Some(replacement_table(&inputs)?)
        }
        _ => None,
    };
    let pairs = corpus
        .pairs()
        .iter()
        .map(|p| {
            let source = match mode {
                VariantMode::EmptySource => vec![UNK.to_string()],
                VariantMode::CopiedTarget => p.target.clone(),
                VariantMode::XlingualReplace => {
                    let table = table.as_ref().expect("built above");
                    p.source
                        .iter()
                        .map(|t| table.get(t).cloned().unwrap_or_else(|| UNK.to_string()))
                        .collect()
                }
            };
            SentencePair {
                source,
                target: p.target.clone(),
                provenance: Provenance::Synthetic,
            }
        })
        .collect();
    ParallelCorpus::new(pairs)
}

/// `count` items drawn by whole repetitions of `items` plus a remainder
/// sampled without replacement.
fn oversample(items: &[SentencePair], count: usize, rng: &mut impl rand::Rng) -> Vec<SentencePair> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count / items.len() {
        out.extend_from_slice(items);
    }
    let rest = count % items.len();
    let mut picked = index::sample(rng, items.len(), rest).into_vec();
    picked.sort_unstable();
    out.extend(picked.into_iter().map(|i| items[i].clone()));
    out
}

/// Mixes real and synthetic pairs at `real:synthetic = ratio.0:ratio.1`.
///
/// The side that is short of the ratio is oversampled; nothing is dropped.
/// The result is shuffled deterministically by `seed`.
pub fn mix_corpora(
    real: &ParallelCorpus,
    synthetic: &ParallelCorpus,
    ratio: (f64, f64),
    seed: u64,
) -> Result<ParallelCorpus> {
    if real.is_empty() || synthetic.is_empty() {
        return Err(Error::EmptyCorpus("mix_corpora needs nonempty real and synthetic corpora"));
    }
    let (r, s) = ratio;
    if !(r > 0.0 && s > 0.0 && r.is_finite() && s.is_finite()) {
        return Err(Error::Invalid(format!("mixing ratio must be positive, got {r}:{s}")));
    }
    let mut rng = derived_rng(seed, &[0x31c]);
    let want_real = (synthetic.len() as f64 * r / s).round() as usize;
    let (real_part, synth_part) = if want_real >= real.len() {
        (oversample(real.pairs(), want_real, &mut rng), synthetic.pairs().to_vec())
    } else {
        let want_synth = (real.len() as f64 * s / r).round() as usize;
        (real.pairs().to_vec(), oversample(synthetic.pairs(), want_synth, &mut rng))
    };
    let mut pairs = real_part;
    pairs.extend(synth_part);
    pairs.shuffle(&mut rng);
    ParallelCorpus::new(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossmap::Constraint;
    use ndarray::Array2;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn corpus(n: usize, tag: &str) -> ParallelCorpus {
        let src: Vec<String> = (0..n).map(|i| format!("{tag}{i} x")).collect();
        let tgt: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        let mut c = ParallelCorpus::from_lines(&src, &tgt).unwrap().into_pairs();
        if tag == "s" {
            c.iter_mut().for_each(|p| p.provenance = Provenance::Synthetic);
        }
        ParallelCorpus::new(c).unwrap()
    }

    #[test]
    fn figure_style_example() {
        let child = Vocabulary::from_tokens(toks("Paris , 1889 . etxea"));
        let src = toks("die Stadt Paris , 1889 .");
        assert_eq!(
            filter_to_child_vocab(&src, &child),
            toks("<unk> <unk> Paris , 1889 .")
        );
    }

    #[test]
    fn full_child_vocab_keeps_source() {
        let parent = ParallelCorpus::from_lines(&["a b c", "c d"], &["x", "y"]).unwrap();
        let child = Vocabulary::from_tokens(toks("a b c d"));
        let syn = make_parent_synthetic(&parent, &child, 2, 1, None).unwrap();
        assert_eq!(syn.pairs()[0].source, toks("a b c"));
        assert_eq!(syn.pairs()[1].source, toks("c d"));
        assert_eq!(syn.count(Provenance::Synthetic), 2);
    }

    #[test]
    fn sample_size_and_vocab_checks() {
        let parent = corpus(5, "p");
        let child = Vocabulary::from_tokens(toks("x"));
        assert!(make_parent_synthetic(&parent, &child, 6, 1, None).is_err());
        assert!(make_parent_synthetic(&parent, &Vocabulary::specials_only(), 2, 1, None).is_err());
        let a = make_parent_synthetic(&parent, &child, 3, 9, None).unwrap();
        let b = make_parent_synthetic(&parent, &child, 3, 9, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn unk_filter_drops_mostly_unknown_sources() {
        let parent = ParallelCorpus::from_lines(&["a b c d", "a a"], &["x", "y"]).unwrap();
        let child = Vocabulary::from_tokens(toks("a"));
        let syn = make_parent_synthetic(&parent, &child, 2, 1, Some(0.5)).unwrap();
        assert_eq!(syn.len(), 1);
        assert_eq!(syn.pairs()[0].target, toks("y"));
    }

    #[test]
    fn empty_source_and_copied_target() {
        let c = corpus(3, "p");
        let e = make_variant(&c, VariantMode::EmptySource, None).unwrap();
        assert!(e.pairs().iter().all(|p| p.source == vec!["<unk>".to_string()]));
        let c = ParallelCorpus::from_lines(&["q"], &["a b"]).unwrap();
        let ct = make_variant(&c, VariantMode::CopiedTarget, None).unwrap();
        assert_eq!(ct.pairs()[0].source, toks("a b"));
    }

    #[test]
    fn xlingual_replace_requires_inputs() {
        assert!(make_variant(&corpus(2, "p"), VariantMode::XlingualReplace, None).is_err());
    }

    #[test]
    fn xlingual_replace_uses_nearest_mapped_child() {
        // Child rows are the parent rows permuted; identity map.
        let parent_vocab = Vocabulary::from_tokens(toks("der hund ."));
        let child_vocab = Vocabulary::from_tokens(toks("txakur ber ."));
        let mut pw = Array2::<f32>::zeros((7, 3));
        pw.row_mut(4).assign(&ndarray::arr1(&[1.0, 0.0, 0.0]));
        pw.row_mut(5).assign(&ndarray::arr1(&[0.0, 1.0, 0.0]));
        pw.row_mut(6).assign(&ndarray::arr1(&[0.0, 0.0, 1.0]));
        let mut cw = Array2::<f32>::zeros((7, 3));
        cw.row_mut(4).assign(&ndarray::arr1(&[0.0, 0.9, 0.1]));
        cw.row_mut(5).assign(&ndarray::arr1(&[0.95, 0.0, 0.05]));
        cw.row_mut(6).assign(&ndarray::arr1(&[0.0, 0.0, 1.0]));
        let parent = EmbeddingMatrix::new(parent_vocab, pw).unwrap();
        let child = EmbeddingMatrix::new(child_vocab, cw).unwrap();
        let map = LinearMap::new(Array2::eye(3), Constraint::Orthogonal).unwrap();
        let c = ParallelCorpus::from_lines(&["der hund . unbekannt"], &["the dog ."]).unwrap();
        let v = make_variant(
            &c,
            VariantMode::XlingualReplace,
            Some(CrossLingualInputs { child: &child, parent: &parent, map: &map }),
        )
        .unwrap();
        assert_eq!(v.pairs()[0].source, toks("ber txakur . <unk>"));
    }

    #[test]
    fn mix_already_at_ratio() {
        let m = mix_corpora(&corpus(10, "r"), &corpus(20, "s"), (1.0, 2.0), 3).unwrap();
        assert_eq!(m.len(), 30);
        assert_eq!(m.count(Provenance::Real), 10);
    }

    #[test]
    fn mix_oversamples_real() {
        let m = mix_corpora(&corpus(10, "r"), &corpus(40, "s"), (1.0, 2.0), 3).unwrap();
        assert_eq!(m.len(), 60);
        assert_eq!(m.count(Provenance::Real), 20);
    }

    #[test]
    fn mix_counts_match_ratio() {
        for (nr, ns, r, s) in [(7, 30, 1.0, 2.0), (10, 13, 1.0, 4.0), (9, 20, 2.0, 1.0), (3, 50, 1.0, 1.0), (11, 17, 1.0, 2.0)] {
            let m = mix_corpora(&corpus(nr, "r"), &corpus(ns, "s"), (r, s), 1).unwrap();
            let real = m.count(Provenance::Real) as f64;
            let syn = m.count(Provenance::Synthetic) as f64;
            assert!(real >= nr as f64 && syn >= ns as f64, "data dropped");
            let exact = real * s == syn * r;
            let expected_real = syn * r / s;
            assert!(exact || (real - expected_real).abs() <= 1.0, "{nr} {ns} {r}:{s} -> {real}:{syn}");
        }
    }

    #[test]
    fn mix_is_deterministic_and_rejects_empty() {
        let a = mix_corpora(&corpus(4, "r"), &corpus(9, "s"), (1.0, 2.0), 5).unwrap();
        let b = mix_corpora(&corpus(4, "r"), &corpus(9, "s"), (1.0, 2.0), 5).unwrap();
        assert_eq!(a, b);
        assert!(mix_corpora(&ParallelCorpus::default(), &corpus(3, "s"), (1.0, 2.0), 1).is_err());
        assert!(mix_corpora(&corpus(3, "r"), &corpus(3, "s"), (0.0, 2.0), 1).is_err());
    }
}

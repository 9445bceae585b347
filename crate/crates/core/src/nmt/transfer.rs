use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};

use super::params::ModelParams;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::rng::derived_rng;
use crate::vocab::{Vocabulary, NUM_SPECIALS};

/// How the rows of a transferred source embedding were filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TransferReport {
    pub specials: usize,
    pub mapped: usize,
    pub random: usize,
}

/// The model's source embedding as a matrix over `vocab` (all rows
/// trained).
pub fn extract_source_embedding(m: &ModelParams<f32>, vocab: &Vocabulary) -> Result<EmbeddingMatrix> {
    if vocab.len() != m.hyper().src_vocab {
        return Err(Error::Dimension(format!(
            "vocabulary has {} entries, model source side {}",
            vocab.len(),
            m.hyper().src_vocab
        )));
    }
    EmbeddingMatrix::new(vocab.clone(), m.source_embedding().clone())
}

/// Parent model with its source embedding replaced for the child
/// vocabulary. Specials come from the parent; child tokens with a trained
/// row in `mapped` take it; the rest are drawn from a normal with the
/// per-coordinate mean and standard deviation of the mapped rows.
pub fn transfer_init(
    parent: &ModelParams<f32>,
    mapped: &EmbeddingMatrix,
    child_vocab: &Vocabulary,
    seed: u64,
) -> Result<(ModelParams<f32>, TransferReport)> {
    let d = parent.hyper().d_model;
    if mapped.dim() != d {
        return Err(Error::Dimension(format!(
            "mapped embedding dimension {} != model dimension {d}",
            mapped.dim()
        )));
    }
    let mut source: Vec<Option<usize>> = vec![None; child_vocab.len()];
    for (id, tok) in child_vocab.tokens().iter().enumerate().skip(NUM_SPECIALS) {
        source[id] = mapped.vocab().id(tok).filter(|&r| mapped.is_trained(r));
    }
    let rows: Vec<usize> = (NUM_SPECIALS..mapped.len()).filter(|&r| mapped.is_trained(r)).collect();
    let (mean, std) = column_stats(mapped.weights(), &rows);

    let mut report = TransferReport::default();
    let mut rng = derived_rng(seed, &[0x7a5f]);
    let parent_emb = parent.source_embedding();
    let mut emb = Array2::<f32>::zeros((child_vocab.len(), d));
    for (id, src) in source.iter().enumerate() {
        let mut row = emb.row_mut(id);
        if id < NUM_SPECIALS {
            row.assign(&parent_emb.row(id));
            report.specials += 1;
        } else if let Some(r) = src {
            row.assign(&mapped.row(*r));
            report.mapped += 1;
        } else {
            if rows.is_empty() {
                return Err(Error::Invalid("mapped embedding has no trained content rows".into()));
            }
            for (j, v) in row.iter_mut().enumerate() {
                let n = Normal::new(mean[j], std[j]).map_err(|e| Error::Invalid(e.to_string()))?;
                *v = n.sample(&mut rng) as f32;
            }
            report.random += 1;
        }
    }
    Ok((parent.with_source_embedding(emb)?, report))
}

fn column_stats(w: &Array2<f32>, rows: &[usize]) -> (Array1<f64>, Array1<f64>) {
    let d = w.ncols();
    let mut mean = Array1::<f64>::zeros(d);
    let mut var = Array1::<f64>::zeros(d);
    if rows.is_empty() {
        return (mean, var);
    }
    for &r in rows {
        for (m, &v) in mean.iter_mut().zip(w.row(r)) {
            *m += v as f64;
        }
    }
    mean /= rows.len() as f64;
    for &r in rows {
        for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(w.row(r)) {
            *s += (v as f64 - m).powi(2);
        }
    }
    var /= rows.len() as f64;
    (mean, var.mapv(f64::sqrt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nmt::params::{init_model, HyperParams};

    fn parent() -> (ModelParams<f32>, Vocabulary) {
        let vocab = Vocabulary::from_tokens(["a", "b", "c", "d", "e", "f"]);
        let m = init_model(
            HyperParams {
                layers: 1,
                d_model: 8,
                heads: 2,
                d_ff: 16,
                src_vocab: vocab.len(),
                tgt_vocab: 9,
                tied_embeddings: false,
            },
            2,
        )
        .unwrap();
        (m, vocab)
    }

    #[test]
    fn identity_transfer_is_noop() {
        let (m, vocab) = parent();
        let emb = extract_source_embedding(&m, &vocab).unwrap();
        let (t, rep) = transfer_init(&m, &emb, &vocab, 1).unwrap();
        assert_eq!(t, m);
        assert_eq!(rep.random, 0);
        assert_eq!(rep.specials, NUM_SPECIALS);
    }

    #[test]
    fn other_components_untouched_and_missing_rows_sampled() {
        let (m, _) = parent();
        let child = Vocabulary::from_tokens(["x", "y", "z", "w", "q"]);
        let mapped_vocab = Vocabulary::from_tokens(["x", "y", "z", "w"]);
        let mut w = Array2::<f32>::zeros((mapped_vocab.len(), 8));
        for r in NUM_SPECIALS..mapped_vocab.len() {
            w.row_mut(r).fill(r as f32);
        }
        let mut flags = vec![true; mapped_vocab.len()];
        flags[NUM_SPECIALS + 3] = false;
        let mapped = EmbeddingMatrix::with_flags(mapped_vocab, w, flags).unwrap();
        let (t, rep) = transfer_init(&m, &mapped, &child, 3).unwrap();
        assert_eq!(
            rep,
            TransferReport {
                specials: 4,
                mapped: 3,
                random: 2
            }
        );
        let e = t.source_embedding();
        assert_eq!(e.nrows(), child.len());
        for id in 0..NUM_SPECIALS {
            assert_eq!(e.row(id), m.source_embedding().row(id));
        }
        assert!(e.row(child.id("y").unwrap()).iter().all(|&v| v == 5.0));
        let src_idx = m.layout().src_emb;
        for (i, (a, b)) in m.tensors().iter().zip(t.tensors()).enumerate() {
            if i != src_idx {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn sampled_rows_follow_mapped_statistics() {
        let (m, _) = parent();
        let mapped_vocab = Vocabulary::from_tokens((0..200).map(|i| format!("m{i}")));
        let mut rng = derived_rng(4, &[]);
        let n = Normal::new(2.0, 0.5).unwrap();
        let w = Array2::from_shape_fn((mapped_vocab.len(), 8), |_| n.sample(&mut rng) as f32);
        let mapped = EmbeddingMatrix::new(mapped_vocab, w).unwrap();
        let child = Vocabulary::from_tokens((0..400).map(|i| format!("u{i}")));
        let (t, rep) = transfer_init(&m, &mapped, &child, 5).unwrap();
        assert_eq!(rep.random, 400);
        let rows: Vec<usize> = (NUM_SPECIALS..child.len()).collect();
        let (mean, std) = column_stats(t.source_embedding(), &rows);
        for j in 0..8 {
            assert!((mean[j] - 2.0).abs() < 0.15, "{}", mean[j]);
            assert!((std[j] - 0.5).abs() < 0.1, "{}", std[j]);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (m, _) = parent();
        let v = Vocabulary::from_tokens(["a"]);
        let mapped = EmbeddingMatrix::new(v.clone(), Array2::zeros((v.len(), 5))).unwrap();
        assert!(transfer_init(&m, &mapped, &v, 1).is_err());
    }
}

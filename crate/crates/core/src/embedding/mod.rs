//! Word embeddings: skip-gram training, the word-vector text format and
//! nearest-neighbor retrieval.

mod neighbors;
mod skipgram;

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub use neighbors::{
    cosine, csls_scores, nearest_neighbors, normalize_rows, similarity, Metric, Neighbor,
    NeighborIndex,
};
pub use skipgram::{train_skipgram, SkipGramConfig, SkipGramReport};

/// A `V x D` matrix with one row per vocabulary entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    vocab: Vocabulary,
    weights: Array2<f32>,
    trained: Vec<bool>,
}

impl EmbeddingMatrix {
    /// All rows are marked trained.
    pub fn new(vocab: Vocabulary, weights: Array2<f32>) -> Result<Self> {
        let n = vocab.len();
        Self::with_flags(vocab, weights, vec![true; n])
    }

    pub fn with_flags(vocab: Vocabulary, weights: Array2<f32>, trained: Vec<bool>) -> Result<Self> {
        if weights.nrows() != vocab.len() || trained.len() != vocab.len() {
            return Err(Error::Dimension(format!(
                "embedding has {} rows and {} flags for a vocabulary of {}",
                weights.nrows(),
                trained.len(),
                vocab.len()
            )));
        }
        Ok(Self {
            vocab,
            weights,
            trained,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn weights(&self) -> &Array2<f32> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Array2<f32> {
        &mut self.weights
    }

    pub fn into_weights(self) -> Array2<f32> {
        self.weights
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn len(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.nrows() == 0
    }

    pub fn row(&self, id: usize) -> ArrayView1<'_, f32> {
        self.weights.row(id)
    }

    pub fn get(&self, token: &str) -> Option<ArrayView1<'_, f32>> {
        self.vocab.id(token).map(|i| self.weights.row(i))
    }

    /// False for rows whose token never occurred in the training stream.
    pub fn is_trained(&self, id: usize) -> bool {
        self.trained[id]
    }

    pub fn trained_flags(&self) -> &[bool] {
        &self.trained
    }

    /// Writes the word-vector text format: a `V D` header, then one
    /// `token v1 .. vD` line per row.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::new();
        let _ = writeln!(text, "{} {}", self.len(), self.dim());
        for (tok, row) in self.vocab.tokens().iter().zip(self.weights.rows()) {
            text.push_str(tok);
            for v in row {
                let _ = write!(text, " {v:e}");
            }
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads the word-vector text format. Special tokens missing from the
    /// file get zero rows flagged untrained.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format(path, 1, "missing `V D` header"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, 1, "malformed `V D` header"))?;
        let &[rows, dim] = dims.as_slice() else {
            return Err(Error::format(path, 1, "header must be `V D`"));
        };

        let mut tokens = Vec::with_capacity(rows);
        let mut values = Vec::with_capacity(rows * dim);
        let mut seen = std::collections::HashSet::new();
        for i in 0..rows {
            let line_no = i + 2;
            let line = lines
                .next()
                .ok_or_else(|| Error::format(path, line_no, format!("expected {rows} rows, found {i}")))?;
            let mut parts = line.split(' ').filter(|s| !s.is_empty());
            let tok = parts
                .next()
                .ok_or_else(|| Error::format(path, line_no, "empty row"))?;
            let before = values.len();
            for p in parts {
                let v: f32 = p
                    .parse()
                    .map_err(|_| Error::format(path, line_no, format!("bad number `{p}`")))?;
                values.push(v);
            }
            if values.len() - before != dim {
                return Err(Error::format(
                    path,
                    line_no,
                    format!("expected {dim} values, found {}", values.len() - before),
                ));
            }
            if !seen.insert(tok) {
                return Err(Error::format(path, line_no, format!("duplicate token `{tok}`")));
            }
            tokens.push(tok.to_string());
        }
        if let Some((extra, _)) = lines.enumerate().find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::format(
                path,
                rows + 2 + extra,
                format!("header declares {rows} rows but more follow"),
            ));
        }

        let vocab = Vocabulary::from_tokens(tokens.iter().cloned());
        let mut weights = Array2::<f32>::zeros((vocab.len(), dim));
        let mut trained = vec![false; vocab.len()];
        for (i, tok) in tokens.iter().enumerate() {
            let id = vocab.id(tok).expect("token inserted above");
            weights
                .row_mut(id)
                .assign(&ArrayView1::from(&values[i * dim..(i + 1) * dim]));
            trained[id] = true;
        }
        Self::with_flags(vocab, weights, trained)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small() -> EmbeddingMatrix {
        let vocab = Vocabulary::from_tokens(["x", "y", "z"]);
        let mut w = Array2::<f32>::zeros((7, 2));
        for (i, mut r) in w.rows_mut().into_iter().enumerate() {
            r.assign(&array![i as f32 * 0.1 + 0.123456, -(i as f32) / 3.0]);
        }
        EmbeddingMatrix::new(vocab, w).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.vec");
        let e = small();
        e.save(&path).unwrap();
        let back = EmbeddingMatrix::load(&path).unwrap();
        assert_eq!(back.vocab(), e.vocab());
        for (a, b) in back.weights().iter().zip(e.weights()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn missing_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.vec");
        std::fs::write(&path, "5 2\na 1 2\nb 1 2\nc 1 2\nd 1 2\n").unwrap();
        let err = EmbeddingMatrix::load(&path).unwrap_err();
        assert!(matches!(err, Error::Format { line: 6, .. }), "{err}");
    }

    #[test]
    fn ragged_row_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.vec");
        std::fs::write(&path, "2 2\na 1 2\nb 1\n").unwrap();
        let err = EmbeddingMatrix::load(&path).unwrap_err();
        assert!(matches!(err, Error::Format { line: 3, .. }), "{err}");
    }

    #[test]
    fn file_without_specials_gets_untrained_special_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.vec");
        std::fs::write(&path, "2 3\nfoo 0.5 -1 2\nbar 0 0 1\n").unwrap();
        let e = EmbeddingMatrix::load(&path).unwrap();
        assert_eq!(e.len(), 6);
        assert!(!e.is_trained(0));
        assert!(e.is_trained(4));
        assert_eq!(e.get("foo").unwrap().to_vec(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn row_count_must_match_vocab() {
        let vocab = Vocabulary::from_tokens(["x"]);
        assert!(EmbeddingMatrix::new(vocab, Array2::zeros((3, 2))).is_err());
    }
}

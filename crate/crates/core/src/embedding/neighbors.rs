use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::EmbeddingMatrix;
use crate::error::{Error, Result};

/// Retrieval score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    /// Cross-domain similarity local scaling with neighborhood size `k`.
    Csls { k: usize },
}

impl Default for Metric {
    fn default() -> Self {
        Metric::Csls { k: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub token: String,
    pub score: f32,
}

pub fn cosine(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f32 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Unit-length copy of every row; zero rows stay zero.
pub fn normalize_rows(m: ArrayView2<f32>) -> Array2<f32> {
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Cosine similarity matrix between the rows of `a` and the rows of `b`.
pub fn similarity(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Array2<f32> {
    normalize_rows(a).dot(&normalize_rows(b).t())
}

/// Mean of the `k` largest values of each row.
fn mean_top_k(sim: ArrayView2<f32>, k: usize) -> Array1<f32> {
    let k = k.min(sim.ncols()).max(1);
    sim.rows()
        .into_iter()
        .map(|row| {
            let mut v = row.to_vec();
            v.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
            v[..k].iter().sum::<f32>() / k as f32
        })
        .collect()
}

/// CSLS matrix from a cosine matrix: `2 cos(x, y) - r(x) - r(y)`, where
/// `r(x)` averages the `k` best cosines of `x` among the columns and `r(y)`
/// averages the `k` best cosines of `y` among the rows.
pub fn csls_scores(sim: ArrayView2<f32>, k: usize) -> Array2<f32> {
    let r_rows = mean_top_k(sim, k);
    let r_cols = mean_top_k(sim.t(), k);
    let mut out = sim.to_owned() * 2.0;
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        row -= r_rows[i];
        row -= &r_cols;
    }
    out
}

/// Precomputed retrieval over the rows of a target embedding.
///
/// For CSLS the target-side penalty `r(y)` is measured against the rows of a
/// query space, so the index needs both spaces.
pub struct NeighborIndex<'a> {
    target: &'a EmbeddingMatrix,
    target_unit: Array2<f32>,
    metric: Metric,
    r_target: Option<Array1<f32>>,
}

impl<'a> NeighborIndex<'a> {
    pub fn new(target: &'a EmbeddingMatrix, metric: Metric, query_space: Option<ArrayView2<f32>>) -> Result<Self> {
        let target_unit = normalize_rows(target.weights().view());
        let r_target = match metric {
            Metric::Cosine => None,
            Metric::Csls { k } => {
                if k == 0 {
                    return Err(Error::Invalid("csls_k must be at least 1".into()));
                }
                let query_space = query_space.ok_or_else(|| {
                    Error::Invalid("CSLS retrieval needs the query space".into())
                })?;
                let sim = target_unit.dot(&normalize_rows(query_space).t());
                Some(mean_top_k(sim.view(), k))
            }
        };
        Ok(Self {
            target,
            target_unit,
            metric,
            r_target,
        })
    }

    /// Scores of `query` against every target row.
    pub fn scores(&self, query: ArrayView1<f32>) -> Result<Array1<f32>> {
        let norm = query.dot(&query).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Invalid("query vector has zero norm".into()));
        }
        if query.len() != self.target.dim() {
            return Err(Error::Dimension(format!(
                "query has dimension {}, embedding {}",
                query.len(),
                self.target.dim()
            )));
        }
        let cos = self.target_unit.dot(&(&query / norm));
        Ok(match (self.metric, &self.r_target) {
            (Metric::Csls { k }, Some(r_t)) => {
                let kk = k.min(cos.len());
                let mut v = cos.to_vec();
                v.select_nth_unstable_by(kk - 1, |a, b| b.total_cmp(a));
                let r_q = v[..kk].iter().sum::<f32>() / kk as f32;
                cos * 2.0 - r_q - r_t
            }
            _ => cos,
        })
    }

    /// The `k` best target rows in descending score order (ties by id).
    pub fn search(&self, query: ArrayView1<f32>, k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        let scores = self.scores(query)?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Ok(order
            .into_iter()
            .take(k)
            .map(|id| Neighbor {
                id,
                token: self.target.vocab().token(id).unwrap_or_default().to_string(),
                score: scores[id],
            })
            .collect())
    }
}

/// Ranks the rows of `target` by similarity to `query`. CSLS requires the
/// space the query comes from.
pub fn nearest_neighbors(
    query: ArrayView1<f32>,
    target: &EmbeddingMatrix,
    k: usize,
    metric: Metric,
    query_space: Option<&EmbeddingMatrix>,
) -> Result<Vec<Neighbor>> {
    NeighborIndex::new(target, metric, query_space.map(|q| q.weights().view()))?.search(query, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocabulary;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn emb(w: Array2<f32>) -> EmbeddingMatrix {
        let n = w.nrows();
        let toks: Vec<String> = (4..n).map(|i| format!("t{i}")).collect();
        EmbeddingMatrix::new(Vocabulary::from_tokens(toks), w).unwrap()
    }

    fn random(n: usize, d: usize, seed: u64) -> Array2<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn query_equal_to_row_ranks_first() {
        let e = emb(random(12, 5, 1));
        let q = e.row(7).to_owned();
        let nn = nearest_neighbors(q.view(), &e, 3, Metric::Cosine, None).unwrap();
        assert_eq!(nn[0].id, 7);
        assert!((nn[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_rows_score_one_and_zero() {
        let e = EmbeddingMatrix::new(
            Vocabulary::specials_only(),
            array![[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]],
        )
        .unwrap();
        let nn = nearest_neighbors(array![1.0, 0.0].view(), &e, 2, Metric::Cosine, None).unwrap();
        assert_eq!(nn[0].id, 0);
        assert_eq!(nn[0].score, 1.0);
        assert_eq!(nn[1].score, 0.0);
    }

    #[test]
    fn zero_query_errors() {
        let e = emb(random(6, 3, 2));
        assert!(nearest_neighbors(array![0.0, 0.0, 0.0].view(), &e, 1, Metric::Cosine, None).is_err());
    }

    #[test]
    fn csls_without_query_space_errors() {
        let e = emb(random(6, 3, 2));
        let q = e.row(4).to_owned();
        assert!(nearest_neighbors(q.view(), &e, 1, Metric::Csls { k: 2 }, None).is_err());
    }

    /// Direct transcription of the CSLS definition, one pair at a time.
    fn brute_csls(x: &[f32], src: &Array2<f32>, tgt: &Array2<f32>, k: usize) -> Vec<f64> {
        let cos = |a: &[f32], b: &[f32]| -> f64 {
            let dot: f64 = a.iter().zip(b).map(|(p, q)| *p as f64 * *q as f64).sum();
            let na: f64 = a.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let topk_mean = |v: &[f32], space: &Array2<f32>| -> f64 {
            let mut c: Vec<f64> = space.rows().into_iter().map(|r| cos(v, r.as_slice().unwrap())).collect();
            c.sort_by(|a, b| b.partial_cmp(a).unwrap());
            c[..k].iter().sum::<f64>() / k as f64
        };
        let r_x = topk_mean(x, tgt);
        tgt.rows()
            .into_iter()
            .map(|y| {
                let y = y.as_slice().unwrap();
                2.0 * cos(x, y) - r_x - topk_mean(y, src)
            })
            .collect()
    }

    #[test]
    fn csls_matches_brute_force() {
        let src = emb(random(20, 6, 3));
        let tgt = emb(random(20, 6, 4));
        let k = 4;
        let index = NeighborIndex::new(&tgt, Metric::Csls { k }, Some(src.weights().view())).unwrap();
        for q in 0..20 {
            let x = src.row(q).to_owned();
            let expected = brute_csls(x.as_slice().unwrap(), src.weights(), tgt.weights(), k);
            let got = index.scores(x.view()).unwrap();
            for (a, b) in got.iter().zip(&expected) {
                assert!((*a as f64 - b).abs() < 1e-5);
            }
            let mut order: Vec<usize> = (0..20).collect();
            order.sort_by(|&a, &b| expected[b].partial_cmp(&expected[a]).unwrap());
            let ranked: Vec<usize> = index.search(x.view(), 20).unwrap().iter().map(|n| n.id).collect();
            assert_eq!(ranked[0], order[0]);
        }
    }

    #[test]
    fn csls_matrix_agrees_with_index() {
        let src = emb(random(15, 4, 5));
        let tgt = emb(random(11, 4, 6));
        let sim = similarity(src.weights().view(), tgt.weights().view());
        let m = csls_scores(sim.view(), 3);
        let index = NeighborIndex::new(&tgt, Metric::Csls { k: 3 }, Some(src.weights().view())).unwrap();
        for q in 0..15 {
            let s = index.scores(src.row(q)).unwrap();
            for j in 0..11 {
                assert!((s[j] - m[[q, j]]).abs() < 1e-5);
            }
        }
    }
}

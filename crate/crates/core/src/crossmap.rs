//! Cross-lingual linear maps between a child embedding space and a parent
//! embedding space: seed dictionaries, Procrustes fitting, self-learning
//! refinement with mutual nearest neighbors.

use std::collections::{HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::{csls_scores, normalize_rows, similarity, EmbeddingMatrix, Metric};
use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, NUM_SPECIALS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DictionarySource {
    Digits,
    Punctuation,
    Identical,
    MutualNn,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Constraint {
    #[default]
    Orthogonal,
    Unconstrained,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Constraint::Orthogonal => "orthogonal",
            Constraint::Unconstrained => "unconstrained",
        })
    }
}

impl FromStr for Constraint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orthogonal" => Ok(Constraint::Orthogonal),
            "unconstrained" => Ok(Constraint::Unconstrained),
            other => Err(Error::Invalid(format!("unknown constraint `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedMode {
    Digits,
    /// Tokens made only of punctuation characters.
    Punctuation,
    Identical,
}

/// Translation pairs `(child token, parent token)` used to fit a map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedDictionary {
    pairs: Vec<(String, String)>,
    source: DictionarySource,
}

impl SeedDictionary {
    /// Drops duplicate pairs, keeping first occurrences.
    pub fn new(pairs: Vec<(String, String)>, source: DictionarySource) -> Self {
        let mut seen = HashSet::new();
        let pairs = pairs.into_iter().filter(|p| seen.insert(p.clone())).collect();
        Self { pairs, source }
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn source(&self) -> DictionarySource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks that every pair refers to tokens of the two vocabularies.
    pub fn validate(&self, child: &Vocabulary, parent: &Vocabulary) -> Result<()> {
        for (c, p) in &self.pairs {
            if !child.contains(c) {
                return Err(Error::Invalid(format!("dictionary child token `{c}` not in vocabulary")));
            }
            if !parent.contains(p) {
                return Err(Error::Invalid(format!("dictionary parent token `{p}` not in vocabulary")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::new();
        for (c, p) in &self.pairs {
            let _ = writeln!(text, "{c}\t{p}");
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (c, p) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(path, i + 1, "expected `child<TAB>parent`"))?;
            pairs.push((c.to_string(), p.to_string()));
        }
        Ok(Self::new(pairs, DictionarySource::File))
    }
}

/// A `D x D` map from child space into parent space, applied as `W x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    w: Array2<f64>,
    constraint: Constraint,
}

impl LinearMap {
    pub fn new(w: Array2<f64>, constraint: Constraint) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(Error::Dimension(format!("map must be square, got {:?}", w.dim())));
        }
        Ok(Self { w, constraint })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            w: Array2::eye(dim),
            constraint: Constraint::Orthogonal,
        }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn constraint(&self) -> Constraint {
        self.constraint
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    /// `‖WᵀW − I‖_F`.
    pub fn orthogonality_error(&self) -> f64 {
        let g = self.w.t().dot(&self.w) - Array2::<f64>::eye(self.dim());
        g.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = format!("{} {}\n", self.dim(), self.constraint);
        for row in self.w.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            text.push_str(&line.join(" "));
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let mut parts = header.split_whitespace();
        let (Some(d), Some(c), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::format(path, 1, "expected `D constraint`"));
        };
        let d: usize = d
            .parse()
            .map_err(|_| Error::format(path, 1, "bad dimension"))?;
        let constraint: Constraint = c
            .parse()
            .map_err(|e: Error| Error::format(path, 1, e.to_string()))?;
        let mut w = Array2::zeros((d, d));
        for r in 0..d {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(path, r + 2, format!("expected {d} rows")))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(path, r + 2, "bad number"))?;
            if vals.len() != d {
                return Err(Error::format(path, r + 2, format!("expected {d} values")));
            }
            w.row_mut(r).assign(&Array1::from(vals));
        }
        Self::new(w, constraint)
    }
}

fn is_digit_token(tok: &str) -> bool {
    let stem = tok.strip_suffix(crate::vocab::DEFAULT_SEPARATOR).unwrap_or(tok);
    !stem.is_empty() && stem.chars().all(|c| c.is_ascii_digit())
}

fn is_punctuation_token(tok: &str) -> bool {
    let stem = tok.strip_suffix(crate::vocab::DEFAULT_SEPARATOR).unwrap_or(tok);
    !stem.is_empty() && stem.chars().all(|c| c.is_ascii_punctuation())
}

/// Pairs identical surface forms (all of them, or only digit or punctuation strings) found
/// in both vocabularies, ordered by child frequency rank.
pub fn induce_seed_dictionary(
    child: &Vocabulary,
    parent: &Vocabulary,
    mode: SeedMode,
) -> Result<SeedDictionary> {
    if child.is_empty() || parent.is_empty() {
        return Err(Error::Invalid("seed induction needs nonempty vocabularies".into()));
    }
    let pairs: Vec<(String, String)> = child
        .content_tokens()
        .iter()
        .filter(|t| parent.contains(t))
        .filter(|t| match mode {
            SeedMode::Identical => true,
            SeedMode::Digits => is_digit_token(t),
            SeedMode::Punctuation => is_punctuation_token(t),
        })
        .map(|t| (t.clone(), t.clone()))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyDictionary {
            mode: format!("{mode:?}").to_lowercase(),
        });
    }
    let source = match mode {
        SeedMode::Digits => DictionarySource::Digits,
        SeedMode::Identical => DictionarySource::Identical,
        SeedMode::Punctuation => DictionarySource::Punctuation,
    };
    Ok(SeedDictionary::new(pairs, source))
}

/// Length-normalizes rows, mean-centers them, and length-normalizes again.
/// The mean is taken over trained content rows.
pub fn normalize_embedding(e: &EmbeddingMatrix) -> EmbeddingMatrix {
    let mut w = normalize_rows(e.weights().view());
    let rows: Vec<usize> = (NUM_SPECIALS..e.len()).filter(|&i| e.is_trained(i)).collect();
    if !rows.is_empty() {
        let mean = w.select(Axis(0), &rows).mean_axis(Axis(0)).expect("nonempty");
        for i in rows {
            let mut r = w.row_mut(i);
            r -= &mean;
        }
    }
    let w = normalize_rows(w.view());
    EmbeddingMatrix::with_flags(e.vocab().clone(), w, e.trained_flags().to_vec())
        .expect("same shape")
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn stacked_rows(e: &EmbeddingMatrix, ids: &[usize]) -> Array2<f64> {
    e.weights().select(Axis(0), ids).mapv(f64::from)
}

/// Solves `min Σ ‖W x − y‖²` for row-stacked `x` and `y`. An unconstrained
/// `W` may be rectangular when the two spaces differ in dimension.
pub fn solve_map(x: &Array2<f64>, y: &Array2<f64>, constraint: Constraint) -> Result<Array2<f64>> {
    let same = match constraint {
        Constraint::Orthogonal => x.dim() == y.dim(),
        Constraint::Unconstrained => x.nrows() == y.nrows(),
    };
    if !same {
        return Err(Error::Dimension(format!("{:?} vs {:?}", x.dim(), y.dim())));
    }
    match constraint {
        Constraint::Orthogonal => {
            let m = to_dmatrix(&y.t().dot(x));
            let svd = m.svd(true, true);
            let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
            Ok(from_dmatrix(&(u * vt)))
        }
        Constraint::Unconstrained => {
            // X Wᵀ = Y in the least-squares sense.
            let svd = to_dmatrix(x).svd(true, true);
            let wt = svd
                .solve(&to_dmatrix(y), 1e-12)
                .map_err(|e| Error::Invalid(format!("least squares failed: {e}")))?;
            Ok(from_dmatrix(&wt.transpose()))
        }
    }
}

/// Fits a child→parent map on the dictionary pairs. Rows are used as given;
/// call [`normalize_embedding`] on both spaces first for the standard
/// normalize/center/normalize preprocessing.
pub fn fit_mapping(
    child: &EmbeddingMatrix,
    parent: &EmbeddingMatrix,
    dict: &SeedDictionary,
    constraint: Constraint,
) -> Result<LinearMap> {
    if child.dim() != parent.dim() {
        return Err(Error::Dimension(format!(
            "child dimension {} != parent dimension {}",
            child.dim(),
            parent.dim()
        )));
    }
    if dict.is_empty() {
        return Err(Error::Invalid("cannot fit a map on an empty dictionary".into()));
    }
    let mut cid = Vec::with_capacity(dict.len());
    let mut pid = Vec::with_capacity(dict.len());
    for (c, p) in dict.pairs() {
        match (child.vocab().id(c), parent.vocab().id(p)) {
            (Some(a), Some(b)) => {
                cid.push(a);
                pid.push(b);
            }
            _ => {
                return Err(Error::Invalid(format!(
                    "dictionary pair ({c}, {p}) missing from the embeddings"
                )))
            }
        }
    }
    if cid.len() < child.dim() {
        warn!(
            "fitting a {}-dimensional map on only {} dictionary pairs",
            child.dim(),
            cid.len()
        );
    }
    let x = stacked_rows(child, &cid);
    let y = stacked_rows(parent, &pid);
    LinearMap::new(solve_map(&x, &y, constraint)?, constraint)
}

/// Applies `W` to every child row.
pub fn map_embedding(w: &LinearMap, child: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if w.dim() != child.dim() {
        return Err(Error::Dimension(format!(
            "map dimension {} != embedding dimension {}",
            w.dim(),
            child.dim()
        )));
    }
    let mapped = child.weights().mapv(f64::from).dot(&w.matrix().t()).mapv(|v| v as f32);
    EmbeddingMatrix::with_flags(child.vocab().clone(), mapped, child.trained_flags().to_vec())
}

/// Up to `max_rank` most frequent trained content ids.
fn top_ids(e: &EmbeddingMatrix, max_rank: usize) -> Vec<usize> {
    (NUM_SPECIALS..e.len())
        .filter(|&i| e.is_trained(i))
        .take(max_rank)
        .collect()
}

fn retrieval_scores(sim: Array2<f32>, metric: Metric) -> Array2<f32> {
    match metric {
        Metric::Cosine => sim,
        Metric::Csls { k } => csls_scores(sim.view(), k),
    }
}

fn argmax_rows(m: &Array2<f32>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

/// Induces a dictionary of mutual nearest neighbors between the mapped child
/// space and the parent space, both restricted to their `max_rank` most
/// frequent tokens.
pub fn mutual_nn_dictionary(
    child: &EmbeddingMatrix,
    parent: &EmbeddingMatrix,
    w: &LinearMap,
    metric: Metric,
    max_rank: usize,
) -> Result<SeedDictionary> {
    let mapped = map_embedding(w, child)?;
    let cid = top_ids(&mapped, max_rank);
    let pid = top_ids(parent, max_rank);
    if cid.is_empty() || pid.is_empty() {
        return Ok(SeedDictionary::new(vec![], DictionarySource::MutualNn));
    }
    let xs = mapped.weights().select(Axis(0), &cid);
    let ys = parent.weights().select(Axis(0), &pid);
    let scores = retrieval_scores(similarity(xs.view(), ys.view()), metric);
    let forward = argmax_rows(&scores);
    let backward = argmax_rows(&scores.t().to_owned());
    let pairs = forward
        .iter()
        .enumerate()
        .filter(|&(i, &j)| backward[j] == i)
        .map(|(i, &j)| {
            (
                child.vocab().tokens()[cid[i]].clone(),
                parent.vocab().tokens()[pid[j]].clone(),
            )
        })
        .collect();
    Ok(SeedDictionary::new(pairs, DictionarySource::MutualNn))
}

/// Per-iteration trace of a refinement run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefineLog {
    pub dictionary_sizes: Vec<usize>,
}

/// Self-learning: map, induce a mutual-NN dictionary, refit, repeat.
/// Stops early once the induced dictionary stops changing.
pub fn refine_mapping(
    child: &EmbeddingMatrix,
    parent: &EmbeddingMatrix,
    w0: &LinearMap,
    iterations: usize,
    metric: Metric,
    max_rank: usize,
) -> Result<(LinearMap, SeedDictionary, RefineLog)> {
    let mut w = w0.clone();
    let mut dict = SeedDictionary::new(vec![], DictionarySource::MutualNn);
    let mut log = RefineLog::default();
    for it in 0..iterations {
        let next = mutual_nn_dictionary(child, parent, &w, metric, max_rank)?;
        log.dictionary_sizes.push(next.len());
        if next.is_empty() {
            warn!("refinement iteration {it}: induced dictionary is empty; keeping previous map");
            break;
        }
        if next == dict {
            break;
        }
        w = fit_mapping(child, parent, &next, w0.constraint())?;
        dict = next;
    }
    Ok((w, dict, log))
}

/// Best parent token for each child id under the map, scored over the
/// parent's `max_rank` most frequent tokens.
pub fn translate_ids(
    child: &EmbeddingMatrix,
    parent: &EmbeddingMatrix,
    w: &LinearMap,
    child_ids: &[usize],
    metric: Metric,
    max_rank: usize,
) -> Result<Vec<usize>> {
    let mapped = map_embedding(w, child)?;
    let pid = top_ids(parent, max_rank);
    let queries = top_ids(&mapped, max_rank.max(child_ids.iter().copied().max().unwrap_or(0) + 1));
    let ys = parent.weights().select(Axis(0), &pid);
    let xs = mapped.weights().select(Axis(0), &queries);
    let scores = retrieval_scores(similarity(xs.view(), ys.view()), metric);
    let best = argmax_rows(&scores);
    let pos: HashMap<usize, usize> = queries.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    child_ids
        .iter()
        .map(|id| {
            pos.get(id)
                .map(|&i| pid[best[i]])
                .ok_or_else(|| Error::Invalid(format!("child id {id} is not a trained content row")))
        })
        .collect()
}

/// Fraction of `(child, parent)` gold pairs whose child token translates to
/// the gold parent token.
pub fn precision_at_1(
    child: &EmbeddingMatrix,
    parent: &EmbeddingMatrix,
    w: &LinearMap,
    gold: &[(String, String)],
    metric: Metric,
    max_rank: usize,
) -> Result<f64> {
    let pairs: Vec<(usize, &str)> = gold
        .iter()
        .filter_map(|(c, p)| child.vocab().id(c).map(|id| (id, p.as_str())))
        .filter(|(id, _)| child.is_trained(*id))
        .collect();
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let ids: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let hyp = translate_ids(child, parent, w, &ids, metric, max_rank)?;
    let hits = hyp
        .iter()
        .zip(&pairs)
        .filter(|(h, (_, p))| parent.vocab().token(**h) == Some(*p))
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

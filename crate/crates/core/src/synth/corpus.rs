use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Provenance {
    #[default]
    Real,
    Synthetic,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Provenance::Real),
            "synthetic" => Ok(Provenance::Synthetic),
            other => Err(Error::Invalid(format!("unknown provenance `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub provenance: Provenance,
}

impl SentencePair {
    pub fn new(source: Vec<String>, target: Vec<String>) -> Self {
        Self {
            source,
            target,
            provenance: Provenance::Real,
        }
    }
}

/// Aligned source/target sentences. No pair has an empty target side.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pairs: Vec<SentencePair>,
}

fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(String::from).collect()
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>) -> Result<Self> {
        if let Some(i) = pairs.iter().position(|p| p.target.is_empty()) {
            return Err(Error::Invalid(format!("pair {i} has an empty target side")));
        }
        Ok(Self { pairs })
    }

    /// Builds a real corpus from whitespace-tokenized line pairs.
    pub fn from_lines<S: AsRef<str>>(sources: &[S], targets: &[S]) -> Result<Self> {
        if sources.len() != targets.len() {
            return Err(Error::Invalid(format!(
                "{} source lines vs {} target lines",
                sources.len(),
                targets.len()
            )));
        }
        Self::new(
            sources
                .iter()
                .zip(targets)
                .map(|(s, t)| SentencePair::new(tokenize(s.as_ref()), tokenize(t.as_ref())))
                .collect(),
        )
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn into_pairs(self) -> Vec<SentencePair> {
        self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|p| p.source.as_slice())
    }

    pub fn targets(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|p| p.target.as_slice())
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.pairs.iter().filter(|p| p.provenance == provenance).count()
    }

    /// Applies `f` to every source sentence.
    pub fn map_sources(&self, mut f: impl FnMut(&[String]) -> Vec<String>) -> Self {
        Self {
            pairs: self
                .pairs
                .iter()
                .map(|p| SentencePair {
                    source: f(&p.source),
                    target: p.target.clone(),
                    provenance: p.provenance,
                })
                .collect(),
        }
    }

    /// Applies `f` to every target sentence.
    pub fn map_targets(&self, mut f: impl FnMut(&[String]) -> Vec<String>) -> Result<Self> {
        Self::new(
            self.pairs
                .iter()
                .map(|p| SentencePair {
                    source: p.source.clone(),
                    target: f(&p.target),
                    provenance: p.provenance,
                })
                .collect(),
        )
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            pairs: self.pairs[range].to_vec(),
        }
    }

    pub fn concat(&self, other: &ParallelCorpus) -> Self {
        let mut pairs = self.pairs.clone();
        pairs.extend(other.pairs.iter().cloned());
        Self { pairs }
    }

    fn sidecar(prefix: &Path, ext: &str) -> PathBuf {
        let mut s = prefix.as_os_str().to_owned();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    }

    /// Writes `prefix.src`, `prefix.tgt` and `prefix.prov`.
    pub fn save(&self, prefix: impl AsRef<Path>) -> Result<()> {
        let prefix = prefix.as_ref();
        let join = |f: &dyn Fn(&SentencePair) -> String| -> String {
            let mut s: String = self.pairs.iter().map(|p| f(p) + "\n").collect();
            if self.pairs.is_empty() {
                s.clear();
            }
            s
        };
        for (ext, text) in [
            ("src", join(&|p| p.source.join(" "))),
            ("tgt", join(&|p| p.target.join(" "))),
            ("prov", join(&|p| p.provenance.to_string())),
        ] {
            let path = Self::sidecar(prefix, ext);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads `prefix.src`/`prefix.tgt`; `prefix.prov` is optional and
    /// defaults every pair to real.
    pub fn load(prefix: impl AsRef<Path>) -> Result<Self> {
        let prefix = prefix.as_ref();
        let read = |ext: &str| -> Result<Vec<String>> {
            let path = Self::sidecar(prefix, ext);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Ok(text.lines().map(String::from).collect())
        };
        let src = read("src")?;
        let tgt = read("tgt")?;
        if src.len() != tgt.len() {
            return Err(Error::format(
                Self::sidecar(prefix, "tgt"),
                src.len().min(tgt.len()) + 1,
                format!("{} source lines vs {} target lines", src.len(), tgt.len()),
            ));
        }
        let prov_path = Self::sidecar(prefix, "prov");
        let prov: Vec<Provenance> = if prov_path.exists() {
            let text = std::fs::read_to_string(&prov_path).map_err(|e| Error::io(&prov_path, e))?;
            let prov = text
                .lines()
                .enumerate()
                .map(|(i, l)| l.parse().map_err(|e: Error| Error::format(&prov_path, i + 1, e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if prov.len() != src.len() {
                return Err(Error::format(&prov_path, prov.len() + 1, "provenance line count mismatch"));
            }
            prov
        } else {
            vec![Provenance::Real; src.len()]
        };
        let mut pairs = Vec::with_capacity(src.len());
        for (i, ((s, t), p)) in src.iter().zip(&tgt).zip(prov).enumerate() {
            let target = tokenize(t);
            if target.is_empty() {
                return Err(Error::format(Self::sidecar(prefix, "tgt"), i + 1, "empty target sentence"));
            }
            pairs.push(SentencePair {
                source: tokenize(s),
                target,
                provenance: p,
            });
        }
        Ok(Self { pairs })
    }
}

/// Reads one whitespace-tokenized sentence per line.
pub fn read_sentences(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(tokenize).collect())
}

pub fn write_sentences<S: AsRef<str>>(path: impl AsRef<Path>, sentences: &[Vec<S>]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for s in sentences {
        let line: Vec<&str> = s.iter().map(AsRef::as_ref).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_target_rejected() {
        assert!(ParallelCorpus::from_lines(&["a b"], &[""]).is_err());
    }

    #[test]
    fn file_round_trip_with_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("train");
        let mut pairs = ParallelCorpus::from_lines(&["a b", "c"], &["x", "y z"]).unwrap().into_pairs();
        pairs[1].provenance = Provenance::Synthetic;
        let c = ParallelCorpus::new(pairs).unwrap();
        c.save(&prefix).unwrap();
        assert_eq!(std::fs::read_to_string(dir.path().join("train.prov")).unwrap(), "real\nsynthetic\n");
        assert_eq!(ParallelCorpus::load(&prefix).unwrap(), c);
    }

    #[test]
    fn misaligned_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("x");
        std::fs::write(dir.path().join("x.src"), "a\nb\n").unwrap();
        std::fs::write(dir.path().join("x.tgt"), "a\n").unwrap();
        assert!(ParallelCorpus::load(&prefix).is_err());
    }
}

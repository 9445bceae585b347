//! Word-order and lexical noise for parent source sentences: deletion, local
//! permutation and filler insertion, applied in that order.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Insertion probability per gap.
    pub p_ins: f64,
    /// Inserted tokens are drawn from this many most frequent tokens.
    pub v_ins: usize,
    /// Deletion probability per original token.
    pub p_del: f64,
    /// Maximum permutation distance in tokens.
    pub d_per: usize,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            p_ins: 0.1,
            v_ins: 50,
            p_del: 0.1,
            d_per: 3,
            seed: 1,
        }
    }
}

impl NoiseSpec {
    pub fn identity() -> Self {
        Self {
            p_ins: 0.0,
            v_ins: 0,
            p_del: 0.0,
            d_per: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_ins", self.p_ins), ("p_del", self.p_del)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Output of [`inject_noise_traced`].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseOutcome<T> {
    pub tokens: Vec<T>,
    /// Original indices that survived deletion, in original order.
    pub kept: Vec<usize>,
    /// `order[p]` is the post-deletion index placed at position `p` by the
    /// permutation step.
    pub order: Vec<usize>,
    /// Output positions holding inserted filler.
    pub inserted: Vec<usize>,
}

impl<T> NoiseOutcome<T> {
    pub fn deleted(&self, original_len: usize) -> usize {
        original_len - self.kept.len()
    }
}

pub fn inject_noise<T: Clone, R: Rng + ?Sized>(
    sentence: &[T],
    spec: &NoiseSpec,
    vocab_by_freq: &[T],
    rng: &mut R,
) -> Result<Vec<T>> {
    inject_noise_traced(sentence, spec, vocab_by_freq, rng).map(|o| o.tokens)
}

pub fn inject_noise_traced<T: Clone, R: Rng + ?Sized>(
    sentence: &[T],
    spec: &NoiseSpec,
    vocab_by_freq: &[T],
    rng: &mut R,
) -> Result<NoiseOutcome<T>> {
    if sentence.is_empty() {
        return Err(Error::Invalid("cannot add noise to an empty sentence".into()));
    }
    spec.validate()?;

    let mut kept: Vec<usize> = (0..sentence.len())
        .filter(|_| !(spec.p_del > 0.0 && rng.random_bool(spec.p_del)))
        .collect();
    if kept.is_empty() {
        kept.push(rng.random_range(0..sentence.len()));
    }

    let mut keyed: Vec<(f64, usize)> = (0..kept.len())
        .map(|i| {
            let jitter = if spec.d_per > 0 {
                rng.random_range(0.0..=spec.d_per as f64)
            } else {
                0.0
            };
            (i as f64 + jitter, i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    let order: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();

    let v_ins = if spec.v_ins > vocab_by_freq.len() {
        warn!(
            "v_ins = {} exceeds the {} available tokens; clamping",
            spec.v_ins,
            vocab_by_freq.len()
        );
        vocab_by_freq.len()
    } else {
        spec.v_ins
    };
    let can_insert = spec.p_ins > 0.0 && v_ins > 0;
    let mut tokens = Vec::with_capacity(order.len() * 2 + 1);
    let mut inserted = Vec::new();
    let mut maybe_insert = |tokens: &mut Vec<T>, rng: &mut R| {
        if can_insert && rng.random_bool(spec.p_ins) {
            inserted.push(tokens.len());
            tokens.push(vocab_by_freq[rng.random_range(0..v_ins)].clone());
        }
    };
    for &i in &order {
        maybe_insert(&mut tokens, rng);
        tokens.push(sentence[kept[i]].clone());
    }
    maybe_insert(&mut tokens, rng);

    Ok(NoiseOutcome {
        tokens,
        kept,
        order,
        inserted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derived_rng;
    use proptest::prelude::*;

    fn words(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    fn fillers() -> Vec<String> {
        (0..100).map(|i| format!("f{i}")).collect()
    }

    #[test]
    fn identity_spec_is_noop() {
        let s = words(9);
        let mut rng = derived_rng(1, &[]);
        assert_eq!(inject_noise(&s, &NoiseSpec::identity(), &fillers(), &mut rng).unwrap(), s);
    }

    #[test]
    fn full_deletion_keeps_one() {
        let s = words(5);
        let spec = NoiseSpec {
            p_ins: 0.0,
            p_del: 1.0,
            d_per: 0,
            ..NoiseSpec::identity()
        };
        for seed in 0..20 {
            let out = inject_noise(&s, &spec, &fillers(), &mut derived_rng(seed, &[])).unwrap();
            assert_eq!(out.len(), 1);
            assert!(s.contains(&out[0]));
        }
    }

    #[test]
    fn empty_sentence_errors() {
        let s: Vec<String> = vec![];
        assert!(inject_noise(&s, &NoiseSpec::default(), &fillers(), &mut derived_rng(0, &[])).is_err());
    }

    #[test]
    fn invalid_probability_rejected() {
        let spec = NoiseSpec {
            p_del: 1.5,
            ..NoiseSpec::default()
        };
        assert!(inject_noise(&words(3), &spec, &fillers(), &mut derived_rng(0, &[])).is_err());
    }

    #[test]
    fn v_ins_is_clamped() {
        let spec = NoiseSpec {
            p_ins: 1.0,
            v_ins: 500,
            ..NoiseSpec::identity()
        };
        let pool = vec!["only".to_string()];
        let out = inject_noise(&words(3), &spec, &pool, &mut derived_rng(0, &[])).unwrap();
        assert_eq!(out.iter().filter(|t| *t == "only").count(), 4);
    }

    proptest! {
        #[test]
        fn displacement_and_filler_bounds(len in 1usize..40, seed in any::<u64>(), d in 0usize..6) {
            let s = words(len);
            let spec = NoiseSpec { p_ins: 0.3, v_ins: 7, p_del: 0.2, d_per: d, seed };
            let pool = fillers();
            let out = inject_noise_traced(&s, &spec, &pool, &mut derived_rng(seed, &[])).unwrap();
            for (p, &i) in out.order.iter().enumerate() {
                prop_assert!(p.abs_diff(i) <= d);
            }
            for &pos in &out.inserted {
                prop_assert!(pool[..7].contains(&out.tokens[pos]));
            }
            prop_assert_eq!(out.tokens.len(), out.kept.len() + out.inserted.len());
        }

        #[test]
        fn deterministic(seed in any::<u64>()) {
            let s = words(12);
            let spec = NoiseSpec::default();
            let a = inject_noise(&s, &spec, &fillers(), &mut derived_rng(seed, &[3])).unwrap();
            let b = inject_noise(&s, &spec, &fillers(), &mut derived_rng(seed, &[3])).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

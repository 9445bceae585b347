use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::vocab::{build_vocab, Vocabulary, NUM_SPECIALS};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Frequent-word subsampling threshold; `None` disables subsampling.
    pub subsample: Option<f64>,
    pub start_lr: f32,
    pub end_lr: f32,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            window: 5,
            negatives: 5,
            epochs: 5,
            seed: 1,
            subsample: None,
            start_lr: 0.025,
            end_lr: 0.0001,
        }
    }
}

/// Mean negative-sampling loss per (center, context) pair. Entry 0 is
/// measured on the initial vectors, entry `e` during epoch `e`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkipGramReport {
    pub epoch_losses: Vec<f64>,
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f32) -> f64 {
    let x = x as f64;
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

struct Trainer<'a> {
    dim: usize,
    input: Vec<f32>,
    output: Vec<f32>,
    neg_ids: Vec<usize>,
    neg_dist: WeightedIndex<f64>,
    cfg: &'a SkipGramConfig,
}

impl Trainer<'_> {
    /// One (center, context) example; returns its loss before the update.
    fn step(&mut self, center: usize, context: usize, lr: f32, rng: &mut ChaCha8Rng, update: bool) -> f64 {
        let d = self.dim;
        let mut grad_in = vec![0.0f32; d];
        let mut loss = 0.0f64;
        let in_off = center * d;
        for n in 0..=self.cfg.negatives {
            let (target, label) = if n == 0 {
                (context, 1.0f32)
            } else {
                let t = self.neg_ids[self.neg_dist.sample(rng)];
                if t == context {
                    continue;
                }
                (t, 0.0)
            };
            let out_off = target * d;
            let score: f32 = (0..d)
                .map(|k| self.input[in_off + k] * self.output[out_off + k])
                .sum();
            loss -= if label > 0.5 {
                log_sigmoid(score)
            } else {
                log_sigmoid(-score)
            };
            if update {
                let g = (label - sigmoid(score)) * lr;
                for k in 0..d {
                    grad_in[k] += g * self.output[out_off + k];
                    self.output[out_off + k] += g * self.input[in_off + k];
                }
            }
        }
        if update {
            for k in 0..d {
                self.input[in_off + k] += grad_in[k];
            }
        }
        loss
    }
}

/// Skip-gram with negative sampling, single-threaded and deterministic for a
/// fixed seed.
///
/// When `vocab` is `None` it is built from the corpus. Tokens outside the
/// vocabulary are skipped; vocabulary rows that never occur keep their
/// initialization and are flagged untrained.
pub fn train_skipgram<S: AsRef<str>>(
    corpus: &[Vec<S>],
    vocab: Option<&Vocabulary>,
    cfg: &SkipGramConfig,
) -> Result<(EmbeddingMatrix, SkipGramReport)> {
    if cfg.dim == 0 {
        return Err(Error::Invalid("embedding dimension must be at least 1".into()));
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => build_vocab(corpus.iter().map(Vec::as_slice), None),
    };
    let sentences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| {
            s.iter()
                .filter_map(|t| vocab.id(t.as_ref()))
                .filter(|&id| id >= NUM_SPECIALS)
                .collect::<Vec<_>>()
        })
        .filter(|s| !s.is_empty())
        .collect();
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus("skip-gram training corpus has no in-vocabulary tokens"));
    }

    let v = vocab.len();
    let d = cfg.dim;
    let mut counts = vec![0u64; v];
    for s in &sentences {
        for &id in s {
            counts[id] += 1;
        }
    }
    let total_tokens: u64 = counts.iter().sum();
    let neg_ids: Vec<usize> = (0..v).filter(|&i| counts[i] > 0).collect();
    let neg_dist = WeightedIndex::new(neg_ids.iter().map(|&i| (counts[i] as f64).powf(0.75)))
        .map_err(|e| Error::Invalid(format!("negative sampling table: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let half = 0.5 / d as f32;
    let input: Vec<f32> = (0..v * d).map(|_| rng.random_range(-half..=half)).collect();

    let mut trainer = Trainer {
        dim: d,
        input,
        output: vec![0.0; v * d],
        neg_ids,
        neg_dist,
        cfg,
    };

    let keep_prob: Vec<f64> = counts
        .iter()
        .map(|&c| match cfg.subsample {
            Some(t) if c > 0 => {
                let f = c as f64 / total_tokens as f64;
                ((t / f).sqrt() + t / f).min(1.0)
            }
            _ => 1.0,
        })
        .collect();

    let mut report = SkipGramReport::default();
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    report
        .epoch_losses
        .push(run_pass(&mut trainer, &sentences, &keep_prob, &mut eval_rng, None));

    let total_steps = (cfg.epochs as u64 * total_tokens).max(1) as f64;
    let mut processed = 0u64;
    for _ in 0..cfg.epochs {
        let loss = run_pass(
            &mut trainer,
            &sentences,
            &keep_prob,
            &mut rng,
            Some((&mut processed, total_steps)),
        );
        report.epoch_losses.push(loss);
    }

    let trained: Vec<bool> = counts.iter().map(|&c| c > 0 && cfg.epochs > 0).collect();
    let weights = Array2::from_shape_vec((v, d), trainer.input).expect("shape");
    Ok((EmbeddingMatrix::with_flags(vocab, weights, trained)?, report))
}

/// One pass over the corpus. With `schedule` set, vectors are updated and
/// the learning rate decays linearly over `processed / total`.
fn run_pass(
    trainer: &mut Trainer<'_>,
    sentences: &[Vec<usize>],
    keep_prob: &[f64],
    rng: &mut ChaCha8Rng,
    mut schedule: Option<(&mut u64, f64)>,
) -> f64 {
    let window = trainer.cfg.window;
    let (start, end) = (trainer.cfg.start_lr, trainer.cfg.end_lr);
    let mut loss_sum = 0.0;
    let mut pairs = 0u64;
    let mut kept = Vec::new();
    for sent in sentences {
        kept.clear();
        kept.extend(
            sent.iter()
                .copied()
                .filter(|&id| keep_prob[id] >= 1.0 || rng.random::<f64>() < keep_prob[id]),
        );
        for (i, &center) in kept.iter().enumerate() {
            let lr = match &schedule {
                Some((processed, total)) => {
                    let frac = (**processed as f64 / total).min(1.0) as f32;
                    (start - (start - end) * frac).max(end)
                }
                None => 0.0,
            };
            let lo = i.saturating_sub(window);
            let hi = (i + window + 1).min(kept.len());
            for (j, &context) in kept.iter().enumerate().take(hi).skip(lo) {
                if j == i {
                    continue;
                }
                loss_sum += trainer.step(center, context, lr, rng, schedule.is_some());
                pairs += 1;
            }
            if let Some((processed, _)) = schedule.as_mut() {
                **processed += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        loss_sum / pairs as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine;

    /// Two disjoint topic clusters: tokens within a cluster share sentences,
    /// tokens across clusters never do.
    fn cluster_corpus(n: usize, seed: u64) -> Vec<Vec<String>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let prefix = if rng.random_bool(0.5) { "x" } else { "y" };
                (0..8)
                    .map(|_| format!("{prefix}{}", rng.random_range(1..10)))
                    .collect()
            })
            .collect()
    }

    fn cfg(epochs: usize) -> SkipGramConfig {
        SkipGramConfig {
            dim: 16,
            window: 3,
            negatives: 5,
            epochs,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let corpus = cluster_corpus(50, 1);
        let (a, _) = train_skipgram(&corpus, None, &cfg(0)).unwrap();
        let half = 0.5 / 16.0;
        assert!(a.weights().iter().all(|v| v.abs() <= half));
        let (b, _) = train_skipgram(&corpus, None, &cfg(0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_given_seed() {
        let corpus = cluster_corpus(200, 2);
        let (a, ra) = train_skipgram(&corpus, None, &cfg(2)).unwrap();
        let (b, rb) = train_skipgram(&corpus, None, &cfg(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn loss_decreases() {
        let corpus = cluster_corpus(500, 3);
        let (_, report) = train_skipgram(&corpus, None, &cfg(5)).unwrap();
        assert_eq!(report.epoch_losses.len(), 6);
        assert!(report.epoch_losses[5] < report.epoch_losses[0], "{:?}", report.epoch_losses);
    }

    #[test]
    fn co_occurring_tokens_are_closer() {
        let corpus = cluster_corpus(2000, 4);
        let (e, _) = train_skipgram(&corpus, None, &cfg(5)).unwrap();
        let c = |a: &str, b: &str| cosine(e.get(a).unwrap(), e.get(b).unwrap());
        assert!(c("x1", "x2") > c("x1", "y9"));
    }

    #[test]
    fn unseen_vocab_rows_flagged() {
        let corpus = cluster_corpus(100, 5);
        let vocab = Vocabulary::from_tokens(["x1", "x2", "never"]);
        let (e, _) = train_skipgram(&corpus, Some(&vocab), &cfg(1)).unwrap();
        assert!(e.is_trained(vocab.id("x1").unwrap()));
        assert!(!e.is_trained(vocab.id("never").unwrap()));
        assert!(!e.is_trained(0));
    }

    #[test]
    fn empty_corpus_errors() {
        let corpus: Vec<Vec<String>> = vec![];
        assert!(train_skipgram(&corpus, None, &cfg(1)).is_err());
    }
}

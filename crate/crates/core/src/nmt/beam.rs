use serde::{Deserialize, Serialize};

use super::float::Float;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::vocab::{BOS_ID, EOS_ID};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Output ids without `<s>`/`</s>`.
    pub tokens: Vec<usize>,
    /// Model log-probability, including `</s>` when emitted.
    pub log_prob: f64,
    /// `log_prob / length^exponent`, the ranking key.
    pub score: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
    pub length_norm: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam: 5,
            max_len: 100,
            length_norm: 1.0,
        }
    }
}

fn normalized(log_prob: f64, len: usize, exponent: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(exponent)
}

/// Beam search with a shrinking beam: each step ranks all continuations of
/// the live hypotheses and keeps the top `beam - finished` of them; those
/// ending in `</s>` finish and permanently take a slot. Search ends when no
/// slot is left or `max_len` tokens were produced.
pub fn translate<F: Float>(m: &ModelParams<F>, source: &[usize], cfg: &BeamConfig) -> Result<Hypothesis> {
    Ok(translate_nbest(m, source, cfg)?.swap_remove(0))
}

/// All finished hypotheses, best first.
pub fn translate_nbest<F: Float>(m: &ModelParams<F>, source: &[usize], cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    if source.is_empty() {
        return Err(Error::Invalid("cannot translate an empty source sentence".into()));
    }
    if cfg.beam == 0 {
        return Err(Error::Invalid("beam must be at least 1".into()));
    }
    let (memory, src_len) = m.encode_sentence(source)?;
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![BOS_ID], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..=cfg.max_len {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|(p, _)| p.clone()).collect();
        let lp = m.next_log_probs(&memory, src_len, &prefixes);
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * lp.ncols());
        for (h, row) in lp.rows().into_iter().enumerate() {
            for (tok, &l) in row.iter().enumerate() {
                if tok == BOS_ID || tok == crate::vocab::PAD_ID {
                    continue;
                }
                // at the length limit only `</s>` may follow
                if step == cfg.max_len && tok != EOS_ID {
                    continue;
                }
                cands.push((live[h].1 + l.as_f64(), h, tok));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let slots = cfg.beam - finished.len();
        let mut next = Vec::with_capacity(slots);
        for &(score, h, tok) in cands.iter().take(slots) {
            if tok == EOS_ID {
                let tokens = live[h].0[1..].to_vec();
                finished.push(Hypothesis {
                    score: normalized(score, tokens.len() + 1, cfg.length_norm),
                    tokens,
                    log_prob: score,
                    finished: true,
                });
            } else {
                let mut p = live[h].0.clone();
                p.push(tok);
                next.push((p, score));
            }
        }
        if next.is_empty() {
            break;
        }
        live = next;
    }
    if finished.is_empty() {
        // only reachable when every continuation was masked out
        finished.extend(live.into_iter().map(|(p, lp)| Hypothesis {
            score: normalized(lp, p.len() - 1, cfg.length_norm),
            tokens: p[1..].to_vec(),
            log_prob: lp,
            finished: false,
        }));
    }
    finished.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(finished)
}

/// Greedy decoding by repeated argmax.
pub fn greedy<F: Float>(m: &ModelParams<F>, source: &[usize], max_len: usize) -> Result<Hypothesis> {
    if source.is_empty() {
        return Err(Error::Invalid("cannot translate an empty source sentence".into()));
    }
    let (memory, src_len) = m.encode_sentence(source)?;
    let mut prefix = vec![BOS_ID];
    let mut total = 0.0;
    for step in 0..=max_len {
        let lp = m.next_log_probs(&memory, src_len, std::slice::from_ref(&prefix));
        let row = lp.row(0);
        let mut best = (f64::NEG_INFINITY, EOS_ID);
        for (tok, &l) in row.iter().enumerate() {
            if tok == BOS_ID || tok == crate::vocab::PAD_ID || (step == max_len && tok != EOS_ID) {
                continue;
            }
            if l.as_f64() > best.0 {
                best = (l.as_f64(), tok);
            }
        }
        total += best.0;
        if best.1 == EOS_ID {
            break;
        }
        prefix.push(best.1);
    }
    let tokens = prefix[1..].to_vec();
    Ok(Hypothesis {
        score: total,
        tokens,
        log_prob: total,
        finished: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nmt::adam::{AdamConfig, OptimizerState};
    use crate::nmt::model::Batch;
    use crate::nmt::params::{init_model, HyperParams};
    use crate::nmt::train::{train_step, TrainConfig};
    use crate::rng::derived_rng;
    use rand::Rng;

    fn hyper() -> HyperParams {
        HyperParams {
            layers: 1,
            d_model: 16,
            heads: 2,
            d_ff: 32,
            src_vocab: 14,
            tgt_vocab: 14,
            tied_embeddings: false,
        }
    }

    fn sentences(n: usize) -> Vec<Vec<usize>> {
        let mut rng = derived_rng(9, &[]);
        (0..n)
            .map(|_| (0..rng.random_range(1..6)).map(|_| rng.random_range(4..14)).collect())
            .collect()
    }

    #[test]
    fn empty_source_rejected() {
        let m = init_model::<f32>(hyper(), 1).unwrap();
        assert!(translate(&m, &[], &BeamConfig::default()).is_err());
    }

    #[test]
    fn beam_one_is_greedy() {
        let m = init_model::<f32>(hyper(), 2).unwrap();
        let cfg = BeamConfig {
            beam: 1,
            max_len: 8,
            length_norm: 1.0,
        };
        for s in sentences(20) {
            let b = translate(&m, &s, &cfg).unwrap();
            let g = greedy(&m, &s, 8).unwrap();
            assert_eq!(b.tokens, g.tokens);
            assert!((b.log_prob - g.log_prob).abs() < 1e-9);
        }
    }

    #[test]
    fn memorized_pair_is_emitted_and_wider_beams_score_no_worse() {
        let mut m = init_model::<f32>(hyper(), 3).unwrap();
        let cfg = TrainConfig {
            dropout: 0.0,
            adam: AdamConfig {
                lr: 1e-3,
                warmup: 20,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut st = OptimizerState::new(&m);
        let pair = (vec![4, 5, 6], vec![7, 8, 9, 10]);
        let batch = Batch::new(std::slice::from_ref(&pair)).unwrap();
        for _ in 0..200 {
            train_step(&mut m, &batch, &cfg, &mut st).unwrap();
        }
        let h = translate(&m, &pair.0, &BeamConfig::default()).unwrap();
        assert_eq!(h.tokens, pair.1);
        assert!(h.finished);

        let narrow = BeamConfig {
            beam: 1,
            max_len: 10,
            length_norm: 0.0,
        };
        let wide = BeamConfig { beam: 4, ..narrow };
        for s in sentences(20) {
            let a = translate(&m, &s, &narrow).unwrap();
            let b = translate(&m, &s, &wide).unwrap();
            assert!(b.log_prob >= a.log_prob - 1e-9, "{s:?}: {} < {}", b.log_prob, a.log_prob);
        }
    }

    #[test]
    fn max_len_forces_termination() {
        let m = init_model::<f32>(hyper(), 4).unwrap();
        let cfg = BeamConfig {
            beam: 3,
            max_len: 2,
            length_norm: 1.0,
        };
        let h = translate_nbest(&m, &[4, 5], &cfg).unwrap();
        assert!(h.iter().all(|h| h.tokens.len() <= 2));
        assert!(h.windows(2).all(|w| w[0].score >= w[1].score));
    }
}

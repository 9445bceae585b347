use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, OptimizerState};
use super::model::{step_rng, Batch, ForwardOpts};
use super::params::{FreezeMask, ModelParams};
use crate::error::{Error, Result};
use crate::noise::{inject_noise, NoiseSpec};
use crate::rng::derived_rng;
use crate::synth::ParallelCorpus;
use crate::vocab::{Vocabulary, NUM_SPECIALS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Target tokens per batch (including `</s>`).
    pub batch_words: usize,
    /// Longest source or target sentence, in tokens, used for training.
    pub max_len: usize,
    pub dropout: f64,
    /// Dropout on embedding outputs as well (baseline setting).
    pub embed_dropout: bool,
    pub label_smoothing: f64,
    pub adam: AdamConfig,
    /// Updates between dev evaluations.
    pub checkpoint_frequency: u64,
    /// Non-improving checkpoints tolerated before stopping.
    pub patience: u64,
    pub max_updates: Option<u64>,
    pub max_epochs: Option<u64>,
    pub seed: u64,
    pub freeze: FreezeMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_words: 1024,
            max_len: 100,
            dropout: 0.3,
            embed_dropout: false,
            label_smoothing: 0.0,
            adam: AdamConfig::default(),
            checkpoint_frequency: 500,
            patience: 12,
            max_updates: None,
            max_epochs: None,
            seed: 1,
            freeze: FreezeMask::none(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Invalid("patience must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Invalid("label_smoothing must lie in [0, 1)".into()));
        }
        if self.batch_words == 0 || self.max_len == 0 || self.checkpoint_frequency == 0 {
            return Err(Error::Invalid(
                "batch_words, max_len and checkpoint_frequency must be positive".into(),
            ));
        }
        Ok(())
    }

    fn forward_opts(&self) -> ForwardOpts {
        ForwardOpts {
            dropout: self.dropout,
            embed_dropout: self.embed_dropout,
            label_smoothing: self.label_smoothing,
        }
    }
}

pub type IdPair = (Vec<usize>, Vec<usize>);

/// Id-encoded training and dev data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub train: Vec<IdPair>,
    pub dev: Vec<IdPair>,
    /// Source ids by descending frequency, the filler pool for insertion
    /// noise.
    pub noise_pool: Vec<usize>,
}

pub fn encode_corpus(corpus: &ParallelCorpus, src: &Vocabulary, tgt: &Vocabulary) -> Vec<IdPair> {
    corpus
        .pairs()
        .iter()
        .map(|p| (src.encode(&p.source), tgt.encode(&p.target)))
        .collect()
}

impl TrainData {
    pub fn encode(train: &ParallelCorpus, dev: &ParallelCorpus, src: &Vocabulary, tgt: &Vocabulary) -> Self {
        Self {
            train: encode_corpus(train, src, tgt),
            dev: encode_corpus(dev, src, tgt),
            noise_pool: (NUM_SPECIALS..src.len()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointRecord {
    pub checkpoint: u64,
    pub update: u64,
    pub epoch: u64,
    pub train_loss: f64,
    pub dev_perplexity: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub checkpoints: Vec<CheckpointRecord>,
    pub best_checkpoint: Option<u64>,
    pub stopped_early: bool,
    pub updates: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Lowest dev perplexity snapshot.
    pub best: ModelParams<f32>,
    /// Parameters after the final update.
    pub last: ModelParams<f32>,
    pub state: OptimizerState,
    pub log: TrainLog,
}

/// One Adam update on `batch`. Returns the token-mean loss before the
/// update.
pub fn train_step(
    m: &mut ModelParams<f32>,
    batch: &Batch,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<f64> {
    let too_long = batch.src_lens.iter().any(|&l| l - 1 > cfg.max_len) || batch.tgt_lens.iter().any(|&l| l - 1 > cfg.max_len);
    if too_long {
        return Err(Error::Invalid(format!("batch has a sentence longer than max_len {}", cfg.max_len)));
    }
    let mut rng = step_rng(cfg.seed, state.step);
    let (stats, grads) = m.loss_and_grads(batch, &cfg.forward_opts(), Some(&mut rng))?;
    if !stats.loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            loss: stats.loss,
            batch: state.step as usize,
        });
    }
    state.apply(m, &grads, &cfg.adam, &cfg.freeze);
    Ok(stats.loss)
}

/// `exp` of the token-mean negative log-likelihood, no dropout.
pub fn corpus_perplexity<F: super::Float>(m: &ModelParams<F>, pairs: &[IdPair], batch_words: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus("perplexity"));
    }
    let lens: Vec<usize> = pairs.iter().map(|p| p.1.len() + 1).collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (lens[i], pairs[i].0.len()));
    let mut nll = 0.0;
    let mut tokens = 0;
    for chunk in chunk_by_words(&order, &lens, batch_words) {
        let batch = Batch::new(&chunk.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>())?;
        let s = m.batch_loss(&batch, &ForwardOpts::default())?;
        nll += s.nll;
        tokens += s.tokens;
    }
    Ok((nll / tokens as f64).exp())
}

fn chunk_by_words(order: &[usize], lens: &[usize], batch_words: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut words = 0;
    for &i in order {
        if !cur.is_empty() && words + lens[i] > batch_words {
            out.push(std::mem::take(&mut cur));
            words = 0;
        }
        cur.push(i);
        words += lens[i];
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Batches of one epoch: length-sorted with random tie order, then the
/// batch order shuffled.
fn epoch_batches(pairs: &[IdPair], cfg: &TrainConfig, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = derived_rng(cfg.seed, &[0xba7c, epoch]);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (pairs[i].1.len(), pairs[i].0.len()));
    let lens: Vec<usize> = pairs.iter().map(|p| p.1.len() + 1).collect();
    let mut batches = chunk_by_words(&order, &lens, cfg.batch_words);
    batches.shuffle(&mut rng);
    batches
}

/// Trains from a fresh optimizer state with dev perplexity as the stopping
/// criterion.
pub fn train(
    m: ModelParams<f32>,
    data: &TrainData,
    cfg: &TrainConfig,
    noise: Option<&NoiseSpec>,
) -> Result<TrainOutcome> {
    if data.dev.is_empty() {
        return Err(Error::EmptyCorpus("dev"));
    }
    let state = OptimizerState::new(&m);
    let bw = cfg.batch_words;
    train_from(m, state, None, data, cfg, noise, &mut |m| {
        corpus_perplexity(m, &data.dev, bw)
    })
}

/// Training loop with an arbitrary dev scorer (lower is better), resuming
/// from `state`. `best` is the snapshot kept by an interrupted run.
pub fn train_from(
    mut m: ModelParams<f32>,
    mut state: OptimizerState,
    best: Option<ModelParams<f32>>,
    data: &TrainData,
    cfg: &TrainConfig,
    noise: Option<&NoiseSpec>,
    scorer: &mut dyn FnMut(&ModelParams<f32>) -> Result<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(n) = noise {
        n.validate()?;
    }
    if state.m.len() != m.tensors().len() {
        return Err(Error::Dimension("optimizer state does not match the model".into()));
    }
    let usable: Vec<IdPair> = data
        .train
        .iter()
        .filter(|(s, t)| s.len() <= cfg.max_len && t.len() <= cfg.max_len && !t.is_empty())
        .cloned()
        .collect();
    if usable.len() < data.train.len() {
        warn!(
            "skipping {} training pairs longer than max_len {}",
            data.train.len() - usable.len(),
            cfg.max_len
        );
    }
    if usable.is_empty() {
        return Err(Error::EmptyCorpus("training data"));
    }

    let mut best = best.unwrap_or_else(|| m.clone());
    let mut log = TrainLog::default();
    let mut loss_sum = 0.0;
    let mut loss_n = 0u64;
    let budget_left = |s: &OptimizerState| cfg.max_updates.is_none_or(|u| s.step < u);

    'epochs: while cfg.max_epochs.is_none_or(|e| state.epoch < e) {
        let batches = epoch_batches(&usable, cfg, state.epoch);
        let sources: Vec<Vec<usize>> = match noise {
            Some(spec) => usable
                .iter()
                .enumerate()
                .map(|(i, (s, _))| {
                    if s.is_empty() {
                        return Ok(Vec::new());
                    }
                    let mut rng = derived_rng(spec.seed, &[state.epoch, i as u64]);
                    let mut noisy = inject_noise(s, spec, &data.noise_pool, &mut rng)?;
                    noisy.truncate(cfg.max_len);
                    Ok(noisy)
                })
                .collect::<Result<_>>()?,
            None => usable.iter().map(|(s, _)| s.clone()).collect(),
        };
        while (state.cursor as usize) < batches.len() {
            if !budget_left(&state) {
                break 'epochs;
            }
            let idx = &batches[state.cursor as usize];
            let pairs: Vec<IdPair> = idx.iter().map(|&i| (sources[i].clone(), usable[i].1.clone())).collect();
            let batch = Batch::new(&pairs)?;
            loss_sum += train_step(&mut m, &batch, cfg, &mut state)?;
            loss_n += 1;
            state.cursor += 1;
            if state.step.is_multiple_of(cfg.checkpoint_frequency) {
                let ppl = scorer(&m)?;
                state.checkpoints += 1;
                let improved = ppl < state.best_perplexity;
                if improved {
                    state.best_perplexity = ppl;
                    state.bad_checkpoints = 0;
                    best = m.clone();
                    log.best_checkpoint = Some(state.checkpoints);
                } else {
                    state.bad_checkpoints += 1;
                }
                let rec = CheckpointRecord {
                    checkpoint: state.checkpoints,
                    update: state.step,
                    epoch: state.epoch,
                    train_loss: loss_sum / loss_n.max(1) as f64,
                    dev_perplexity: ppl,
                    improved,
                };
                info!(
                    "checkpoint={} update={} epoch={} train_loss={:.4} dev_ppl={:.4} improved={}",
                    rec.checkpoint, rec.update, rec.epoch, rec.train_loss, rec.dev_perplexity, rec.improved
                );
                log.checkpoints.push(rec);
                loss_sum = 0.0;
                loss_n = 0;
                if state.bad_checkpoints >= cfg.patience {
                    log.stopped_early = true;
                    break 'epochs;
                }
            }
        }
        state.epoch += 1;
        state.cursor = 0;
    }

    // a budget that ends between checkpoints still gets the last model
    // considered, without touching the resumable state
    if !log.stopped_early && !state.step.is_multiple_of(cfg.checkpoint_frequency) {
        let ppl = scorer(&m)?;
        info!("final update={} dev_ppl={:.4}", state.step, ppl);
        if ppl < state.best_perplexity {
            best = m.clone();
            log.best_checkpoint = None;
        }
    }
    log.updates = state.step;
    Ok(TrainOutcome {
        best,
        last: m,
        state,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nmt::params::{init_model, Component, HyperParams};

    fn hyper(v: usize) -> HyperParams {
        HyperParams {
            layers: 1,
            d_model: 16,
            heads: 2,
            d_ff: 32,
            src_vocab: v,
            tgt_vocab: v,
            tied_embeddings: false,
        }
    }

    fn copy_data(n: usize, v: usize, seed: u64) -> Vec<IdPair> {
        use rand::Rng;
        let mut rng = derived_rng(seed, &[]);
        (0..n)
            .map(|_| {
                let len = rng.random_range(2..6);
                let s: Vec<usize> = (0..len).map(|_| rng.random_range(NUM_SPECIALS..v)).collect();
                (s.clone(), s)
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { dropout: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn fully_frozen_step_changes_nothing() {
        let mut m = init_model::<f32>(hyper(12), 1).unwrap();
        let before = m.clone();
        let cfg = TrainConfig {
            freeze: FreezeMask::all(),
            ..Default::default()
        };
        let mut st = OptimizerState::new(&m);
        let b = Batch::new(&[(vec![4, 5], vec![6, 7])]).unwrap();
        let loss = train_step(&mut m, &b, &cfg, &mut st).unwrap();
        assert!(loss > 0.0);
        assert_eq!(m, before);
    }

    #[test]
    fn single_pair_memorized() {
        let mut m = init_model::<f32>(hyper(12), 2).unwrap();
        let cfg = TrainConfig {
            dropout: 0.0,
            adam: AdamConfig {
                lr: 1e-3,
                warmup: 20,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut st = OptimizerState::new(&m);
        let b = Batch::new(&[(vec![4, 5, 6], vec![7, 8, 9, 10])]).unwrap();
        let first = train_step(&mut m, &b, &cfg, &mut st).unwrap();
        let mut last = first;
        for _ in 1..200 {
            last = train_step(&mut m, &b, &cfg, &mut st).unwrap();
        }
        assert!(last < 0.1, "{first} -> {last}");
    }

    #[test]
    fn overlong_batch_rejected() {
        let mut m = init_model::<f32>(hyper(12), 1).unwrap();
        let cfg = TrainConfig {
            max_len: 2,
            ..Default::default()
        };
        let mut st = OptimizerState::new(&m);
        let b = Batch::new(&[(vec![4, 5, 6], vec![7])]).unwrap();
        assert!(train_step(&mut m, &b, &cfg, &mut st).is_err());
    }

    #[test]
    fn nonfinite_loss_reports_batch() {
        let mut m = init_model::<f32>(hyper(12), 1).unwrap();
        let out = m.layout().out_b;
        m.tensors_mut()[out][[0, 5]] = f32::NAN;
        let mut st = OptimizerState::new(&m);
        st.step = 7;
        let b = Batch::new(&[(vec![4], vec![5])]).unwrap();
        match train_step(&mut m, &b, &TrainConfig::default(), &mut st) {
            Err(Error::NonFiniteLoss { batch, .. }) => assert_eq!(batch, 7),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stops_after_patience_and_returns_best() {
        let m = init_model::<f32>(hyper(12), 3).unwrap();
        let data = TrainData {
            train: copy_data(40, 12, 1),
            dev: copy_data(5, 12, 2),
            noise_pool: (4..12).collect(),
        };
        let cfg = TrainConfig {
            batch_words: 20,
            checkpoint_frequency: 3,
            patience: 1,
            max_updates: Some(1000),
            ..Default::default()
        };
        let script = [5.0, 6.0, 7.0, 8.0];
        let mut calls = 0;
        let mut snapshots = Vec::new();
        let out = train_from(
            m.clone(),
            OptimizerState::new(&m),
            None,
            &data,
            &cfg,
            None,
            &mut |p| {
                snapshots.push(p.clone());
                calls += 1;
                Ok(script[calls - 1])
            },
        )
        .unwrap();
        assert_eq!(calls, 2);
        assert!(out.log.stopped_early);
        assert_eq!(out.log.best_checkpoint, Some(1));
        assert_eq!(out.best, snapshots[0]);
        assert_eq!(out.state.step, 6);
    }

    #[test]
    fn freezing_partitions_parameters() {
        let m = init_model::<f32>(hyper(12), 4).unwrap();
        let data = TrainData {
            train: copy_data(30, 12, 3),
            dev: copy_data(4, 12, 4),
            noise_pool: (4..12).collect(),
        };
        let freeze = FreezeMask::from_components([Component::TargetEmbedding, Component::DecoderSelfAttention]);
        let cfg = TrainConfig {
            batch_words: 30,
            max_updates: Some(5),
            freeze: freeze.clone(),
            ..Default::default()
        };
        let out = train(m.clone(), &data, &cfg, None).unwrap();
        for (spec, (a, b)) in m.layout().specs.iter().zip(m.tensors().iter().zip(out.last.tensors())) {
            if freeze.contains(spec.component) {
                assert_eq!(a, b, "{}", spec.name);
            } else {
                assert_ne!(a, b, "{}", spec.name);
            }
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let m = init_model::<f32>(hyper(12), 5).unwrap();
        let data = TrainData {
            train: copy_data(30, 12, 5),
            dev: copy_data(4, 12, 6),
            noise_pool: (4..12).collect(),
        };
        let noise = NoiseSpec::default();
        let cfg = TrainConfig {
            batch_words: 25,
            checkpoint_frequency: 4,
            patience: 100,
            max_updates: Some(20),
            ..Default::default()
        };
        let full = train(m.clone(), &data, &cfg, Some(&noise)).unwrap();
        let half_cfg = TrainConfig {
            max_updates: Some(8),
            ..cfg.clone()
        };
        let half = train(m, &data, &half_cfg, Some(&noise)).unwrap();
        let bw = cfg.batch_words;
        let resumed = train_from(
            half.last,
            half.state,
            Some(half.best),
            &data,
            &cfg,
            Some(&noise),
            &mut |p| corpus_perplexity(p, &data.dev, bw),
        )
        .unwrap();
        assert_eq!(resumed.last, full.last);
        assert_eq!(resumed.state, full.state);
        assert_eq!(resumed.best, full.best);
    }

    #[test]
    fn copy_task_converges() {
        let v = 12;
        let m = init_model::<f32>(hyper(v), 6).unwrap();
        let data = TrainData {
            train: copy_data(32, v, 7),
            dev: copy_data(32, v, 7),
            noise_pool: (4..v).collect(),
        };
        let cfg = TrainConfig {
            batch_words: 40,
            dropout: 0.0,
            checkpoint_frequency: 50,
            patience: 3,
            max_updates: Some(3000),
            adam: AdamConfig {
                lr: 2e-3,
                warmup: 50,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = train(m, &data, &cfg, None).unwrap();
        let ppl = corpus_perplexity(&out.best, &data.dev, 100).unwrap();
        assert!(ppl < 1.2, "{ppl}");
    }
}

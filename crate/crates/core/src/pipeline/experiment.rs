//! Experiment configuration and the staged runner that produces the
//! system × BLEU table.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use log::info;
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::cipher::{apply_cipher, CipherTable};
use super::toy::{ToyConfig, ToyLanguage};
use crate::crossmap::{
    fit_mapping, induce_seed_dictionary, map_embedding, normalize_embedding, refine_mapping, solve_map, Constraint,
    SeedMode,
};
use crate::embedding::{train_skipgram, EmbeddingMatrix, Metric, SkipGramConfig};
use crate::error::{Error, Result};
use crate::eval::{bleu, BleuReport};
use crate::nmt::{
    extract_source_embedding, init_model, load_checkpoint, save_checkpoint, train, transfer_init, translate,
    BeamConfig, HyperParams, ModelParams, TrainConfig, TrainData,
};
use crate::noise::NoiseSpec;
use crate::rng::derive_seed;
use crate::synth::{make_parent_synthetic, mix_corpora, read_sentences, write_sentences, ParallelCorpus};
use crate::vocab::{build_vocab, Vocabulary, NUM_SPECIALS};

/// One row of the results table. Rows are cumulative: each system adds one
/// technique to the one above it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    Baseline,
    Transfer,
    Crossmap,
    Noise,
    Synthetic,
}

impl System {
    pub const ALL: [System; 5] = [
        System::Baseline,
        System::Transfer,
        System::Crossmap,
        System::Noise,
        System::Synthetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            System::Baseline => "baseline",
            System::Transfer => "transfer",
            System::Crossmap => "crossmap",
            System::Noise => "noise",
            System::Synthetic => "synthetic",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            System::Baseline => "Baseline",
            System::Transfer => "Transfer",
            System::Crossmap => "+ Cross-lingual word embedding",
            System::Noise => "  + Artificial noises",
            System::Synthetic => "    + Synthetic data",
        }
    }

    fn parent(self) -> Option<ParentKind> {
        match self {
            System::Baseline => None,
            System::Transfer | System::Crossmap => Some(ParentKind::Plain),
            System::Noise | System::Synthetic => Some(ParentKind::Noisy),
        }
    }

    fn uses_crossmap(self) -> bool {
        matches!(self, System::Crossmap | System::Noise | System::Synthetic)
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParentKind {
    Plain,
    Noisy,
}

impl ParentKind {
    fn name(self) -> &'static str {
        match self {
            ParentKind::Plain => "parent",
            ParentKind::Noisy => "parent-noise",
        }
    }
}

/// Generated cipher task: a toy parent pair and a renamed child language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CipherData {
    pub toy: ToyConfig,
    pub parent_train: usize,
    pub parent_dev: usize,
    pub child_train: usize,
    pub child_dev: usize,
    pub child_test: usize,
    pub child_mono: usize,
    /// Maximum displacement of the child's local reordering.
    pub reorder: Option<usize>,
}

impl Default for CipherData {
    fn default() -> Self {
        Self {
            toy: ToyConfig::default(),
            parent_train: 10_000,
            parent_dev: 500,
            child_train: 200,
            child_dev: 200,
            child_test: 200,
            child_mono: 10_000,
            reorder: None,
        }
    }
}

/// Pre-tokenized corpora on disk. Parallel corpora are `prefix.src` /
/// `prefix.tgt` pairs; monolingual files hold one sentence per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileData {
    pub parent_train: PathBuf,
    pub parent_dev: PathBuf,
    pub child_train: PathBuf,
    pub child_dev: PathBuf,
    pub child_test: PathBuf,
    pub child_mono: PathBuf,
    /// Defaults to the parent training sources.
    #[serde(default)]
    pub parent_mono: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataConfig {
    Cipher(CipherData),
    Files(FileData),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 32,
            heads: 4,
            d_ff: 64,
        }
    }
}

impl ModelConfig {
    fn hyper(&self, src: &Vocabulary, tgt: &Vocabulary) -> HyperParams {
        HyperParams {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            src_vocab: src.len(),
            tgt_vocab: tgt.len(),
            tied_embeddings: false,
        }
    }
}

/// Where child embeddings are aligned before landing in the parent encoder
/// space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Anchor {
    /// Map child vectors straight onto the parent model's source embedding.
    #[default]
    Direct,
    /// Align with a parent skip-gram space first, then regress that space
    /// onto the parent model's source embedding.
    Pivot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossmapConfig {
    pub seed_mode: SeedMode,
    pub iterations: usize,
    /// CSLS neighborhood size; 0 selects plain cosine.
    pub csls_k: usize,
    pub max_rank: usize,
    pub anchor: Anchor,
}

impl Default for CrossmapConfig {
    fn default() -> Self {
        Self {
            seed_mode: SeedMode::Digits,
            iterations: 10,
            csls_k: 10,
            max_rank: 10_000,
            anchor: Anchor::Direct,
        }
    }
}

impl CrossmapConfig {
    fn metric(&self) -> Metric {
        if self.csls_k == 0 {
            Metric::Cosine
        } else {
            Metric::Csls { k: self.csls_k }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Parent pairs sampled for the synthetic corpus.
    pub sample_size: usize,
    /// Real : synthetic.
    pub ratio: (f64, f64),
    pub max_unk_fraction: Option<f64>,
    /// Row whose parent and embeddings the synthetic system reuses.
    pub extends: System,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            sample_size: 2000,
            ratio: (1.0, 2.0),
            max_unk_fraction: None,
            extends: System::Noise,
        }
    }
}

/// A full experiment, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Seed for data generation, synthetic sampling and transfer
    /// initialization. Module blocks carry their own seeds.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Systems to build, reported in table order.
    pub stages: Vec<System>,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub parent_train: TrainConfig,
    #[serde(default)]
    pub child_train: TrainConfig,
    /// Defaults to `child_train` with embedding dropout.
    #[serde(default)]
    pub baseline_train: Option<TrainConfig>,
    #[serde(default)]
    pub embedding: SkipGramConfig,
    #[serde(default)]
    pub crossmap: CrossmapConfig,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub decode: BeamConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The system whose setup `s` reuses; only the synthetic row differs.
    fn setup_of(&self, s: System) -> System {
        if s == System::Synthetic {
            self.synthetic.extends
        } else {
            s
        }
    }

    fn baseline_config(&self) -> TrainConfig {
        self.baseline_train.clone().unwrap_or_else(|| TrainConfig {
            embed_dropout: true,
            ..self.child_train.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("stages must list at least one system".into()));
        }
        let unique: BTreeSet<System> = self.stages.iter().copied().collect();
        if unique.len() != self.stages.len() {
            return Err(Error::Config("stages contain a duplicate system".into()));
        }
        let m = &self.model;
        if m.layers == 0 || m.d_model == 0 || m.heads == 0 || m.d_ff == 0 || !m.d_model.is_multiple_of(m.heads) {
            return Err(Error::Config(format!("invalid model sizes {m:?}")));
        }
        for c in [&self.parent_train, &self.child_train, &self.baseline_config()] {
            c.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !matches!(self.synthetic.extends, System::Transfer | System::Crossmap | System::Noise) {
            return Err(Error::Config("synthetic.extends must be transfer, crossmap or noise".into()));
        }
        if self.stages.iter().any(|&s| self.setup_of(s).uses_crossmap())
            && self.crossmap.anchor == Anchor::Direct
            && self.embedding.dim != self.model.d_model
        {
            return Err(Error::Config(format!(
                "direct crossmap needs embedding.dim ({}) == model.d_model ({})",
                self.embedding.dim, self.model.d_model
            )));
        }
        let (r, s) = self.synthetic.ratio;
        if !(r > 0.0 && s > 0.0) {
            return Err(Error::Config("synthetic.ratio must be positive".into()));
        }
        if let DataConfig::Cipher(c) = &self.data {
            let sizes = [c.parent_train, c.parent_dev, c.child_train, c.child_dev, c.child_test, c.child_mono];
            if sizes.contains(&0) {
                return Err(Error::Config("cipher corpus sizes must be positive".into()));
            }
        }
        Ok(())
    }
}

/// The results table.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<(System, BleuReport)>,
}

impl Report {
    pub fn bleu(&self, system: System) -> Option<f64> {
        self.rows.iter().find(|(s, _)| *s == system).map(|(_, b)| b.bleu)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<34} {:>6}", "System", "BLEU")?;
        writeln!(f, "{}", "-".repeat(41))?;
        for (s, b) in &self.rows {
            writeln!(f, "{:<34} {:>6.2}", s.label(), b.bleu)?;
        }
        Ok(())
    }
}

/// Artifact layout under the output directory.
struct Layout {
    root: PathBuf,
}

impl Layout {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn corpus(&self, name: &str) -> PathBuf {
        self.path(&format!("data/{name}"))
    }
}

/// Runs `build` unless the stamp recorded for `stage` equals `key` and
/// every artifact exists. Returns the key for downstream stamps.
fn stage(
    out: &Layout,
    name: &str,
    key: String,
    artifacts: &[PathBuf],
    build: impl FnOnce() -> Result<Vec<(String, String)>>,
) -> Result<String> {
    let stamp = out.path(&format!("stamps/{name}.stamp"));
    let fresh = std::fs::read_to_string(&stamp).is_ok_and(|s| s == key) && artifacts.iter().all(|a| a.exists());
    if fresh {
        info!("stage={name} cached=true");
        return Ok(key);
    }
    let wrap = |e: Error| Error::Stage {
        stage: name.to_string(),
        artifact: artifacts.first().cloned().unwrap_or_else(|| out.root.clone()),
        source: Box::new(e),
    };
    if stamp.exists() {
        std::fs::remove_file(&stamp).map_err(|e| wrap(Error::io(&stamp, e)))?;
    }
    for a in artifacts {
        if let Some(dir) = a.parent() {
            std::fs::create_dir_all(dir).map_err(|e| wrap(Error::io(dir, e)))?;
        }
    }
    let kv = build().map_err(wrap)?;
    let mut log = format!("stage={name}\n");
    for (k, v) in &kv {
        let _ = writeln!(log, "{k}={v}");
        info!("stage={name} {k}={v}");
    }
    let log_path = out.path(&format!("logs/{name}.log"));
    write_file(&log_path, &log).map_err(wrap)?;
    write_file(&stamp, &key).map_err(wrap)?;
    Ok(key)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sidecars(prefix: &Path) -> [PathBuf; 2] {
    let with = |ext: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    [with("src"), with("tgt")]
}

const CORPORA: [&str; 5] = ["parent.train", "parent.dev", "child.train", "child.dev", "child.test"];

fn data_stage(cfg: &ExperimentConfig, out: &Layout) -> Result<String> {
    let mut artifacts: Vec<PathBuf> = CORPORA.iter().flat_map(|c| sidecars(&out.corpus(c))).collect();
    artifacts.push(out.corpus("child.mono"));
    artifacts.push(out.corpus("parent.mono"));
    let key = format!("data seed={} {:?}", cfg.seed, cfg.data);
    stage(out, "data", key, &artifacts, || {
        let mut kv = Vec::new();
        let (corpora, child_mono, parent_mono) = match &cfg.data {
            DataConfig::Cipher(c) => {
                let lang = ToyLanguage::new(&c.toy);
                let table = CipherTable::generate(&lang.source_lexicon(), cfg.seed);
                table.save(out.corpus("cipher.tsv"))?;
                let sample = |n: usize, stream: u64| lang.sample_corpus(n, cfg.seed, stream);
                let cipher = |corpus: ParallelCorpus, stream: u64| {
                    apply_cipher(&corpus, &table, c.reorder, derive_seed(cfg.seed, &[0xc1, stream]))
                };
                let parent_train = sample(c.parent_train, 0);
                let parent_mono: Vec<Vec<String>> = parent_train.sources().map(<[String]>::to_vec).collect();
                let child_mono: Vec<Vec<String>> = cipher(sample(c.child_mono, 5), 5)?
                    .sources()
                    .map(<[String]>::to_vec)
                    .collect();
                kv.push(("cipher_entries".into(), table.len().to_string()));
                (
                    vec![
                        parent_train,
                        sample(c.parent_dev, 1),
                        cipher(sample(c.child_train, 2), 2)?,
                        cipher(sample(c.child_dev, 3), 3)?,
                        cipher(sample(c.child_test, 4), 4)?,
                    ],
                    child_mono,
                    parent_mono,
                )
            }
            DataConfig::Files(f) => {
                let corpora = [&f.parent_train, &f.parent_dev, &f.child_train, &f.child_dev, &f.child_test]
                    .into_iter()
                    .map(ParallelCorpus::load)
                    .collect::<Result<Vec<_>>>()?;
                let parent_mono = match &f.parent_mono {
                    Some(p) => read_sentences(p)?,
                    None => corpora[0].sources().map(<[String]>::to_vec).collect(),
                };
                (corpora, read_sentences(&f.child_mono)?, parent_mono)
            }
        };
        for (name, corpus) in CORPORA.iter().zip(&corpora) {
            if corpus.is_empty() {
                return Err(Error::EmptyCorpus("experiment data"));
            }
            corpus.save(out.corpus(name))?;
            kv.push((format!("{name}.pairs"), corpus.len().to_string()));
        }
        write_sentences(out.corpus("child.mono"), &child_mono)?;
        write_sentences(out.corpus("parent.mono"), &parent_mono)?;
        kv.push(("child.mono.sentences".into(), child_mono.len().to_string()));
        Ok(kv)
    })
}

struct Vocabs {
    parent_src: Vocabulary,
    parent_tgt: Vocabulary,
    /// Child parallel and monolingual sources.
    child_src: Vocabulary,
    /// Child parallel targets, used only by the baseline.
    child_tgt: Vocabulary,
}

fn vocab_stage(out: &Layout, upstream: &str) -> Result<(String, Vocabs)> {
    let names = ["parent.src", "parent.tgt", "child.src", "child.tgt"];
    let paths: Vec<PathBuf> = names.iter().map(|n| out.path(&format!("vocab/{n}"))).collect();
    let key = format!("vocab <- {upstream}");
    let key = stage(out, "vocab", key, &paths, || {
        let parent = ParallelCorpus::load(out.corpus("parent.train"))?;
        let child = ParallelCorpus::load(out.corpus("child.train"))?;
        let mono = read_sentences(out.corpus("child.mono"))?;
        let vocabs = [
            build_vocab(parent.sources(), None),
            build_vocab(parent.targets(), None),
            build_vocab(child.sources().chain(mono.iter().map(Vec::as_slice)), None),
            build_vocab(child.targets(), None),
        ];
        let mut kv = Vec::new();
        for ((v, p), n) in vocabs.iter().zip(&paths).zip(names) {
            v.save(p)?;
            kv.push((format!("{n}.size"), v.len().to_string()));
        }
        Ok(kv)
    })?;
    let mut v = paths.iter().map(Vocabulary::load).collect::<Result<Vec<_>>>()?.into_iter();
    let mut next = || v.next().expect("four vocabularies");
    Ok((
        key,
        Vocabs {
            parent_src: next(),
            parent_tgt: next(),
            child_src: next(),
            child_tgt: next(),
        },
    ))
}

fn train_kv(log: &crate::nmt::TrainLog) -> Vec<(String, String)> {
    let mut kv = vec![
        ("updates".to_string(), log.updates.to_string()),
        ("checkpoints".to_string(), log.checkpoints.len().to_string()),
        ("stopped_early".to_string(), log.stopped_early.to_string()),
    ];
    if let Some(b) = log.best_checkpoint {
        kv.push(("best_checkpoint".into(), b.to_string()));
    }
    if let Some(best) = log
        .best_checkpoint
        .and_then(|b| log.checkpoints.iter().find(|c| c.checkpoint == b))
    {
        kv.push(("best_dev_perplexity".into(), format!("{:.4}", best.dev_perplexity)));
    }
    kv
}

fn parent_stage(
    cfg: &ExperimentConfig,
    out: &Layout,
    kind: ParentKind,
    upstream: &str,
    vocabs: &Vocabs,
) -> Result<(String, ModelParams<f32>)> {
    let path = out.path(&format!("models/{}.nmtx", kind.name()));
    let noise = (kind == ParentKind::Noisy).then_some(cfg.noise);
    let key = format!(
        "{} model={:?} train={:?} noise={:?} <- {upstream}",
        kind.name(),
        cfg.model,
        cfg.parent_train,
        noise
    );
    let key = stage(out, kind.name(), key, std::slice::from_ref(&path), || {
        let train_c = ParallelCorpus::load(out.corpus("parent.train"))?;
        let dev_c = ParallelCorpus::load(out.corpus("parent.dev"))?;
        let data = TrainData::encode(&train_c, &dev_c, &vocabs.parent_src, &vocabs.parent_tgt);
        let m = init_model(cfg.model.hyper(&vocabs.parent_src, &vocabs.parent_tgt), cfg.parent_train.seed)?;
        let outcome = train(m, &data, &cfg.parent_train, noise.as_ref())?;
        save_checkpoint(&outcome.best, None, &path)?;
        Ok(train_kv(&outcome.log))
    })?;
    Ok((key, load_checkpoint(&path)?.0))
}

fn embed_stage(cfg: &ExperimentConfig, out: &Layout, side: &str, vocab: &Vocabulary, upstream: &str) -> Result<(String, EmbeddingMatrix)> {
    let path = out.path(&format!("embeddings/{side}.vec"));
    let key = format!("embed-{side} {:?} <- {upstream}", cfg.embedding);
    let key = stage(out, &format!("embed-{side}"), key, std::slice::from_ref(&path), || {
        let mono = read_sentences(out.corpus(&format!("{side}.mono")))?;
        let (emb, report) = train_skipgram(&mono, Some(vocab), &cfg.embedding)?;
        emb.save(&path)?;
        let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
        Ok(vec![("final_loss".into(), format!("{last:.6}"))])
    })?;
    // the file does not record which rows were trained; the vocabulary
    // was built from the same text, so every content row was
    Ok((key, EmbeddingMatrix::load(&path)?))
}

/// Per-column mean and the mean row norm after centering, over content rows.
fn center_and_scale(w: &Array2<f32>) -> (ndarray::Array1<f64>, f64) {
    let rows = w.slice(ndarray::s![NUM_SPECIALS.., ..]).mapv(f64::from);
    let mean = rows.mean_axis(Axis(0)).expect("content rows");
    let centered = &rows - &mean;
    let scale = centered
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .sum::<f64>()
        / rows.nrows() as f64;
    (mean, scale)
}

/// Child embedding expressed in the parent model's source embedding space.
#[allow(clippy::too_many_arguments)]
fn crossmap_stage(
    cfg: &ExperimentConfig,
    out: &Layout,
    kind: ParentKind,
    parent: &ModelParams<f32>,
    vocabs: &Vocabs,
    child_emb: &EmbeddingMatrix,
    parent_emb: Option<&EmbeddingMatrix>,
    upstream: &str,
) -> Result<(String, EmbeddingMatrix)> {
    let name = format!("crossmap-{}", kind.name());
    let path = out.path(&format!("embeddings/child.mapped.{}.vec", kind.name()));
    let dict_path = out.path(&format!("embeddings/dictionary.{}.tsv", kind.name()));
    let key = format!("{name} {:?} <- {upstream}", cfg.crossmap);
    let cm = cfg.crossmap;
    let key = stage(out, &name, key, &[path.clone(), dict_path.clone()], || {
        let target = extract_source_embedding(parent, &vocabs.parent_src)?;
        let (mean, scale) = center_and_scale(target.weights());
        let child = normalize_embedding(child_emb);
        // the space the child is aligned with, and the affine map from there
        // into the raw parent embedding
        let (space, regression) = match (cm.anchor, parent_emb) {
            (Anchor::Direct, _) => (normalize_embedding(&target), None),
            (Anchor::Pivot, Some(p)) => {
                let p = normalize_embedding(p);
                let x = p.weights().slice(ndarray::s![NUM_SPECIALS.., ..]).mapv(f64::from);
                let y = target.weights().slice(ndarray::s![NUM_SPECIALS.., ..]).mapv(f64::from) - &mean;
                let w = solve_map(&x, &y, Constraint::Unconstrained)?;
                (p, Some(w))
            }
            (Anchor::Pivot, None) => return Err(Error::Invalid("pivot anchor needs a parent embedding".into())),
        };
        let seed = induce_seed_dictionary(child.vocab(), space.vocab(), cm.seed_mode)?;
        let w0 = fit_mapping(&child, &space, &seed, Constraint::Orthogonal)?;
        let (w, dict, log) = refine_mapping(&child, &space, &w0, cm.iterations, cm.metric(), cm.max_rank)?;
        let final_dict = if dict.is_empty() { seed.clone() } else { dict };
        final_dict.save(&dict_path)?;
        let aligned = map_embedding(&w, &child)?;
        let x = aligned.weights().mapv(f64::from);
        let raw = match &regression {
            Some(r) => x.dot(&r.t()) + &mean,
            None => x * scale + &mean,
        };
        let mapped = EmbeddingMatrix::with_flags(
            vocabs.child_src.clone(),
            raw.mapv(|v| v as f32),
            aligned.trained_flags().to_vec(),
        )?;
        mapped.save(&path)?;
        Ok(vec![
            ("seed_pairs".into(), seed.len().to_string()),
            ("dictionary_pairs".into(), final_dict.len().to_string()),
            ("refine_sizes".into(), format!("{:?}", log.dictionary_sizes)),
            ("orthogonality_error".into(), format!("{:.3e}", w.orthogonality_error())),
        ])
    })?;
    Ok((key, EmbeddingMatrix::load(&path)?))
}

fn synthetic_stage(cfg: &ExperimentConfig, out: &Layout, vocabs: &Vocabs, upstream: &str) -> Result<(String, ParallelCorpus)> {
    let prefix = out.corpus("child.mixed");
    let synth_prefix = out.corpus("child.synthetic");
    let key = format!("synthetic seed={} {:?} <- {upstream}", cfg.seed, cfg.synthetic);
    let artifacts: Vec<PathBuf> = sidecars(&prefix).into_iter().chain(sidecars(&synth_prefix)).collect();
    let key = stage(out, "synthetic", key, &artifacts, || {
        let parent = ParallelCorpus::load(out.corpus("parent.train"))?;
        let child = ParallelCorpus::load(out.corpus("child.train"))?;
        let s = cfg.synthetic;
        let n = s.sample_size.min(parent.len());
        let seed = derive_seed(cfg.seed, &[0x5e, 1]);
        let synth = make_parent_synthetic(&parent, &vocabs.child_src, n, seed, s.max_unk_fraction)?;
        let mixed = mix_corpora(&child, &synth, s.ratio, derive_seed(cfg.seed, &[0x5e, 2]))?;
        synth.save(&synth_prefix)?;
        mixed.save(&prefix)?;
        let unk = synth.sources().flatten().filter(|t| !vocabs.child_src.contains(t)).count();
        Ok(vec![
            ("synthetic_pairs".into(), synth.len().to_string()),
            ("mixed_pairs".into(), mixed.len().to_string()),
            ("tokens_outside_child_vocab".into(), unk.to_string()),
        ])
    })?;
    Ok((key, ParallelCorpus::load(&prefix)?))
}

/// Initial child model and the vocabularies it reads and writes.
struct ChildSetup<'a> {
    init: ModelParams<f32>,
    tgt: &'a Vocabulary,
    train: ParallelCorpus,
    config: TrainConfig,
}

fn system_stage(cfg: &ExperimentConfig, out: &Layout, system: System, vocabs: &Vocabs, setup: ChildSetup<'_>, upstream: &str) -> Result<BleuReport> {
    let model_path = out.path(&format!("models/{system}.nmtx"));
    let hyp_path = out.path(&format!("output/{system}.hyp"));
    let key = format!("{system} train={:?} decode={:?} <- {upstream}", setup.config, cfg.decode);
    let test = ParallelCorpus::load(out.corpus("child.test"))?;
    stage(out, system.name(), key, &[model_path.clone(), hyp_path.clone()], || {
        let dev = ParallelCorpus::load(out.corpus("child.dev"))?;
        let data = TrainData::encode(&setup.train, &dev, &vocabs.child_src, setup.tgt);
        let outcome = train(setup.init, &data, &setup.config, None)?;
        save_checkpoint(&outcome.best, None, &model_path)?;
        let hyps = test
            .sources()
            .map(|s| {
                let h = translate(&outcome.best, &vocabs.child_src.encode(s), &cfg.decode)?;
                setup.tgt.decode(&h.tokens)
            })
            .collect::<Result<Vec<_>>>()?;
        write_sentences(&hyp_path, &hyps)?;
        let refs: Vec<Vec<String>> = test.targets().map(<[String]>::to_vec).collect();
        let mut kv = train_kv(&outcome.log);
        kv.push(("train_pairs".into(), setup.train.len().to_string()));
        kv.push(("bleu".into(), format!("{:.2}", bleu(&hyps, &refs)?.bleu)));
        Ok(kv)
    })?;
    let hyps = read_sentences(&hyp_path)?;
    let refs: Vec<Vec<String>> = test.targets().map(<[String]>::to_vec).collect();
    if hyps.len() != refs.len() {
        return Err(Error::Stage {
            stage: system.name().into(),
            artifact: hyp_path,
            source: Box::new(Error::Invalid(format!("{} hypotheses for {} references", hyps.len(), refs.len()))),
        });
    }
    bleu(&hyps, &refs)
}

/// Executes the configured systems in table order and writes
/// `report.txt` under the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let out = Layout {
        root: cfg.output_dir.clone(),
    };
    let mut systems = cfg.stages.clone();
    systems.sort();

    let data_key = data_stage(cfg, &out)?;
    let (vocab_key, vocabs) = vocab_stage(&out, &data_key)?;

    let mut parents: Vec<(ParentKind, String, ModelParams<f32>)> = Vec::new();
    for kind in [ParentKind::Plain, ParentKind::Noisy] {
        if systems.iter().any(|&s| cfg.setup_of(s).parent() == Some(kind)) {
            let (k, m) = parent_stage(cfg, &out, kind, &vocab_key, &vocabs)?;
            parents.push((kind, k, m));
        }
    }
    let parent = |kind: ParentKind| {
        parents
            .iter()
            .find(|p| p.0 == kind)
            .map(|p| (&p.1, &p.2))
            .expect("parent trained for every system that needs it")
    };

    let mut embeddings = None;
    if systems.iter().any(|&s| cfg.setup_of(s).uses_crossmap()) {
        let (ck, child) = embed_stage(cfg, &out, "child", &vocabs.child_src, &vocab_key)?;
        let parent_emb = match cfg.crossmap.anchor {
            Anchor::Pivot => Some(embed_stage(cfg, &out, "parent", &vocabs.parent_src, &vocab_key)?),
            Anchor::Direct => None,
        };
        embeddings = Some((ck, child, parent_emb));
    }

    let child_train = ParallelCorpus::load(out.corpus("child.train"))?;
    let mut rows = Vec::new();
    for system in systems {
        let (setup, upstream) = match cfg.setup_of(system).parent() {
            None => {
                let tc = cfg.baseline_config();
                let init = init_model(cfg.model.hyper(&vocabs.child_src, &vocabs.child_tgt), tc.seed)?;
                let setup = ChildSetup {
                    init,
                    tgt: &vocabs.child_tgt,
                    train: child_train.clone(),
                    config: tc,
                };
                (setup, vocab_key.clone())
            }
            Some(kind) => {
                let (pkey, pmodel) = parent(kind);
                let (mapped, mut upstream) = if cfg.setup_of(system).uses_crossmap() {
                    let (ck, child, pe) = embeddings.as_ref().expect("embeddings trained");
                    let pe_key = pe.as_ref().map(|p| p.0.as_str()).unwrap_or("");
                    let upstream = format!("{pkey} | {ck} | {pe_key}");
                    let (k, m) = crossmap_stage(cfg, &out, kind, pmodel, &vocabs, child, pe.as_ref().map(|p| &p.1), &upstream)?;
                    (m, k)
                } else {
                    (extract_source_embedding(pmodel, &vocabs.parent_src)?, pkey.clone())
                };
                let (init, report) = transfer_init(pmodel, &mapped, &vocabs.child_src, derive_seed(cfg.seed, &[0x7f]))?;
                info!(
                    "system={system} transfer_specials={} transfer_mapped={} transfer_random={}",
                    report.specials, report.mapped, report.random
                );
                let train_corpus = if system == System::Synthetic {
                    let (k, mixed) = synthetic_stage(cfg, &out, &vocabs, &vocab_key)?;
                    upstream = format!("{upstream} | {k}");
                    mixed
                } else {
                    child_train.clone()
                };
                let setup = ChildSetup {
                    init,
                    tgt: &vocabs.parent_tgt,
                    train: train_corpus,
                    config: cfg.child_train.clone(),
                };
                (setup, upstream)
            }
        };
        let report = system_stage(cfg, &out, system, &vocabs, setup, &upstream)?;
        info!("system={system} bleu={:.2}", report.bleu);
        rows.push((system, report));
    }
    let report = Report { rows };
    write_file(&out.path("report.txt"), &report.to_string())?;
    Ok(report)
}

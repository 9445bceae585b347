use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use xlt::crossmap::{
    fit_mapping, induce_seed_dictionary, map_embedding, normalize_embedding, refine_mapping, Constraint, SeedDictionary,
    SeedMode,
};
use xlt::embedding::{train_skipgram, EmbeddingMatrix, Metric, SkipGramConfig};
use xlt::eval::bleu_with;
use xlt::nmt::{
    extract_source_embedding, init_model, load_checkpoint, save_checkpoint, train, transfer_init, translate,
    BeamConfig, HyperParams, TrainConfig, TrainData,
};
use xlt::noise::{inject_noise, NoiseSpec};
use xlt::pipeline::{apply_cipher, run_experiment, CipherTable, ExperimentConfig};
use xlt::rng::derived_rng;
use xlt::synth::{make_parent_synthetic, mix_corpora, read_sentences, write_sentences, ParallelCorpus};
use xlt::vocab::{build_vocab, learn_bpe, strip_separators, BpeModel, Vocabulary, DEFAULT_SEPARATOR};

#[derive(Parser)]
#[command(name = "xlt", version, about = "Transfer learning for low-resource neural machine translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn BPE merges from tokenized text.
    LearnBpe(LearnBpe),
    /// Segment tokenized text with learned merges.
    ApplyBpe(ApplyBpe),
    /// Build a frequency-ranked vocabulary.
    BuildVocab(BuildVocab),
    /// Train skip-gram word vectors on monolingual text.
    TrainEmbed(TrainEmbed),
    /// Map child word vectors into a parent space.
    MapEmbed(MapEmbed),
    /// Add insertion, deletion and local-permutation noise to text.
    AddNoise(AddNoise),
    /// Filter parent pairs to the child vocabulary, optionally mixing with child data.
    MakeSynth(MakeSynth),
    /// Derive a renamed child language from a parallel corpus.
    MakeCipher(MakeCipher),
    /// Train a translation model from scratch.
    Train(Train),
    /// Initialize and fine-tune a child model from a parent model.
    Transfer(Transfer),
    /// Translate tokenized text with beam search.
    Translate(Translate),
    /// Corpus-level BLEU of hypotheses against references.
    ScoreBleu(ScoreBleu),
    /// Run a configured end-to-end experiment and print the table.
    RunExperiment(RunExperiment),
}

#[derive(Args)]
struct LearnBpe {
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    merges: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ApplyBpe {
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct BuildVocab {
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Content tokens kept, most frequent first.
    #[arg(long)]
    max_size: Option<usize>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainEmbed {
    #[arg(long)]
    input: PathBuf,
    /// Restrict rows to this vocabulary.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 5)]
    negatives: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long)]
    subsample: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct MapEmbed {
    #[arg(long)]
    child: PathBuf,
    #[arg(long)]
    parent: PathBuf,
    /// Seed from identical tokens of this kind: digits, punctuation or identical.
    #[arg(long, value_parser = parse_seed_mode, default_value = "digits", conflicts_with = "dictionary")]
    seed_mode: SeedMode,
    /// Seed from a `child<TAB>parent` file instead.
    #[arg(long)]
    dictionary: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    /// CSLS neighborhood; 0 uses plain cosine.
    #[arg(long, default_value_t = 10)]
    csls_k: usize,
    #[arg(long, default_value_t = 10_000)]
    max_rank: usize,
    #[arg(long, default_value = "orthogonal")]
    constraint: Constraint,
    /// Mapped child vectors (in the normalized parent space).
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    save_map: Option<PathBuf>,
    #[arg(long)]
    save_dictionary: Option<PathBuf>,
}

#[derive(Args)]
struct AddNoise {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    p_ins: f64,
    #[arg(long, default_value_t = 50)]
    v_ins: usize,
    #[arg(long, default_value_t = 0.1)]
    p_del: f64,
    #[arg(long, default_value_t = 3)]
    d_per: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct MakeSynth {
    /// Parent corpus prefix (`.src`/`.tgt`).
    #[arg(long)]
    parent: PathBuf,
    #[arg(long)]
    child_vocab: PathBuf,
    #[arg(long)]
    size: usize,
    #[arg(long)]
    max_unk_fraction: Option<f64>,
    /// Child corpus prefix to mix the synthetic pairs with.
    #[arg(long)]
    mix: Option<PathBuf>,
    /// Real:synthetic ratio when mixing.
    #[arg(long, default_value = "1:2", value_parser = parse_ratio)]
    ratio: (f64, f64),
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct MakeCipher {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Where the plain→cipher table is written, or read when it exists.
    #[arg(long)]
    table: PathBuf,
    /// Extra monolingual files enciphered with the same table (written next to `output` with a `.cipher` suffix).
    #[arg(long, num_args = 1..)]
    mono: Vec<PathBuf>,
    #[arg(long)]
    reorder: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    d_ff: usize,
    #[arg(long)]
    tied_embeddings: bool,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    src_vocab: PathBuf,
    #[arg(long)]
    tgt_vocab: PathBuf,
    /// TOML training options; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's max_updates.
    #[arg(long)]
    max_updates: Option<u64>,
    /// Comma-separated components to freeze, e.g. `target_embedding,decoder.self_attention`.
    #[arg(long)]
    freeze: Option<String>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Train on noised sources with the default noise settings.
    #[arg(long)]
    noise: bool,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct Transfer {
    #[arg(long)]
    parent: PathBuf,
    #[arg(long)]
    parent_vocab: PathBuf,
    /// Child vectors in the parent embedding space; defaults to the parent's own rows.
    #[arg(long)]
    mapped: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct Translate {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    src_vocab: PathBuf,
    #[arg(long)]
    tgt_vocab: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 100)]
    max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    length_norm: f64,
    /// Join BPE pieces in the output.
    #[arg(long)]
    strip_bpe: bool,
}

#[derive(Args)]
struct ScoreBleu {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Add-one smoothing of higher-order precisions.
    #[arg(long)]
    smooth: bool,
}

#[derive(Args)]
struct RunExperiment {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn parse_seed_mode(s: &str) -> Result<SeedMode, String> {
    match s {
        "digits" => Ok(SeedMode::Digits),
        "punctuation" => Ok(SeedMode::Punctuation),
        "identical" => Ok(SeedMode::Identical),
        other => Err(format!("unknown seed mode `{other}`")),
    }
}

fn parse_ratio(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or("expected `real:synthetic`")?;
    let p = |x: &str| x.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok((p(a)?, p(b)?))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(String::from).collect())
}

fn train_config(d: &DataArgs) -> Result<TrainConfig> {
    let mut cfg = match &d.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if d.max_updates.is_some() {
        cfg.max_updates = d.max_updates;
    }
    if let Some(f) = &d.freeze {
        cfg.freeze = f.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Loaded {
    data: TrainData,
    src: Vocabulary,
    tgt: Vocabulary,
    cfg: TrainConfig,
}

fn load_data(d: &DataArgs) -> Result<Loaded> {
    let src = Vocabulary::load(&d.src_vocab)?;
    let tgt = Vocabulary::load(&d.tgt_vocab)?;
    let train = ParallelCorpus::load(&d.train)?;
    let dev = ParallelCorpus::load(&d.dev)?;
    Ok(Loaded {
        data: TrainData::encode(&train, &dev, &src, &tgt),
        src,
        tgt,
        cfg: train_config(d)?,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::LearnBpe(a) => {
            let mut lines = Vec::new();
            for p in &a.input {
                lines.extend(read_lines(p)?);
            }
            let model = learn_bpe(&lines, a.merges)?;
            model.save(&a.output)?;
            info!("learned {} merges", model.len());
        }
        Command::ApplyBpe(a) => {
            let model = BpeModel::load(&a.codes)?;
            let out: Vec<Vec<String>> = read_lines(&a.input)?.iter().map(|l| model.apply_line(l)).collect();
            write_sentences(&a.output, &out)?;
        }
        Command::BuildVocab(a) => {
            let mut sents = Vec::new();
            for p in &a.input {
                sents.extend(read_sentences(p)?);
            }
            let v = build_vocab(sents.iter().map(Vec::as_slice), a.max_size);
            v.save(&a.output)?;
            info!("vocabulary size {}", v.len());
        }
        Command::TrainEmbed(a) => {
            let sents = read_sentences(&a.input)?;
            let vocab = a.vocab.as_deref().map(Vocabulary::load).transpose()?;
            let cfg = SkipGramConfig {
                dim: a.dim,
                window: a.window,
                negatives: a.negatives,
                epochs: a.epochs,
                seed: a.seed,
                subsample: a.subsample,
                ..SkipGramConfig::default()
            };
            let (emb, report) = train_skipgram(&sents, vocab.as_ref(), &cfg)?;
            emb.save(&a.output)?;
            info!("epoch losses {:?}", report.epoch_losses);
        }
        Command::MapEmbed(a) => {
            let child = normalize_embedding(&EmbeddingMatrix::load(&a.child)?);
            let parent = normalize_embedding(&EmbeddingMatrix::load(&a.parent)?);
            let seed = match &a.dictionary {
                Some(p) => SeedDictionary::load(p)?,
                None => induce_seed_dictionary(child.vocab(), parent.vocab(), a.seed_mode)?,
            };
            let metric = if a.csls_k == 0 { Metric::Cosine } else { Metric::Csls { k: a.csls_k } };
            let w0 = fit_mapping(&child, &parent, &seed, a.constraint)?;
            let (w, dict) = if a.iterations == 0 {
                (w0, seed)
            } else {
                let (w, dict, log) = refine_mapping(&child, &parent, &w0, a.iterations, metric, a.max_rank)?;
                info!("refinement dictionary sizes {:?}", log.dictionary_sizes);
                (w, dict)
            };
            map_embedding(&w, &child)?.save(&a.output)?;
            if let Some(p) = &a.save_map {
                w.save(p)?;
            }
            if let Some(p) = &a.save_dictionary {
                dict.save(p)?;
            }
        }
        Command::AddNoise(a) => {
            let sents = read_sentences(&a.input)?;
            let spec = NoiseSpec {
                p_ins: a.p_ins,
                v_ins: a.v_ins,
                p_del: a.p_del,
                d_per: a.d_per,
                seed: a.seed,
            };
            let vocab = build_vocab(sents.iter().map(Vec::as_slice), None);
            let pool = vocab.content_tokens();
            let mut out = Vec::with_capacity(sents.len());
            for (i, s) in sents.iter().enumerate() {
                if s.is_empty() {
                    out.push(Vec::new());
                    continue;
                }
                let mut rng = derived_rng(a.seed, &[i as u64]);
                out.push(inject_noise(s, &spec, pool, &mut rng)?);
            }
            write_sentences(&a.output, &out)?;
        }
        Command::MakeSynth(a) => {
            let parent = ParallelCorpus::load(&a.parent)?;
            let vocab = Vocabulary::load(&a.child_vocab)?;
            let synth = make_parent_synthetic(&parent, &vocab, a.size, a.seed, a.max_unk_fraction)?;
            let out = match &a.mix {
                Some(child) => mix_corpora(&ParallelCorpus::load(child)?, &synth, a.ratio, a.seed)?,
                None => synth,
            };
            out.save(&a.output)?;
            info!("wrote {} pairs", out.len());
        }
        Command::MakeCipher(a) => {
            let corpus = ParallelCorpus::load(&a.input)?;
            let mono: Vec<Vec<Vec<String>>> = a.mono.iter().map(read_sentences).collect::<Result<_, _>>()?;
            let table = if a.table.exists() {
                CipherTable::load(&a.table)?
            } else {
                let mut tokens: Vec<&str> = corpus.sources().flatten().map(String::as_str).collect();
                tokens.extend(mono.iter().flatten().flatten().map(String::as_str));
                let t = CipherTable::generate(&tokens, a.seed);
                t.save(&a.table)?;
                t
            };
            apply_cipher(&corpus, &table, a.reorder, a.seed)?.save(&a.output)?;
            for (path, sents) in a.mono.iter().zip(&mono) {
                let enc = sents.iter().map(|s| table.encrypt(s)).collect::<Result<Vec<_>, _>>()?;
                let mut out = path.as_os_str().to_owned();
                out.push(".cipher");
                write_sentences(PathBuf::from(out), &enc)?;
            }
        }
        Command::Train(a) => {
            let l = load_data(&a.data)?;
            let hp = HyperParams {
                layers: a.model.layers,
                d_model: a.model.d_model,
                heads: a.model.heads,
                d_ff: a.model.d_ff,
                src_vocab: l.src.len(),
                tgt_vocab: l.tgt.len(),
                tied_embeddings: a.model.tied_embeddings,
            };
            let m = init_model(hp, l.cfg.seed)?;
            let noise = a.noise.then(NoiseSpec::default);
            let outcome = train(m, &l.data, &l.cfg, noise.as_ref())?;
            save_checkpoint(&outcome.best, None, &a.output)?;
            info!("stopped after {} updates", outcome.log.updates);
        }
        Command::Transfer(a) => {
            let (parent, _) = load_checkpoint(&a.parent)?;
            let parent_vocab = Vocabulary::load(&a.parent_vocab)?;
            let l = load_data(&a.data)?;
            if parent.hyper().tgt_vocab != l.tgt.len() {
                bail!(
                    "target vocabulary has {} entries but the parent model expects {}",
                    l.tgt.len(),
                    parent.hyper().tgt_vocab
                );
            }
            let mapped = match &a.mapped {
                Some(p) => EmbeddingMatrix::load(p)?,
                None => extract_source_embedding(&parent, &parent_vocab)?,
            };
            let (init, report) = transfer_init(&parent, &mapped, &l.src, a.seed)?;
            info!(
                "transfer rows: {} specials, {} mapped, {} random",
                report.specials, report.mapped, report.random
            );
            let outcome = train(init, &l.data, &l.cfg, None)?;
            save_checkpoint(&outcome.best, None, &a.output)?;
        }
        Command::Translate(a) => {
            let (m, _) = load_checkpoint(&a.model)?;
            let src = Vocabulary::load(&a.src_vocab)?;
            let tgt = Vocabulary::load(&a.tgt_vocab)?;
            let cfg = BeamConfig {
                beam: a.beam,
                max_len: a.max_len,
                length_norm: a.length_norm,
            };
            let mut out = Vec::new();
            for s in read_sentences(&a.input)? {
                let h = translate(&m, &src.encode(&s), &cfg)?;
                let toks = tgt.decode(&h.tokens)?;
                out.push(if a.strip_bpe { strip_separators(&toks, DEFAULT_SEPARATOR) } else { toks });
            }
            write_sentences(&a.output, &out)?;
        }
        Command::ScoreBleu(a) => {
            let hyp = read_sentences(&a.hyp)?;
            let reference = read_sentences(&a.reference)?;
            println!("{}", bleu_with(&hyp, &reference, a.smooth)?);
        }
        Command::RunExperiment(a) => {
            let mut cfg = ExperimentConfig::load(&a.config)?;
            if let Some(dir) = a.output_dir {
                cfg.output_dir = dir;
            }
            print!("{}", run_experiment(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}


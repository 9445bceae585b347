use std::path::{Path, PathBuf};
use std::process::Command;

fn xlt(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_xlt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn xlt");
    assert!(
        out.status.success(),
        "xlt {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

const SRC: &[&str] = &[
    "lo kata 3 pime sora .",
    "la mine kata rosu ?",
    "lo pime 4 sora !",
    "la kata rosu 3 .",
    "lo mine pime sora ?",
    "la sora 5 kata .",
];
const TGT: &[&str] = &[
    "the cat sees 3 dogs .",
    "a bird sees red ?",
    "the dog 4 runs !",
    "a cat red 3 .",
    "the bird dog runs ?",
    "a runs 5 cat .",
];

fn write_corpus(dir: &Path) -> PathBuf {
    std::fs::write(dir.join("c.src"), SRC.join("\n") + "\n").unwrap();
    std::fs::write(dir.join("c.tgt"), TGT.join("\n") + "\n").unwrap();
    dir.join("c")
}

#[test]
fn lists_all_subcommands() {
    let help = xlt(&["--help"]);
    for cmd in [
        "learn-bpe",
        "apply-bpe",
        "build-vocab",
        "train-embed",
        "map-embed",
        "add-noise",
        "make-synth",
        "make-cipher",
        "train",
        "transfer",
        "translate",
        "score-bleu",
        "run-experiment",
    ] {
        assert!(help.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn bpe_round_trip() {
    let d = tempfile::tempdir().unwrap();
    write_corpus(d.path());
    xlt(&["learn-bpe", "--input", &p(d.path(), "c.src"), "--merges", "10", "--output", &p(d.path(), "codes")]);
    xlt(&["apply-bpe", "--codes", &p(d.path(), "codes"), "--input", &p(d.path(), "c.src"), "--output", &p(d.path(), "seg")]);
    let seg = std::fs::read_to_string(d.path().join("seg")).unwrap();
    let joined: Vec<String> = seg.lines().map(|l| l.replace("@@ ", "")).collect();
    assert_eq!(joined, SRC);
}

#[test]
fn score_bleu_identical() {
    let d = tempfile::tempdir().unwrap();
    write_corpus(d.path());
    let out = xlt(&["score-bleu", "--hyp", &p(d.path(), "c.tgt"), "--reference", &p(d.path(), "c.tgt")]);
    assert!(out.starts_with("BLEU = 100.00"), "{out}");
}

#[test]
fn cipher_noise_and_synthetic() {
    let d = tempfile::tempdir().unwrap();
    let c = write_corpus(d.path());
    let c = c.to_string_lossy();
    std::fs::write(d.path().join("mono"), SRC.join("\n") + "\n").unwrap();
    xlt(&[
        "make-cipher", "--input", &c, "--output", &p(d.path(), "child"), "--table", &p(d.path(), "table.tsv"),
        "--mono", &p(d.path(), "mono"), "--seed", "3",
    ]);
    let child = std::fs::read_to_string(d.path().join("child.src")).unwrap();
    assert_eq!(child.lines().count(), SRC.len());
    assert!(!child.contains("kata"));
    assert_eq!(std::fs::read_to_string(d.path().join("mono.cipher")).unwrap(), child);

    xlt(&["add-noise", "--input", &p(d.path(), "c.src"), "--output", &p(d.path(), "noisy"), "--v-ins", "5"]);
    assert_eq!(std::fs::read_to_string(d.path().join("noisy")).unwrap().lines().count(), SRC.len());

    xlt(&["build-vocab", "--input", &p(d.path(), "child.src"), "--output", &p(d.path(), "child.vocab")]);
    xlt(&[
        "make-synth", "--parent", &c, "--child-vocab", &p(d.path(), "child.vocab"), "--size", "4",
        "--mix", &p(d.path(), "child"), "--output", &p(d.path(), "mixed"),
    ]);
    let mixed = std::fs::read_to_string(d.path().join("mixed.src")).unwrap();
    assert!(mixed.contains("<unk>"));
    assert!(!mixed.contains("kata"));
}

#[test]
fn embed_train_transfer_translate() {
    let d = tempfile::tempdir().unwrap();
    let c = write_corpus(d.path());
    let c = c.to_string_lossy().into_owned();
    let f = |n: &str| p(d.path(), n);
    xlt(&["make-cipher", "--input", &c, "--output", &f("child"), "--table", &f("table.tsv")]);
    xlt(&["build-vocab", "--input", &f("c.src"), "--output", &f("src.vocab")]);
    xlt(&["build-vocab", "--input", &f("c.tgt"), "--output", &f("tgt.vocab")]);
    xlt(&["build-vocab", "--input", &f("child.src"), "--output", &f("child.vocab")]);

    for (side, input) in [("parent", "c.src"), ("child", "child.src")] {
        xlt(&[
            "train-embed", "--input", &f(input), "--output", &f(&format!("{side}.vec")), "--dim", "8",
            "--epochs", "2", "--window", "2",
        ]);
    }
    xlt(&[
        "map-embed", "--child", &f("child.vec"), "--parent", &f("parent.vec"), "--seed-mode", "punctuation",
        "--iterations", "2", "--output", &f("mapped.vec"), "--save-map", &f("w.map"),
        "--save-dictionary", &f("dict.tsv"),
    ]);
    assert!(d.path().join("w.map").exists());

    std::fs::write(d.path().join("train.toml"), "batch_words = 64\ncheckpoint_frequency = 2\nseed = 4\n").unwrap();
    let data = |train: &str, src_vocab: &str| {
        vec![
            "--train".to_string(), train.to_string(), "--dev".into(), train.to_string(),
            "--src-vocab".into(), f(src_vocab), "--tgt-vocab".into(), f("tgt.vocab"),
            "--config".into(), f("train.toml"), "--max-updates".into(), "4".into(),
        ]
    };
    let mut args = vec!["train".to_string()];
    args.extend(data(&c, "src.vocab"));
    args.extend(["--d-model", "8", "--heads", "2", "--d-ff", "16", "--layers", "1", "--output"].map(String::from));
    args.push(f("parent.nmtx"));
    xlt(&args.iter().map(String::as_str).collect::<Vec<_>>());

    // the parent's embedding is 8-dim, as are the skip-gram vectors
    let mut args = vec!["transfer".to_string(), "--parent".into(), f("parent.nmtx"), "--parent-vocab".into(), f("src.vocab")];
    args.extend(["--mapped".into(), f("mapped.vec"), "--freeze".into(), "target_embedding".into()]);
    args.extend(data(&f("child"), "child.vocab"));
    args.extend(["--output".into(), f("child.nmtx")]);
    xlt(&args.iter().map(String::as_str).collect::<Vec<_>>());

    xlt(&[
        "translate", "--model", &f("child.nmtx"), "--src-vocab", &f("child.vocab"), "--tgt-vocab", &f("tgt.vocab"),
        "--input", &f("child.src"), "--output", &f("hyp"), "--beam", "2", "--max-len", "10",
    ]);
    assert_eq!(std::fs::read_to_string(d.path().join("hyp")).unwrap().lines().count(), SRC.len());
    let out = xlt(&["score-bleu", "--hyp", &f("hyp"), "--reference", &f("c.tgt"), "--smooth"]);
    assert!(out.starts_with("BLEU = "));
}

#[test]
fn run_experiment_writes_report() {
    let d = tempfile::tempdir().unwrap();
    let config = r#"
seed = 2
output_dir = "unused"
stages = ["baseline", "transfer"]

[data]
kind = "cipher"
parent_train = 60
parent_dev = 10
child_train = 10
child_dev = 5
child_test = 5
child_mono = 20

[data.toy]
nouns = 12
verbs = 4
adjectives = 4
adverbs = 2

[model]
layers = 1
d_model = 8
heads = 2
d_ff = 16

[parent_train]
max_updates = 3
checkpoint_frequency = 3

[child_train]
max_updates = 3
checkpoint_frequency = 3

[decode]
beam = 2
max_len = 20
"#;
    std::fs::write(d.path().join("exp.toml"), config).unwrap();
    let out_dir = p(d.path(), "run");
    let table = xlt(&["run-experiment", "--config", &p(d.path(), "exp.toml"), "--output-dir", &out_dir]);
    assert!(table.contains("Baseline") && table.contains("Transfer"), "{table}");
    assert_eq!(std::fs::read_to_string(d.path().join("run/report.txt")).unwrap(), table);
}

#[test]
fn shipped_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/cipher.toml");
    let cfg = xlt::pipeline::ExperimentConfig::load(path).unwrap();
    assert_eq!(cfg.stages, xlt::pipeline::System::ALL);
}

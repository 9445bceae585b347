use xlt::eval::{bleu, bleu_with};
use xlt::synth::read_sentences;

fn fixture(name: &str) -> Vec<Vec<String>> {
    read_sentences(format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

// Reference values from sacrebleu 2.6.0:
//   corpus_bleu(hyp, [ref], tokenize="none", smooth_method="none", force=True)
// and the same call with smooth_method="add-k", smooth_value=1.
const SACREBLEU_SCORE: f64 = 48.509183938992706;
const SACREBLEU_ADD_ONE: f64 = 48.63381917593184;
const SACREBLEU_COUNTS: [usize; 4] = [425, 277, 184, 114];
const SACREBLEU_TOTALS: [usize; 4] = [504, 454, 404, 354];
const SACREBLEU_BP: f64 = 0.9255372008384851;

#[test]
fn fifty_sentences_match_sacrebleu() {
    let hyp = fixture("bleu50.hyp");
    let reference = fixture("bleu50.ref");
    assert_eq!(hyp.len(), 50);
    let r = bleu(&hyp, &reference).unwrap();
    assert_eq!(r.matches, SACREBLEU_COUNTS);
    assert_eq!(r.totals, SACREBLEU_TOTALS);
    assert!((r.brevity_penalty - SACREBLEU_BP).abs() < 1e-12);
    assert!((r.bleu - SACREBLEU_SCORE).abs() < 0.01, "{}", r.bleu);
}

#[test]
fn add_one_smoothing_matches_sacrebleu() {
    let r = bleu_with(&fixture("bleu50.hyp"), &fixture("bleu50.ref"), true).unwrap();
    assert!((r.bleu - SACREBLEU_ADD_ONE).abs() < 0.01, "{}", r.bleu);
}

#[test]
fn report_line_format() {
    let r = bleu(&fixture("bleu50.hyp"), &fixture("bleu50.ref")).unwrap();
    assert_eq!(
        r.to_string(),
        "BLEU = 48.51 (84.3/61.0/45.5/32.2, BP=0.9255, ratio=0.9282, hyp_len=504, ref_len=543)"
    );
}

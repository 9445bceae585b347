//! Subword segmentation and vocabularies.
//!
//! BPE is word-internal: words are split on whitespace, segmented into
//! characters and merged in learned order. Non-final subwords carry the
//! `@@` separator so words can be restored by [`strip_separators`].

mod bpe;
mod vocabulary;

pub use bpe::{learn_bpe, strip_separators, BpeModel, DEFAULT_SEPARATOR, MERGES_HEADER};
pub use vocabulary::{
    build_vocab, token_counts, Vocabulary, BOS, BOS_ID, EOS, EOS_ID, NUM_SPECIALS, PAD, PAD_ID,
    SPECIALS, UNK, UNK_ID,
};

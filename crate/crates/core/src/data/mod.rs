//! Vocabulary, masking, synthetic corpora and corpus files.

mod masking;
mod parallel;
mod synthetic;
mod vocab;

pub use masking::{
    apply_mlm_mask, is_maskable, MaskAction, MaskedBatch, MaskedRow, DEFAULT_MASK_RATE, MASK_TOKEN_PROB,
    RANDOM_TOKEN_PROB,
};
pub use parallel::{load_parallel_tsv, parse_parallel_tsv, write_parallel_tsv, ParallelPair};
pub use synthetic::{
    generate_parallel, generate_synthetic_corpus, read_corpus_dir, shared_token, specific_token, write_corpus,
    ConceptGrammar, CorpusConfig, LanguageConfig, LanguageText, SyntheticLanguageSpec,
};
pub use vocab::{build_vocab, encode, Vocabulary, CLS, FIRST_REGULAR_ID, IGNORE_LABEL, MASK, PAD, SEP, SPECIAL_TOKENS, UNK};

/// Sentences of one language encoded to ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedLanguage {
    pub id: String,
    pub sentences: Vec<Vec<u32>>,
}

/// Encodes every sentence of every language.
pub fn encode_corpus(corpus: &[LanguageText], vocab: &Vocabulary, max_len: usize) -> Vec<EncodedLanguage> {
    corpus
        .iter()
        .map(|l| EncodedLanguage {
            id: l.id.clone(),
            sentences: l.sentences.iter().map(|s| vocab.encode(s, max_len)).collect(),
        })
        .collect()
}

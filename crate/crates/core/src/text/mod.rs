//! Corpus preprocessing, vocabulary, embedding ingestion, label spaces,
//! dataset splitting, and synthetic corpus generation.

pub mod corpus;
pub mod embeddings;
pub mod labels;
pub mod synth;
pub mod vocab;

pub use corpus::{prepare_documents, read_corpus, split_dataset, write_corpus, Document, RawDocument, Split};
pub use embeddings::load_embeddings;
pub use labels::{load_code_mapping, CodeMapping, LabelSpace};
pub use synth::{generate_synthetic_corpus, SynthConfig, SyntheticCorpus};
pub use vocab::{preprocess_text, tokenize, Vocabulary, MAX_DOC_LEN, MIN_DOC_FREQ, PAD_ID, UNK_ID};

use crate::error::Result;

/// Vocabulary, label space and encoded documents of one corpus.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub vocab: Vocabulary,
    pub labels: LabelSpace,
    pub docs: Vec<Document>,
}

/// Builds the vocabulary from `raw` itself and encodes every document.
pub fn prepare_corpus(raw: &[RawDocument], mapping: &CodeMapping, min_doc_freq: usize, max_len: usize) -> Result<PreparedCorpus> {
    let texts: Vec<&str> = raw.iter().map(|d| d.text.as_str()).collect();
    let vocab = Vocabulary::build_from_texts(&texts, min_doc_freq)?;
    let labels = LabelSpace::from_mapping(mapping)?;
    let docs = prepare_documents(raw, &vocab, &labels, max_len)?;
    Ok(PreparedCorpus { vocab, labels, docs })
}

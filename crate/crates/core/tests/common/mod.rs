#![allow(dead_code)]

use std::collections::HashMap;

use marn::model::ModelConfig;
use marn::text::embeddings::embedding_matrix;
use marn::text::{generate_synthetic_corpus, prepare_corpus, PreparedCorpus, SynthConfig, MAX_DOC_LEN, MIN_DOC_FREQ};
use marn::Tensor;

pub struct Synthetic {
    pub prepared: PreparedCorpus,
    pub embeddings: Tensor<f64>,
    pub keywords: Vec<Vec<String>>,
}

pub fn synthetic(cfg: &SynthConfig, seed: u64) -> Synthetic {
    let corpus = generate_synthetic_corpus(cfg, seed).unwrap();
    let prepared = prepare_corpus(&corpus.docs, &corpus.mapping, MIN_DOC_FREQ, MAX_DOC_LEN).unwrap();
    let vectors: HashMap<String, Vec<f64>> = corpus.vectors.into_iter().collect();
    let embeddings = embedding_matrix(&vectors, &prepared.vocab, cfg.embedding_dim, seed);
    Synthetic {
        prepared,
        embeddings,
        keywords: corpus.keywords,
    }
}

pub fn model_config(s: &Synthetic, d_r: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: s.prepared.vocab.len(),
        d_e: s.embeddings.shape()[1],
        d_r,
        n_icd: s.prepared.labels.n_icd(),
        n_ccs: s.prepared.labels.n_ccs(),
        dropout: 0.2,
    }
}

pub fn small_synth(n_docs: usize, embedding_dim: usize) -> SynthConfig {
    SynthConfig {
        n_docs,
        n_icd: 10,
        n_ccs: 4,
        vocab_size: 60,
        min_len: 15,
        max_len: 25,
        embedding_dim,
        ..SynthConfig::default()
    }
}

//! Synthetic clinical-style corpora with a known keyword→code signal.
//!
//! Each ICD code owns a handful of signature keywords. Code frequencies
//! follow a Zipf law, and each document's token stream mixes its codes'
//! keywords with background vocabulary.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{write_corpus, RawDocument};
use super::embeddings::format_word_vectors;
use super::labels::CodeMapping;
use crate::error::{MarnError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub n_icd: usize,
    pub n_ccs: usize,
    /// Number of background (non-signature) words.
    pub vocab_size: usize,
    pub keywords_per_code: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub zipf_exponent: f64,
    /// Expected number of ICD codes per document.
    pub mean_labels: f64,
    /// Probability that a token is a signature keyword of one of the document's codes.
    pub signal: f64,
    /// Probability that a token is a keyword of an arbitrary code.
    pub noise: f64,
    pub embedding_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 2000,
            n_icd: 10,
            n_ccs: 4,
            vocab_size: 300,
            keywords_per_code: 3,
            min_len: 20,
            max_len: 40,
            zipf_exponent: 1.0,
            mean_labels: 2.0,
            signal: 0.2,
            noise: 0.02,
            embedding_dim: 100,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MarnError::Config(m));
        if self.n_ccs == 0 || self.n_ccs >= self.n_icd {
            return fail(format!(
                "need 0 < n_ccs < n_icd, got n_ccs={} n_icd={}",
                self.n_ccs, self.n_icd
            ));
        }
        if self.n_icd > 26 * 26 * 26 || self.keywords_per_code == 0 || self.keywords_per_code > 26 {
            return fail("n_icd ≤ 17576 and 1 ≤ keywords_per_code ≤ 26 required".into());
        }
        if self.n_docs == 0 || self.vocab_size == 0 || self.vocab_size > 26 * 26 * 26 {
            return fail("n_docs and vocab_size must be positive (vocab_size ≤ 17576)".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("bad length range [{}, {}]", self.min_len, self.max_len));
        }
        if !(0.0..=1.0).contains(&self.signal)
            || !(0.0..=1.0).contains(&self.noise)
            || self.signal + self.noise > 1.0
        {
            return fail("signal and noise must be probabilities with signal + noise ≤ 1".into());
        }
        if self.zipf_exponent < 0.0 || self.mean_labels <= 0.0 || self.embedding_dim == 0 {
            return fail("zipf_exponent ≥ 0, mean_labels > 0 and embedding_dim > 0 required".into());
        }
        Ok(())
    }
}

fn letters3(i: usize) -> String {
    let a = (b'a' + (i / 676) as u8) as char;
    let b = (b'a' + (i / 26 % 26) as u8) as char;
    let c = (b'a' + (i % 26) as u8) as char;
    format!("{a}{b}{c}")
}

pub fn icd_code_name(i: usize) -> String {
    format!("D{i:05}")
}

pub fn ccs_code_name(i: usize) -> String {
    format!("C{i:03}")
}

pub fn background_word(i: usize) -> String {
    format!("bg{}", letters3(i))
}

pub fn keyword(code: usize, k: usize) -> String {
    format!("kw{}{}", letters3(code), (b'a' + k as u8) as char)
}

/// Zipf weights `1/rank^s` for ranks 1..=n.
pub fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (1..=n).map(|r| (r as f64).powf(-s)).collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub docs: Vec<RawDocument>,
    pub mapping: CodeMapping,
    /// Word vectors for every background word and keyword.
    pub vectors: Vec<(String, Vec<f64>)>,
    /// Signature keywords, indexed by ICD code position.
    pub keywords: Vec<Vec<String>>,
    pub icd_codes: Vec<String>,
    pub embedding_dim: usize,
}

#[derive(Debug, Clone)]
pub struct CorpusFiles {
    pub corpus: PathBuf,
    pub mapping: PathBuf,
    pub embeddings: PathBuf,
}

impl SyntheticCorpus {
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<CorpusFiles> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| MarnError::io(dir, e))?;
        let files = CorpusFiles {
            corpus: dir.join("corpus.csv"),
            mapping: dir.join("mapping.csv"),
            embeddings: dir.join("embeddings.txt"),
        };
        write_corpus(&files.corpus, &self.docs)?;
        std::fs::write(&files.mapping, self.mapping.to_csv()).map_err(|e| MarnError::io(&files.mapping, e))?;
        std::fs::write(
            &files.embeddings,
            format_word_vectors(&self.vectors, self.embedding_dim),
        )
        .map_err(|e| MarnError::io(&files.embeddings, e))?;
        Ok(files)
    }
}

pub fn generate_synthetic_corpus(cfg: &SynthConfig, seed: u64) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let icd_codes: Vec<String> = (0..cfg.n_icd).map(icd_code_name).collect();
    let keywords: Vec<Vec<String>> = (0..cfg.n_icd)
        .map(|c| (0..cfg.keywords_per_code).map(|k| keyword(c, k)).collect())
        .collect();

    // Random surjective grouping: every CCS code receives at least one ICD code.
    let mut order: Vec<usize> = (0..cfg.n_icd).collect();
    order.shuffle(&mut rng);
    let mut group = vec![0; cfg.n_icd];
    for (pos, &icd) in order.iter().enumerate() {
        group[icd] = if pos < cfg.n_ccs {
            pos
        } else {
            rng.gen_range(0..cfg.n_ccs)
        };
    }
    let mut mapping = CodeMapping::new();
    for (icd, &g) in group.iter().enumerate() {
        mapping.insert(&icd_codes[icd], &ccs_code_name(g))?;
    }

    let weights = zipf_weights(cfg.n_icd, cfg.zipf_exponent);
    let total: f64 = weights.iter().sum();
    let include: Vec<f64> = weights
        .iter()
        .map(|w| (cfg.mean_labels * w / total).min(1.0))
        .collect();

    let mut docs = Vec::with_capacity(cfg.n_docs);
    for d in 0..cfg.n_docs {
        let mut codes: BTreeSet<usize> = (0..cfg.n_icd).filter(|&c| rng.gen::<f64>() < include[c]).collect();
        if codes.is_empty() {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = cfg.n_icd - 1;
            for (c, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = c;
                    break;
                }
                u -= w;
            }
            codes.insert(pick);
        }
        let code_list: Vec<usize> = codes.iter().copied().collect();
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let mut words = Vec::with_capacity(len + len / 10);
        for _ in 0..len {
            let u = rng.gen::<f64>();
            let word = if u < cfg.signal {
                let c = code_list[rng.gen_range(0..code_list.len())];
                keywords[c][rng.gen_range(0..cfg.keywords_per_code)].clone()
            } else if u < cfg.signal + cfg.noise {
                let c = rng.gen_range(0..cfg.n_icd);
                keywords[c][rng.gen_range(0..cfg.keywords_per_code)].clone()
            } else {
                background_word(rng.gen_range(0..cfg.vocab_size))
            };
            words.push(word);
            // numerals and punctuation that preprocessing must strip
            if rng.gen::<f64>() < 0.05 {
                words.push(format!("{}.", rng.gen_range(1..100)));
            }
        }
        docs.push(RawDocument {
            id: format!("doc{d:06}"),
            text: words.join(" "),
            labels: code_list.iter().map(|&c| icd_codes[c].clone()).collect(),
        });
    }

    let mut vectors = Vec::with_capacity(cfg.vocab_size + cfg.n_icd * cfg.keywords_per_code);
    let all_words = (0..cfg.vocab_size)
        .map(background_word)
        .chain(keywords.iter().flatten().cloned());
    for w in all_words {
        let v = (0..cfg.embedding_dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        vectors.push((w, v));
    }

    Ok(SyntheticCorpus {
        docs,
        mapping,
        vectors,
        keywords,
        icd_codes,
        embedding_dim: cfg.embedding_dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::corpus::write_corpus_to;
    use crate::text::labels::LabelSpace;
    use crate::text::vocab::tokenize;

    fn small() -> SynthConfig {
        SynthConfig {
            n_docs: 300,
            embedding_dim: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_output() {
        let a = generate_synthetic_corpus(&small(), 3).unwrap();
        let b = generate_synthetic_corpus(&small(), 3).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_corpus_to(&mut ba, &a.docs).unwrap();
        write_corpus_to(&mut bb, &b.docs).unwrap();
        assert_eq!(ba, bb);
        assert_eq!(a.mapping.to_csv(), b.mapping.to_csv());
        assert_eq!(
            format_word_vectors(&a.vectors, 4),
            format_word_vectors(&b.vectors, 4)
        );
        let c = generate_synthetic_corpus(&small(), 4).unwrap();
        assert_ne!(a.docs, c.docs);
    }

    #[test]
    fn zipf_frequency_ratio() {
        let cfg = SynthConfig {
            n_docs: 10_000,
            n_icd: 10,
            n_ccs: 4,
            zipf_exponent: 1.0,
            min_len: 1,
            max_len: 2,
            embedding_dim: 1,
            ..SynthConfig::default()
        };
        let corpus = generate_synthetic_corpus(&cfg, 11).unwrap();
        let mut counts = vec![0usize; 10];
        for d in &corpus.docs {
            for l in &d.labels {
                counts[corpus.icd_codes.iter().position(|c| c == l).unwrap()] += 1;
            }
        }
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        // theoretical ratio for s = 1 over 10 ranks is 10
        let ratio = max / min;
        assert!((5.0..=20.0).contains(&ratio), "ratio {ratio}, counts {counts:?}");
    }

    #[test]
    fn ccs_labels_are_the_image_of_icd_labels() {
        let corpus = generate_synthetic_corpus(&small(), 5).unwrap();
        let space = LabelSpace::from_mapping(&corpus.mapping).unwrap();
        // surjective
        let used: BTreeSet<usize> = space.icd_to_ccs().iter().copied().collect();
        assert_eq!(used.len(), space.n_ccs());
        for d in &corpus.docs {
            let (icd, ccs) = space.encode_labels(&d.labels).unwrap();
            let image: BTreeSet<usize> = icd.iter().map(|&i| space.ccs_of(i)).collect();
            assert_eq!(ccs, image);
            assert!(!icd.is_empty());
        }
    }

    #[test]
    fn keywords_are_enriched_in_labelled_documents() {
        let corpus = generate_synthetic_corpus(
            &SynthConfig {
                n_docs: 2000,
                embedding_dim: 1,
                ..SynthConfig::default()
            },
            6,
        )
        .unwrap();
        for (c, code) in corpus.icd_codes.iter().enumerate() {
            let (mut with, mut with_hit, mut without, mut without_hit) = (0, 0, 0, 0);
            for d in &corpus.docs {
                let toks = tokenize(&d.text);
                let hit = toks.iter().any(|t| corpus.keywords[c].contains(t));
                if d.labels.contains(code) {
                    with += 1;
                    with_hit += hit as usize;
                } else {
                    without += 1;
                    without_hit += hit as usize;
                }
            }
            let p_with = with_hit as f64 / with as f64;
            let p_without = without_hit as f64 / without as f64;
            assert!(p_with > p_without, "code {code}: {p_with} vs {p_without}");
        }
    }

    #[test]
    fn rejects_more_ccs_than_icd() {
        let cfg = SynthConfig {
            n_icd: 4,
            n_ccs: 4,
            ..SynthConfig::default()
        };
        assert!(matches!(
            generate_synthetic_corpus(&cfg, 0),
            Err(MarnError::Config(_))
        ));
    }

    #[test]
    fn generated_words_survive_preprocessing() {
        let corpus = generate_synthetic_corpus(&small(), 7).unwrap();
        for (w, _) in &corpus.vectors {
            assert_eq!(tokenize(w), vec![w.clone()]);
        }
    }
}

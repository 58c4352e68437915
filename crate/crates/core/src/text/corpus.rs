use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::labels::LabelSpace;
use super::vocab::{Vocabulary, UNK_ID};
use crate::error::{MarnError, Result};

/// One row of a corpus file: `id,text,labels` with labels joined by `;`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub text: String,
    pub labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    id: String,
    text: String,
    labels: String,
}

/// A preprocessed document: token ids plus both label sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<usize>,
    pub icd_labels: BTreeSet<usize>,
    pub ccs_labels: BTreeSet<usize>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn read_corpus_from(reader: impl Read) -> Result<Vec<RawDocument>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut docs = Vec::new();
    for row in rdr.deserialize() {
        let row: CsvRow = row?;
        let labels = row
            .labels
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        docs.push(RawDocument {
            id: row.id,
            text: row.text,
            labels,
        });
    }
    Ok(docs)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<RawDocument>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| MarnError::io(path, e))?;
    read_corpus_from(std::io::BufReader::new(file))
}

pub fn write_corpus_to(writer: impl Write, docs: &[RawDocument]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for d in docs {
        wtr.serialize(CsvRow {
            id: d.id.clone(),
            text: d.text.clone(),
            labels: d.labels.join(";"),
        })?;
    }
    wtr.flush().map_err(|e| MarnError::io("<corpus writer>", e))?;
    Ok(())
}

pub fn write_corpus(path: impl AsRef<Path>, docs: &[RawDocument]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| MarnError::io(path, e))?;
    write_corpus_to(std::io::BufWriter::new(file), docs)
}

/// Tokenizes and label-encodes raw documents. A document whose text
/// preprocesses to nothing keeps a single UNK token so it stays batchable.
pub fn prepare_documents(
    raw: &[RawDocument],
    vocab: &Vocabulary,
    space: &LabelSpace,
    max_len: usize,
) -> Result<Vec<Document>> {
    raw.iter()
        .map(|r| {
            let mut tokens = vocab.encode(&r.text, max_len);
            if tokens.is_empty() {
                log::warn!("document {} is empty after preprocessing", r.id);
                tokens.push(UNK_ID);
            }
            let (icd_labels, ccs_labels) = space.encode_labels(&r.labels)?;
            Ok(Document {
                id: r.id.clone(),
                tokens,
                icd_labels,
                ccs_labels,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<D> {
    pub train: Vec<D>,
    pub val: Vec<D>,
    pub test: Vec<D>,
}

/// Seeded shuffle followed by a contiguous three-way cut. Part sizes are
/// rounded; the test part takes the remainder.
pub fn split_dataset<D: Clone>(docs: &[D], fractions: [f64; 3], seed: u64) -> Result<Split<D>> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(MarnError::Config(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let n = docs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| docs[i].clone()).collect::<Vec<D>>();
    Ok(Split {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

use crate::error::{MarnError, Result};
use crate::text::{Document, PAD_ID};

/// Padded block of documents with masks and multi-hot targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// size×len token ids, row-major, padded with [`PAD_ID`].
    pub tokens: Vec<usize>,
    /// size×len, true on real tokens.
    pub mask: Vec<bool>,
    pub size: usize,
    pub len: usize,
    /// size×n_icd multi-hot.
    pub icd_targets: Vec<f64>,
    /// size×n_ccs multi-hot.
    pub ccs_targets: Vec<f64>,
    pub n_icd: usize,
    pub n_ccs: usize,
}

impl Batch {
    pub fn from_docs(docs: &[&Document], n_icd: usize, n_ccs: usize) -> Result<Batch> {
        if docs.is_empty() {
            return Err(MarnError::Input("cannot batch zero documents".into()));
        }
        let len = docs.iter().map(|d| d.tokens.len()).max().unwrap_or(0);
        if len == 0 {
            return Err(MarnError::Input("every document in the batch is empty".into()));
        }
        let size = docs.len();
        let mut tokens = vec![PAD_ID; size * len];
        let mut mask = vec![false; size * len];
        let mut icd_targets = vec![0.0; size * n_icd];
        let mut ccs_targets = vec![0.0; size * n_ccs];
        for (i, d) in docs.iter().enumerate() {
            if d.tokens.is_empty() {
                return Err(MarnError::Input(format!("document {} has no tokens", d.id)));
            }
            tokens[i * len..i * len + d.tokens.len()].copy_from_slice(&d.tokens);
            mask[i * len..i * len + d.tokens.len()].fill(true);
            for &c in &d.icd_labels {
                if c >= n_icd {
                    return Err(MarnError::MappingGap(format!("ICD index {c} in document {}", d.id)));
                }
                icd_targets[i * n_icd + c] = 1.0;
            }
            for &c in &d.ccs_labels {
                if c >= n_ccs {
                    return Err(MarnError::MappingGap(format!("CCS index {c} in document {}", d.id)));
                }
                ccs_targets[i * n_ccs + c] = 1.0;
            }
        }
        Ok(Batch {
            ids: docs.iter().map(|d| d.id.clone()).collect(),
            tokens,
            mask,
            size,
            len,
            icd_targets,
            ccs_targets,
            n_icd,
            n_ccs,
        })
    }

    pub fn mask_row(&self, i: usize) -> &[bool] {
        &self.mask[i * self.len..(i + 1) * self.len]
    }
}

/// Consecutive chunks of `batch_size` documents, each padded to its own
/// longest member.
pub fn pad_and_batch(docs: &[Document], batch_size: usize, n_icd: usize, n_ccs: usize) -> Result<Vec<Batch>> {
    if docs.is_empty() {
        return Err(MarnError::Input("no documents to batch".into()));
    }
    if batch_size == 0 {
        return Err(MarnError::Config("batch_size must be at least 1".into()));
    }
    docs.chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&Document> = chunk.iter().collect();
            Batch::from_docs(&refs, n_icd, n_ccs)
        })
        .collect()
}

//! Multi-label evaluation: AUC-ROC, F1 and precision at k.
//!
//! Score and truth matrices are row-major docs×codes.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MarnError, Result};

pub const F1_THRESHOLD: f64 = 0.5;
pub const REPORT_KS: [usize; 3] = [5, 8, 15];

fn check_dims(scores: &[f64], truth: &[bool], n_codes: usize) -> Result<usize> {
    if n_codes == 0 || scores.len() != truth.len() || scores.len() % n_codes != 0 {
        return Err(MarnError::Shape(format!(
            "{} scores and {} truth values for {n_codes} codes",
            scores.len(),
            truth.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MarnError::Numeric(format!("non-finite score {s}")));
    }
    Ok(scores.len() / n_codes)
}

/// Mann–Whitney AUC with midranks for ties. `None` when one class is absent.
pub fn binary_auc(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| truth[k]).count();
        rank_sum += midrank * pos_in_tie as f64;
        i = j + 1;
    }
    let p = n_pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucResult {
    pub macro_auc: f64,
    pub micro_auc: f64,
    /// Codes lacking a positive or a negative instance.
    pub excluded: Vec<usize>,
}

pub fn auc_roc(scores: &[f64], truth: &[bool], n_codes: usize) -> Result<AucResult> {
    let n_docs = check_dims(scores, truth, n_codes)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = Vec::new();
    for c in 0..n_codes {
        let s: Vec<f64> = (0..n_docs).map(|d| scores[d * n_codes + c]).collect();
        let t: Vec<bool> = (0..n_docs).map(|d| truth[d * n_codes + c]).collect();
        match binary_auc(&s, &t) {
            Some(a) => {
                sum += a;
                used += 1;
            }
            None => excluded.push(c),
        }
    }
    if used == 0 {
        return Err(MarnError::Undefined(
            "macro AUC: no code has both positive and negative instances".into(),
        ));
    }
    let micro_auc = binary_auc(scores, truth).ok_or_else(|| {
        MarnError::Undefined("micro AUC: flattened labels contain a single class".into())
    })?;
    Ok(AucResult {
        macro_auc: sum / used as f64,
        micro_auc,
        excluded,
    })
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// (macro, micro) F1 of the predictions `score ≥ threshold`.
pub fn f1_scores(scores: &[f64], truth: &[bool], n_codes: usize, threshold: f64) -> Result<(f64, f64)> {
    let n_docs = check_dims(scores, truth, n_codes)?;
    let mut counts = vec![(0usize, 0usize, 0usize); n_codes];
    for d in 0..n_docs {
        for (c, cnt) in counts.iter_mut().enumerate() {
            let i = d * n_codes + c;
            match (scores[i] >= threshold, truth[i]) {
                (true, true) => cnt.0 += 1,
                (true, false) => cnt.1 += 1,
                (false, true) => cnt.2 += 1,
                (false, false) => {}
            }
        }
    }
    let macro_f1 = counts.iter().map(|&(tp, fp, fn_)| f1(tp, fp, fn_)).sum::<f64>() / n_codes as f64;
    let (tp, fp, fn_) = counts
        .iter()
        .fold((0, 0, 0), |a, &(tp, fp, fn_)| (a.0 + tp, a.1 + fp, a.2 + fn_));
    Ok((macro_f1, f1(tp, fp, fn_)))
}

/// Highest-scored k codes of one document; ties go to the lower code index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| match row[b].total_cmp(&row[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    idx.truncate(k);
    idx
}

pub fn precision_at_k(scores: &[f64], truth: &[bool], n_codes: usize, k: usize) -> Result<f64> {
    let n_docs = check_dims(scores, truth, n_codes)?;
    if k == 0 || k > n_codes {
        return Err(MarnError::Input(format!("P@{k} needs 1 ≤ k ≤ {n_codes}")));
    }
    let total: f64 = (0..n_docs)
        .map(|d| {
            let row = &scores[d * n_codes..(d + 1) * n_codes];
            let hits = top_k(row, k).into_iter().filter(|&c| truth[d * n_codes + c]).count();
            hits as f64 / k as f64
        })
        .sum();
    Ok(total / n_docs as f64)
}

/// Every metric for one label branch on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Absent when no code has both classes.
    pub macro_auc: Option<f64>,
    /// Absent when the flattened labels hold one class.
    pub micro_auc: Option<f64>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    /// Keyed by k; only k ≤ n_codes.
    pub p_at_k: BTreeMap<usize, f64>,
    pub n_docs: usize,
    pub n_codes: usize,
    pub excluded_codes: Vec<String>,
}

impl MetricsReport {
    pub fn compute(scores: &[f64], truth: &[bool], n_codes: usize, code_names: Option<&[String]>) -> Result<Self> {
        let n_docs = check_dims(scores, truth, n_codes)?;
        let name = |c: usize| code_names.and_then(|n| n.get(c).cloned()).unwrap_or_else(|| c.to_string());
        let (macro_auc, micro_auc, excluded) = match auc_roc(scores, truth, n_codes) {
            Ok(a) => (Some(a.macro_auc), Some(a.micro_auc), a.excluded),
            Err(MarnError::Undefined(_)) => {
                let all: Vec<usize> = (0..n_codes).collect();
                let micro = binary_auc(scores, truth);
                (None, micro, all)
            }
            Err(e) => return Err(e),
        };
        let (macro_f1, micro_f1) = f1_scores(scores, truth, n_codes, F1_THRESHOLD)?;
        let mut p_at_k = BTreeMap::new();
        for k in REPORT_KS.into_iter().filter(|&k| k <= n_codes) {
            p_at_k.insert(k, precision_at_k(scores, truth, n_codes, k)?);
        }
        Ok(MetricsReport {
            macro_auc,
            micro_auc,
            macro_f1,
            micro_f1,
            p_at_k,
            n_docs,
            n_codes,
            excluded_codes: excluded.into_iter().map(name).collect(),
        })
    }

    /// Every reported value, for range checks.
    pub fn values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = [self.macro_auc, self.micro_auc].into_iter().flatten().collect();
        v.extend([self.macro_f1, self.micro_f1]);
        v.extend(self.p_at_k.values());
        v
    }
}

//! Diagnostics on trained models: normalized per-code loss, a 2-D PCA of the
//! code vectors, and a binomial test of ICD/CCS clustering in that plane.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;
use statrs::function::factorial::ln_binomial;

use crate::autodiff::bce_term;
use crate::error::{MarnError, Result};
use crate::model::{Branch, Marn};
use crate::tensor::Real;
use crate::text::{Document, LabelSpace};
use crate::trainer::{predict_documents, truth_matrix};

/// Tail level below which a region count is called significant.
pub const SIGNIFICANCE_LEVEL: f64 = 0.1;
/// Region radius as a fraction of the largest pairwise ICD distance.
pub const RADIUS_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodeLoss {
    pub code: usize,
    pub name: String,
    pub frequency: usize,
    /// `None` for codes that never occur.
    pub loss: Option<f64>,
}

/// Per-code losses in descending frequency order (ties by code index).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodeLossProfile {
    pub n_docs: usize,
    pub codes: Vec<CodeLoss>,
}

impl CodeLossProfile {
    pub fn losses(&self) -> Vec<f64> {
        self.codes.iter().filter_map(|c| c.loss).collect()
    }

    /// Population standard deviation over mean of the present codes.
    pub fn coefficient_of_variation(&self) -> Option<f64> {
        let l = self.losses();
        if l.is_empty() {
            return None;
        }
        let n = l.len() as f64;
        let mean = l.iter().sum::<f64>() / n;
        let var = l.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean > 0.0).then(|| var.sqrt() / mean)
    }

    pub fn write_tsv(&self, out: impl Write) -> Result<()> {
        let mut w = tsv(out);
        w.write_record(["rank", "code", "frequency", "normalized_bce"])?;
        for (rank, c) in self.codes.iter().enumerate() {
            let loss = c.loss.map_or_else(|| "absent".to_string(), |l| format!("{l:.9e}"));
            w.write_record([(rank + 1).to_string(), c.name.clone(), c.frequency.to_string(), loss])?;
        }
        w.flush().map_err(|e| MarnError::io("<table>", e))
    }
}

/// (Σ_docs BCE_i) / (freq_i · n_docs) per code from row-major probabilities.
pub fn normalized_loss_from_predictions(
    probs: &[f64],
    truth: &[bool],
    n_codes: usize,
    names: Option<&[String]>,
    eps: f64,
) -> Result<CodeLossProfile> {
    if n_codes == 0 || probs.len() != truth.len() || probs.len() % n_codes != 0 {
        return Err(MarnError::Shape(format!(
            "{} probabilities and {} labels for {n_codes} codes",
            probs.len(),
            truth.len()
        )));
    }
    let n_docs = probs.len() / n_codes;
    if n_docs == 0 {
        return Err(MarnError::Input("no documents".into()));
    }
    let mut codes: Vec<CodeLoss> = (0..n_codes)
        .map(|c| {
            let mut sum = 0.0;
            let mut freq = 0;
            for d in 0..n_docs {
                let y = truth[d * n_codes + c];
                freq += y as usize;
                sum += bce_term(probs[d * n_codes + c], if y { 1.0 } else { 0.0 }, eps);
            }
            CodeLoss {
                code: c,
                name: names.and_then(|n| n.get(c).cloned()).unwrap_or_else(|| c.to_string()),
                frequency: freq,
                loss: (freq > 0).then(|| sum / (freq as f64 * n_docs as f64)),
            }
        })
        .collect();
    codes.sort_by(|a, b| b.frequency.cmp(&a.frequency).then(a.code.cmp(&b.code)));
    Ok(CodeLossProfile { n_docs, codes })
}

/// ICD-branch profile of an eval-phase forward pass, always scored with BCE.
pub fn normalized_code_loss<T: Real>(
    model: &Marn<T>,
    docs: &[Document],
    labels: Option<&LabelSpace>,
    use_ram: bool,
    batch_size: usize,
    eps: f64,
) -> Result<CodeLossProfile> {
    let n = model.config.n_icd;
    let pred = predict_documents(model, docs, batch_size, use_ram)?;
    let truth = truth_matrix(docs, n, |d| &d.icd_labels);
    normalized_loss_from_predictions(&pred.icd, &truth, n, labels.map(|l| l.icd_codes()), eps)
}

/// Top-two principal components of a point set.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub coords: Vec<[f64; 2]>,
    /// Unit principal directions in input space.
    pub components: [Vec<f64>; 2],
    /// Fractions of total variance, non-increasing.
    pub explained: [f64; 2],
    pub mean: Vec<f64>,
}

/// PCA through the eigendecomposition of the sample covariance. Each
/// direction's sign is fixed so its largest-magnitude entry is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Pca2> {
    let n = points.len();
    if n < 3 {
        return Err(MarnError::Rank(format!("PCA needs at least 3 points, got {n}")));
    }
    let dim = points[0].len();
    if dim < 2 || points.iter().any(|p| p.len() != dim) {
        return Err(MarnError::Shape("points must share one dimension ≥ 2".into()));
    }
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, dim, |i, j| points[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    if !(total > 0.0) {
        return Err(MarnError::Rank("points have no spread".into()));
    }
    let direction = |k: usize| -> Vec<f64> {
        let col = eig.eigenvectors.column(order[k]);
        let pivot = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        let s = if pivot < 0.0 { -1.0 } else { 1.0 };
        col.iter().map(|v| s * v).collect()
    };
    let components = [direction(0), direction(1)];
    let explained = [0, 1].map(|k| (eig.eigenvalues[order[k]].max(0.0) / total).clamp(0.0, 1.0));
    let coords = (0..n)
        .map(|i| {
            [0, 1].map(|k| (0..dim).map(|j| x[(i, j)] * components[k][j]).sum::<f64>())
        })
        .collect();
    Ok(Pca2 {
        coords,
        components,
        explained,
        mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectedCode {
    pub branch: Branch,
    pub index: usize,
    pub name: String,
    pub x: f64,
    pub y: f64,
}

/// ICD codes followed by CCS codes in one shared plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection2D {
    pub codes: Vec<ProjectedCode>,
    pub explained: [f64; 2],
    pub n_icd: usize,
}

impl Projection2D {
    pub fn icd_points(&self) -> Vec<[f64; 2]> {
        self.points(Branch::Icd)
    }

    pub fn ccs_points(&self) -> Vec<[f64; 2]> {
        self.points(Branch::Ccs)
    }

    fn points(&self, b: Branch) -> Vec<[f64; 2]> {
        self.codes.iter().filter(|c| c.branch == b).map(|c| [c.x, c.y]).collect()
    }

    pub fn write_tsv(&self, out: impl Write) -> Result<()> {
        let mut w = tsv(out);
        w.write_record(["branch", "code", "x", "y"])?;
        for c in &self.codes {
            let branch = match c.branch {
                Branch::Icd => "icd",
                Branch::Ccs => "ccs",
            };
            w.write_record([branch.to_string(), c.name.clone(), format!("{:.9e}", c.x), format!("{:.9e}", c.y)])?;
        }
        w.flush().map_err(|e| MarnError::io("<table>", e))
    }
}

/// Projects the per-code vectors of both heads. With `with_classifier` each
/// code is its query column joined with its classifier row, otherwise the
/// query column alone.
pub fn project_codes_2d<T: Real>(model: &Marn<T>, labels: Option<&LabelSpace>, with_classifier: bool) -> Result<Projection2D> {
    let icd = model.code_embeddings(Branch::Icd, with_classifier);
    let ccs = model.code_embeddings(Branch::Ccs, with_classifier);
    let n_icd = icd.len();
    let pca = pca_2d(&[icd, ccs.clone()].concat())?;
    let name = |b: Branch, i: usize| {
        labels
            .and_then(|l| match b {
                Branch::Icd => l.icd_codes().get(i),
                Branch::Ccs => l.ccs_codes().get(i),
            })
            .cloned()
            .unwrap_or_else(|| i.to_string())
    };
    let codes = pca
        .coords
        .iter()
        .enumerate()
        .map(|(row, c)| {
            let (branch, index) = if row < n_icd { (Branch::Icd, row) } else { (Branch::Ccs, row - n_icd) };
            ProjectedCode {
                branch,
                index,
                name: name(branch, index),
                x: c[0],
                y: c[1],
            }
        })
        .collect();
    Ok(Projection2D {
        codes,
        explained: pca.explained,
        n_icd,
    })
}

/// P(K > t) for K ~ Binomial(n, p), summed in log space.
pub fn binomial_upper_tail(n: u64, p: f64, t: i64) -> f64 {
    if t < 0 {
        return 1.0;
    }
    if t as u64 >= n {
        return 0.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let terms: Vec<f64> = ((t as u64 + 1)..=n)
        .map(|j| ln_binomial(n, j) + j as f64 * lp + (n - j) as f64 * lq)
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = terms.iter().map(|l| (l - max).exp()).sum();
    (max + s.ln()).exp().min(1.0)
}

/// Smallest T ≥ 0 with P(K > T) < `level`.
pub fn binomial_threshold(n: u64, p: f64, level: f64) -> u64 {
    (0..=n).find(|&t| binomial_upper_tail(n, p, t as i64) < level).unwrap_or(n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CcsRegion {
    pub ccs: usize,
    pub name: String,
    /// ICD points inside the region.
    pub n: usize,
    /// Of those, the ICD codes mapping to this CCS code.
    pub k: usize,
    /// Share of all ICD codes mapping to this CCS code.
    pub p: f64,
    pub threshold: u64,
    pub significant: bool,
    /// No ICD point fell inside the region.
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignificanceReport {
    pub radius: f64,
    pub count: usize,
    pub regions: Vec<CcsRegion>,
}

impl SignificanceReport {
    pub fn write_tsv(&self, out: impl Write) -> Result<()> {
        let mut w = tsv(out);
        w.write_record(["ccs", "n", "k", "p", "threshold", "significant", "empty"])?;
        for r in &self.regions {
            w.write_record([
                r.name.clone(),
                r.n.to_string(),
                r.k.to_string(),
                format!("{:.6}", r.p),
                r.threshold.to_string(),
                r.significant.to_string(),
                r.empty.to_string(),
            ])?;
        }
        w.flush().map_err(|e| MarnError::io("<table>", e))
    }
}

/// Counts CCS codes whose neighbourhood holds more of their own ICD codes
/// than a binomial draw would at the significance level. Regions are closed
/// discs around each CCS point.
pub fn significant_ccs_count(
    icd: &[[f64; 2]],
    ccs: &[[f64; 2]],
    icd_to_ccs: &[usize],
    ccs_names: Option<&[String]>,
) -> Result<SignificanceReport> {
    if icd.len() != icd_to_ccs.len() {
        return Err(MarnError::Shape(format!("{} ICD points, {} mapping entries", icd.len(), icd_to_ccs.len())));
    }
    if icd.is_empty() {
        return Err(MarnError::Input("no ICD points".into()));
    }
    if let Some(&c) = icd_to_ccs.iter().find(|&&c| c >= ccs.len()) {
        return Err(MarnError::Input(format!("CCS index {c} out of range")));
    }
    let dist = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
    let mut longest = 0.0f64;
    for (i, a) in icd.iter().enumerate() {
        for b in &icd[i + 1..] {
            longest = longest.max(dist(a, b));
        }
    }
    let radius = RADIUS_FRACTION * longest;
    let regions: Vec<CcsRegion> = ccs
        .iter()
        .enumerate()
        .map(|(c, centre)| {
            let inside: Vec<usize> = (0..icd.len()).filter(|&i| dist(&icd[i], centre) <= radius).collect();
            let n = inside.len();
            let k = inside.iter().filter(|&&i| icd_to_ccs[i] == c).count();
            let p = icd_to_ccs.iter().filter(|&&m| m == c).count() as f64 / icd.len() as f64;
            let threshold = binomial_threshold(n as u64, p, SIGNIFICANCE_LEVEL);
            CcsRegion {
                ccs: c,
                name: ccs_names.and_then(|n| n.get(c).cloned()).unwrap_or_else(|| c.to_string()),
                n,
                k,
                p,
                threshold,
                significant: n > 0 && k as u64 > threshold,
                empty: n == 0,
            }
        })
        .collect();
    Ok(SignificanceReport {
        radius,
        count: regions.iter().filter(|r| r.significant).count(),
        regions,
    })
}

pub fn projection_significance(proj: &Projection2D, labels: &LabelSpace) -> Result<SignificanceReport> {
    let icd = proj.icd_points();
    let ccs = proj.ccs_points();
    if icd.len() != labels.n_icd() || ccs.len() != labels.n_ccs() {
        return Err(MarnError::Shape("projection does not match the label space".into()));
    }
    significant_ccs_count(&icd, &ccs, labels.icd_to_ccs(), Some(labels.ccs_codes()))
}

fn tsv<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().delimiter(b'\t').from_writer(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn base_rate_predictor_matches_closed_form() {
        let n_docs = 40;
        let freq = 9;
        let p = freq as f64 / n_docs as f64;
        let probs = vec![p; n_docs];
        let truth: Vec<bool> = (0..n_docs).map(|d| d % 4 == 1 && d < 36).collect();
        assert_eq!(truth.iter().filter(|&&t| t).count(), freq);
        let prof = normalized_loss_from_predictions(&probs, &truth, 1, None, 1e-7).unwrap();
        let expect = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln()) * n_docs as f64 / (freq as f64 * n_docs as f64);
        approx::assert_relative_eq!(prof.codes[0].loss.unwrap(), expect, max_relative = 1e-12);
    }

    #[test]
    fn perfect_predictor_is_near_zero() {
        let truth = vec![true, false, false, true, true, false];
        let probs: Vec<f64> = truth.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
        let prof = normalized_loss_from_predictions(&probs, &truth, 2, None, 1e-7).unwrap();
        assert!(prof.losses().iter().all(|&l| l < 1e-6));
    }

    #[test]
    fn order_is_by_frequency_and_absent_codes_are_flagged() {
        // 3 docs × 3 codes; code 2 occurs 3×, code 0 once, code 1 never
        let truth = vec![true, false, true, false, false, true, false, false, true];
        let probs = vec![0.5; 9];
        let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let prof = normalized_loss_from_predictions(&probs, &truth, 3, Some(&names), 1e-7).unwrap();
        let order: Vec<&str> = prof.codes.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(order, ["c", "a", "b"]);
        assert_eq!(prof.codes[2].loss, None);
        let mut buf = Vec::new();
        prof.write_tsv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("absent"));
    }

    #[test]
    fn document_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n_docs, n_codes) = (30, 5);
        let probs: Vec<f64> = (0..n_docs * n_codes).map(|_| rng.gen_range(0.01..0.99)).collect();
        let truth: Vec<bool> = (0..n_docs * n_codes).map(|_| rng.gen_bool(0.3)).collect();
        let a = normalized_loss_from_predictions(&probs, &truth, n_codes, None, 1e-7).unwrap();
        let perm: Vec<usize> = (0..n_docs).rev().collect();
        let pick = |v: &[f64]| perm.iter().flat_map(|&d| v[d * n_codes..(d + 1) * n_codes].to_vec()).collect::<Vec<_>>();
        let tp: Vec<bool> = perm.iter().flat_map(|&d| truth[d * n_codes..(d + 1) * n_codes].to_vec()).collect();
        let b = normalized_loss_from_predictions(&pick(&probs), &tp, n_codes, None, 1e-7).unwrap();
        for (x, y) in a.codes.iter().zip(&b.codes) {
            assert_eq!((x.code, x.frequency), (y.code, y.frequency));
            approx::assert_relative_eq!(x.loss.unwrap_or(0.0), y.loss.unwrap_or(0.0), max_relative = 1e-12);
        }
    }

    /// Cyclic Jacobi eigensolver for symmetric matrices.
    fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = a.len();
        let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for row in v.iter_mut() {
                        let (vp, vq) = (row[p], row[q]);
                        row[p] = c * vp - s * vq;
                        row[q] = s * vp + c * vq;
                    }
                }
            }
        }
        let vals = (0..n).map(|i| a[i][i]).collect();
        let vecs = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
        (vals, vecs)
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn agrees_with_jacobi_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let pts = random_points(&mut rng, 20, 8);
        let got = pca_2d(&pts).unwrap();
        let mean: Vec<f64> = (0..8).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / 20.0).collect();
        let cov: Vec<Vec<f64>> = (0..8)
            .map(|a| (0..8).map(|b| pts.iter().map(|p| (p[a] - mean[a]) * (p[b] - mean[b])).sum::<f64>() / 19.0).collect())
            .collect();
        let (vals, vecs) = jacobi(cov);
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        let total: f64 = vals.iter().sum();
        for k in 0..2 {
            let dir = &vecs[order[k]];
            approx::assert_relative_eq!(got.explained[k], vals[order[k]] / total, max_relative = 1e-9);
            let proj: Vec<f64> = pts.iter().map(|p| (0..8).map(|j| (p[j] - mean[j]) * dir[j]).sum()).collect();
            let sign = if proj.iter().zip(&got.coords).map(|(a, c)| a * c[k]).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
            for (a, c) in proj.iter().zip(&got.coords) {
                assert!((sign * a - c[k]).abs() < 1e-6, "{a} vs {}", c[k]);
            }
        }
        assert!(got.explained[0] >= got.explained[1]);
        let dot: f64 = got.components[0].iter().zip(&got.components[1]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-10);
    }

    #[test]
    fn planar_points_are_fully_explained() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let u = [0.3, -0.1, 0.5, 0.2, 0.7];
        let v = [0.1, 0.9, -0.2, 0.0, 0.4];
        let pts: Vec<Vec<f64>> = (0..12)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
                (0..5).map(|j| 1.0 + a * u[j] + b * v[j]).collect()
            })
            .collect();
        let got = pca_2d(&pts).unwrap();
        assert!((got.explained[0] + got.explained[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_changes_coordinates_only_by_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let pts = random_points(&mut rng, 15, 3);
        // rotation about the z axis, then about the x axis
        let (a, b) = (0.7f64, -1.1f64);
        let rot = |p: &Vec<f64>| {
            let (x, y, z) = (a.cos() * p[0] - a.sin() * p[1], a.sin() * p[0] + a.cos() * p[1], p[2]);
            vec![x, b.cos() * y - b.sin() * z, b.sin() * y + b.cos() * z]
        };
        let r: Vec<Vec<f64>> = pts.iter().map(rot).collect();
        let (p1, p2) = (pca_2d(&pts).unwrap(), pca_2d(&r).unwrap());
        for k in 0..2 {
            let s = if p1.coords[0][k] * p2.coords[0][k] < 0.0 { -1.0 } else { 1.0 };
            for (x, y) in p1.coords.iter().zip(&p2.coords) {
                assert!((x[k] - s * y[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn too_few_points_is_a_rank_error() {
        let pts = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(matches!(pca_2d(&pts), Err(MarnError::Rank(_))));
    }

    fn direct_tail(n: u64, p: f64, t: i64) -> f64 {
        // Σ_{j>t} C(n,j) p^j (1−p)^{n−j} with C built by products
        let mut total = 0.0;
        for j in 0..=n {
            if (j as i64) <= t {
                continue;
            }
            let mut c = 1.0;
            for i in 0..j {
                c *= (n - i) as f64 / (i + 1) as f64;
            }
            total += c * p.powi(j as i32) * (1.0 - p).powi((n - j) as i32);
        }
        total
    }

    #[test]
    fn tail_boundaries_are_exact() {
        for n in [0u64, 1, 5, 40] {
            for p in [0.0, 0.05, 0.5, 1.0] {
                assert_eq!(binomial_upper_tail(n, p, n as i64), 0.0);
                assert_eq!(binomial_upper_tail(n, p, -1), 1.0);
            }
        }
    }

    #[test]
    fn tail_matches_direct_sum() {
        for n in [1u64, 3, 10, 25] {
            for p in [0.01, 0.2, 0.5, 0.9] {
                for t in 0..n as i64 {
                    let (a, b) = (binomial_upper_tail(n, p, t), direct_tail(n, p, t));
                    assert!((a - b).abs() <= 1e-12 + 1e-10 * b, "n={n} p={p} t={t}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn constructed_cluster_is_significant() {
        // 3 of 12 ICD codes sit on CCS 0; the rest spread far away
        let mut icd = vec![[0.0, 0.0]; 3];
        let mut map = vec![0; 3];
        for i in 0..9 {
            icd.push([10.0 + i as f64, 5.0 * (i % 3) as f64]);
            map.push(1 + i % 2);
        }
        let ccs = [[0.0, 0.0], [14.0, 5.0], [50.0, 50.0]];
        let rep = significant_ccs_count(&icd, &ccs, &map, None).unwrap();
        let r0 = &rep.regions[0];
        assert_eq!((r0.n, r0.k), (3, 3));
        assert!(r0.significant);
        assert!((r0.p - 0.25).abs() < 1e-15);
        assert!(rep.regions[2].empty && !rep.regions[2].significant);
    }

    #[test]
    fn rigid_motions_keep_the_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let icd: Vec<[f64; 2]> = (0..30).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
        let map: Vec<usize> = (0..30).map(|_| rng.gen_range(0..5)).collect();
        let ccs: Vec<[f64; 2]> = (0..5).map(|c| icd[map.iter().position(|&m| m == c).unwrap_or(0)]).collect();
        let base = significant_ccs_count(&icd, &ccs, &map, None).unwrap();
        let (th, dx, dy) = (0.9f64, 3.0, -7.0);
        let mv = |p: &[f64; 2]| [th.cos() * p[0] - th.sin() * p[1] + dx, th.sin() * p[0] + th.cos() * p[1] + dy];
        let moved = significant_ccs_count(&icd.iter().map(mv).collect::<Vec<_>>(), &ccs.iter().map(mv).collect::<Vec<_>>(), &map, None).unwrap();
        assert_eq!(base.count, moved.count);
        let nk = |r: &SignificanceReport| r.regions.iter().map(|r| (r.n, r.k)).collect::<Vec<_>>();
        assert_eq!(nk(&base), nk(&moved));
    }
}

use rand::Rng;

use super::params::{ParamId, ParamStore};
use crate::autodiff::{Graph, Var};
use crate::error::{MarnError, Result};
use crate::tensor::Real;

/// Label-wise attention and per-code scoring for one label branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionHead {
    /// 2d_r×d_m attention queries.
    pub q: ParamId,
    /// d_m×2d_r classifier weights.
    pub w: ParamId,
    /// d_m biases.
    pub b: ParamId,
    pub d_m: usize,
    pub hidden: usize,
}

/// Attention weights and output probabilities of one head.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// batch×n×d_m
    pub attention: Var,
    /// batch×d_m×hidden
    pub features: Var,
    /// batch×d_m
    pub probs: Var,
}

impl AttentionHead {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        d_m: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d_m == 0 || hidden == 0 {
            return Err(MarnError::Config(format!("{name}: empty head ({hidden}×{d_m})")));
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        let q = store.uniform(format!("{name}.q"), &[hidden, d_m], bound, rng);
        let w = store.uniform(format!("{name}.w"), &[d_m, hidden], bound, rng);
        let b = store.zeros(format!("{name}.b"), &[d_m]);
        Ok(AttentionHead { q, w, b, d_m, hidden })
    }

    /// O: batch×n×hidden → A = softmax over positions of O·Q.
    pub fn scores<T: Real>(&self, g: &mut Graph<T>, vars: &[Var], o: Var, mask: &[bool]) -> Result<Var> {
        let (b, n) = match *g.shape(o) {
            [b, n, h] if h == self.hidden => (b, n),
            ref s => {
                return Err(MarnError::Dimension {
                    kernel: "attention",
                    lhs: s.to_vec(),
                    rhs: vec![self.hidden, self.d_m],
                })
            }
        };
        let flat = g.reshape(o, &[b * n, self.hidden])?;
        let logits = g.matmul(flat, self.q.of(vars))?;
        let logits = g.reshape(logits, &[b, n, self.d_m])?;
        g.masked_softmax(logits, Some(mask))
    }

    /// V = Aᵀ·O per document.
    pub fn attend<T: Real>(&self, g: &mut Graph<T>, o: Var, a: Var) -> Result<Var> {
        g.batch_matmul(a, o, true, false)
    }

    /// s_m = Σ_h W[m,h]·V[m,h] + b[m], probs = σ(s).
    pub fn score_and_activate<T: Real>(&self, g: &mut Graph<T>, vars: &[Var], v: Var) -> Result<Var> {
        let wv = g.mul(v, self.w.of(vars))?;
        let s = g.sum_axis(wv, 2)?;
        let s = g.add(s, self.b.of(vars))?;
        g.sigmoid(s)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, vars: &[Var], o: Var, mask: &[bool]) -> Result<HeadOutput> {
        let attention = self.scores(g, vars, o, mask)?;
        let features = self.attend(g, o, attention)?;
        let probs = self.score_and_activate(g, vars, features)?;
        Ok(HeadOutput {
            attention,
            features,
            probs,
        })
    }
}

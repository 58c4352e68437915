use rand::Rng;

use super::params::{ParamId, ParamStore};
use crate::autodiff::{Graph, Var};
use crate::error::{MarnError, Result};
use crate::tensor::{Real, Tensor};

/// One direction of the GRU. Input maps are d_e×d_r, recurrent maps d_r×d_r.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruWeights {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
}

impl GruWeights {
    fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, d_e: usize, d_r: usize, rng: &mut impl Rng) -> Self {
        let wb = 1.0 / (d_e as f64).sqrt();
        let ub = 1.0 / (d_r as f64).sqrt();
        let w_z = store.uniform(format!("{prefix}.w_z"), &[d_e, d_r], wb, rng);
        let w_r = store.uniform(format!("{prefix}.w_r"), &[d_e, d_r], wb, rng);
        let w_h = store.uniform(format!("{prefix}.w_h"), &[d_e, d_r], wb, rng);
        let u_z = store.uniform(format!("{prefix}.u_z"), &[d_r, d_r], ub, rng);
        let u_r = store.uniform(format!("{prefix}.u_r"), &[d_r, d_r], ub, rng);
        let u_h = store.uniform(format!("{prefix}.u_h"), &[d_r, d_r], ub, rng);
        let b_z = store.zeros(format!("{prefix}.b_z"), &[d_r]);
        let b_r = store.zeros(format!("{prefix}.b_r"), &[d_r]);
        let b_h = store.zeros(format!("{prefix}.b_h"), &[d_r]);
        GruWeights {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
        }
    }
}

/// Embedding table plus a bidirectional GRU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoder {
    pub embedding: ParamId,
    pub forward: GruWeights,
    pub backward: GruWeights,
    pub d_e: usize,
    pub d_r: usize,
}

impl Encoder {
    /// `embeddings`, when given, must be vocab_size×d_e; otherwise rows are
    /// drawn from ±0.25/√d_e with a zero pad row.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        vocab_size: usize,
        d_e: usize,
        d_r: usize,
        embeddings: Option<&Tensor<f64>>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if vocab_size < 2 || d_e == 0 || d_r == 0 {
            return Err(MarnError::Config(format!(
                "encoder needs vocab_size ≥ 2, d_e ≥ 1, d_r ≥ 1 (got {vocab_size}, {d_e}, {d_r})"
            )));
        }
        let table = match embeddings {
            Some(e) => {
                if e.shape() != [vocab_size, d_e] {
                    return Err(MarnError::Shape(format!(
                        "embedding matrix {:?} does not match vocab {vocab_size} × d_e {d_e}",
                        e.shape()
                    )));
                }
                e.cast()
            }
            None => {
                let bound = 0.25 / (d_e as f64).sqrt();
                let data = (0..vocab_size * d_e)
                    .map(|i| {
                        if i < d_e {
                            T::zero()
                        } else {
                            T::lit(rng.gen_range(-bound..=bound))
                        }
                    })
                    .collect();
                Tensor::from_parts(vec![vocab_size, d_e], data)
            }
        };
        let embedding = store.add("encoder.embedding", table);
        let forward = GruWeights::init(store, "encoder.fwd", d_e, d_r, rng);
        let backward = GruWeights::init(store, "encoder.bwd", d_e, d_r, rng);
        Ok(Encoder {
            embedding,
            forward,
            backward,
            d_e,
            d_r,
        })
    }

    /// Embeds a batch×n block of ids (row-major) into batch×n×d_e.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, vars: &[Var], tokens: &[usize], batch: usize) -> Result<Var> {
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(MarnError::Shape(format!(
                "{} token ids cannot form {batch} sequences",
                tokens.len()
            )));
        }
        let n = tokens.len() / batch;
        let x = g.embedding(self.embedding.of(vars), tokens)?;
        g.reshape(x, &[batch, n, self.d_e])
    }

    /// X: batch×n×d_e, mask: batch·n → H: batch×n×2d_r.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, vars: &[Var], x: Var, mask: &[bool]) -> Result<Var> {
        let fwd = run_direction(g, vars, &self.forward, x, mask, self.d_r, false)?;
        let bwd = run_direction(g, vars, &self.backward, x, mask, self.d_r, true)?;
        g.concat(&[fwd, bwd], 2)
    }
}

/// Runs one GRU direction over a batch×n×d_e input and returns batch×n×d_r.
/// Masked steps keep the previous state and emit zeros.
pub fn run_direction<T: Real>(
    g: &mut Graph<T>,
    vars: &[Var],
    w: &GruWeights,
    x: Var,
    mask: &[bool],
    d_r: usize,
    reverse: bool,
) -> Result<Var> {
    let (b, n, d_e) = match *g.shape(x) {
        [b, n, d] => (b, n, d),
        ref s => return Err(MarnError::Shape(format!("GRU input must be batch×n×d_e, got {s:?}"))),
    };
    if mask.len() != b * n {
        return Err(MarnError::Shape(format!("mask length {} for {b}×{n} input", mask.len())));
    }
    let w_cat = g.concat(&[w.w_z.of(vars), w.w_r.of(vars), w.w_h.of(vars)], 1)?;
    let b_cat = g.concat(&[w.b_z.of(vars), w.b_r.of(vars), w.b_h.of(vars)], 0)?;
    let u_zr = g.concat(&[w.u_z.of(vars), w.u_r.of(vars)], 1)?;
    let u_h = w.u_h.of(vars);

    let flat = g.reshape(x, &[b * n, d_e])?;
    let proj = g.matmul(flat, w_cat)?;
    let proj = g.add(proj, b_cat)?;
    let proj = g.reshape(proj, &[b, n, 3 * d_r])?;

    let one = T::one();
    let mut h = g.constant(Tensor::zeros(&[b, d_r]));
    let mut outputs = vec![None; n];
    for step in 0..n {
        let t = if reverse { n - 1 - step } else { step };
        let m_t: Vec<T> = (0..b)
            .flat_map(|i| {
                let keep = if mask[i * n + t] { one } else { T::zero() };
                std::iter::repeat_n(keep, d_r)
            })
            .collect();
        let m_t = g.constant(Tensor::from_parts(vec![b, d_r], m_t));

        let xt = g.narrow(proj, 1, t, 1)?;
        let xt = g.reshape(xt, &[b, 3 * d_r])?;
        let xz = g.narrow(xt, 1, 0, d_r)?;
        let xr = g.narrow(xt, 1, d_r, d_r)?;
        let xh = g.narrow(xt, 1, 2 * d_r, d_r)?;

        let hu = g.matmul(h, u_zr)?;
        let hz = g.narrow(hu, 1, 0, d_r)?;
        let hr = g.narrow(hu, 1, d_r, d_r)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;
        let rh = g.mul(r, h)?;
        let c = g.matmul(rh, u_h)?;
        let c = g.add(xh, c)?;
        let cand = g.tanh(c)?;

        // h ← h + (z⊙m)⊙(h̃ − h), i.e. (1−z)⊙h + z⊙h̃ on real steps
        let zm = g.mul(z, m_t)?;
        let diff = g.sub(cand, h)?;
        let upd = g.mul(zm, diff)?;
        h = g.add(h, upd)?;
        let y = g.mul(h, m_t)?;
        outputs[t] = Some(g.reshape(y, &[b, 1, d_r])?);
    }
    let outputs: Vec<Var> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
    g.concat(&outputs, 1)
}

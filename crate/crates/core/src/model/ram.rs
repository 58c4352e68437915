use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::autodiff::{Graph, NormMode, Var};
use crate::error::{MarnError, Result};
use crate::tensor::Real;

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Running statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormState<T> {
    pub name: String,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> NormState<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        NormState {
            name: name.into(),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Momentum update from biased batch statistics; the variance is
    /// corrected to its unbiased estimate before blending.
    pub fn update(&mut self, mean: &[T], biased_var: &[T], count: usize, momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::one() - m;
        let correction = if count > 1 {
            T::lit(count as f64 / (count as f64 - 1.0))
        } else {
            T::one()
        };
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(biased_var) {
            *r = keep * *r + m * b * correction;
        }
    }

    pub fn cast<U: Real>(&self) -> NormState<U> {
        NormState {
            name: self.name.clone(),
            running_mean: self.running_mean.iter().map(|v| U::lit(v.as_f64())).collect(),
            running_var: self.running_var.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// How normalization layers behave during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics; new statistics are reported back for the running update.
    Train,
    /// Running statistics.
    Eval,
}

/// Normalization nodes created during a forward pass, paired with the index
/// of the [`NormState`] they belong to.
pub type NormTrace = Vec<(usize, Var)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBn {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub norm: usize,
    pub transposed: bool,
}

impl ConvBn {
    fn init<T: Real>(
        store: &mut ParamStore<T>,
        norms: &mut Vec<NormState<T>>,
        name: &str,
        c_in: usize,
        c_out: usize,
        transposed: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((3 * c_in) as f64).sqrt();
        let shape = if transposed { [c_in, c_out, 3] } else { [c_out, c_in, 3] };
        let kernel = store.uniform(format!("{name}.kernel"), &shape, bound, rng);
        let bias = store.zeros(format!("{name}.bias"), &[c_out]);
        let gamma = store.add(format!("{name}.gamma"), crate::Tensor::full(&[c_out], T::one()));
        let beta = store.zeros(format!("{name}.beta"), &[c_out]);
        norms.push(NormState::new(name, c_out));
        ConvBn {
            kernel,
            bias,
            gamma,
            beta,
            norm: norms.len() - 1,
            transposed,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let Ctx {
            g,
            vars,
            norms,
            mask,
            phase,
            trace,
        } = ctx;
        let (k, b) = (self.kernel.of(vars), self.bias.of(vars));
        let y = if self.transposed {
            g.conv_transpose1d(x, k, b)?
        } else {
            g.conv1d(x, k, b)?
        };
        let eps = T::lit(NORM_EPS);
        let mode = match phase {
            Phase::Train => NormMode::Train { eps },
            Phase::Eval => NormMode::Eval {
                mean: norms[self.norm].running_mean.clone(),
                var: norms[self.norm].running_var.clone(),
                eps,
            },
        };
        let out = g.batch_norm(y, self.gamma.of(vars), self.beta.of(vars), Some(mask), mode)?;
        trace.push((self.norm, out));
        Ok(out)
    }
}

/// Shared state threaded through the convolutional blocks.
pub struct Ctx<'a, T> {
    pub g: &'a mut Graph<T>,
    pub vars: &'a [Var],
    pub norms: &'a [NormState<T>],
    pub mask: &'a [bool],
    pub phase: Phase,
    pub trace: &'a mut NormTrace,
}

/// conv+norm → tanh → conv+norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub first: ConvBn,
    pub second: ConvBn,
    pub c_in: usize,
    pub c_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Halves the channels.
    Down,
    /// Keeps the channels.
    Lateral,
    /// Doubles the channels with a transposed convolution.
    Up,
}

impl Block {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        norms: &mut Vec<NormState<T>>,
        name: &str,
        kind: BlockKind,
        c_in: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c_out = match kind {
            BlockKind::Down => {
                if c_in % 2 != 0 || c_in < 2 {
                    return Err(MarnError::Config(format!(
                        "down block needs an even channel count, got {c_in}"
                    )));
                }
                c_in / 2
            }
            BlockKind::Lateral => c_in,
            BlockKind::Up => 2 * c_in,
        };
        let first = ConvBn::init(store, norms, &format!("{name}.conv1"), c_in, c_out, kind == BlockKind::Up, rng);
        let second = ConvBn::init(store, norms, &format!("{name}.conv2"), c_out, c_out, false, rng);
        Ok(Block {
            first,
            second,
            c_in,
            c_out,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.first.forward(ctx, x)?;
        let y = ctx.g.tanh(y)?;
        self.second.forward(ctx, y)
    }
}

/// Intermediate features of one RAM pass.
#[derive(Debug, Clone, Copy)]
pub struct RamTrace {
    pub d1: Var,
    pub d2: Var,
    pub l1: Var,
    pub u1: Var,
    pub o: Var,
}

/// Down/lateral/up pyramid whose output gates the encoder features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ram {
    pub down1: Block,
    pub down2: Block,
    pub lateral: Block,
    pub up1: Block,
    pub up2: Block,
    pub dropout: f64,
}

impl Ram {
    /// Channel plan 2d_r → d_r → d_r/2 → d_r/2 → d_r → 2d_r.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        norms: &mut Vec<NormState<T>>,
        d_r: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d_r % 2 != 0 || d_r < 2 {
            return Err(MarnError::Config(format!("RAM needs an even d_r, got {d_r}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(MarnError::Config(format!("dropout rate must be in [0,1), got {dropout}")));
        }
        let down1 = Block::init(store, norms, "ram.down1", BlockKind::Down, 2 * d_r, rng)?;
        let down2 = Block::init(store, norms, "ram.down2", BlockKind::Down, d_r, rng)?;
        let lateral = Block::init(store, norms, "ram.lateral", BlockKind::Lateral, d_r / 2, rng)?;
        let up1 = Block::init(store, norms, "ram.up1", BlockKind::Up, d_r / 2, rng)?;
        let up2 = Block::init(store, norms, "ram.up2", BlockKind::Up, d_r, rng)?;
        Ok(Ram {
            down1,
            down2,
            lateral,
            up1,
            up2,
            dropout,
        })
    }

    /// H: batch×n×2d_r → O of the same shape. Dropout is active only in
    /// the training phase.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, h: Var) -> Result<RamTrace> {
        let c = ctx.g.shape(h).last().copied().unwrap_or(0);
        if c != self.down1.c_in {
            return Err(MarnError::Dimension {
                kernel: "ram",
                lhs: ctx.g.shape(h).to_vec(),
                rhs: vec![self.down1.c_in],
            });
        }
        let d1 = self.down1.forward(ctx, h)?;
        let d2 = self.down2.forward(ctx, d1)?;
        let l1 = self.lateral.forward(ctx, d2)?;
        let up = self.up1.forward(ctx, l1)?;
        let u1 = ctx.g.add(up, d1)?;
        let up = self.up2.forward(ctx, u1)?;
        let gated = ctx.g.mul(up, h)?;
        let act = ctx.g.tanh(gated)?;
        let o = ctx.g.dropout(act, self.dropout, ctx.phase == Phase::Train)?;
        Ok(RamTrace { d1, d2, l1, u1, o })
    }
}

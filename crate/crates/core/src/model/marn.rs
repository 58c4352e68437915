use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{AttentionHead, HeadOutput};
use super::encoder::Encoder;
use super::params::ParamStore;
use super::ram::{Ctx, NormState, NormTrace, Phase, Ram, RamTrace, NORM_MOMENTUM};
use crate::autodiff::{Graph, Var};
use crate::error::{MarnError, Result};
use crate::tensor::{Real, Tensor};
use crate::trainer::Batch;

/// Architecture sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_e: usize,
    pub d_r: usize,
    pub n_icd: usize,
    pub n_ccs: usize,
    pub dropout: f64,
}

/// Which parts of the network a forward pass runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub phase: Phase,
    /// Off: O := H.
    pub use_ram: bool,
    /// Off: the CCS head is skipped.
    pub use_ccs: bool,
}

impl ForwardOptions {
    pub fn eval(use_ram: bool) -> Self {
        ForwardOptions {
            phase: Phase::Eval,
            use_ram,
            use_ccs: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub h: Var,
    pub ram: Option<RamTrace>,
    pub o: Var,
    pub icd: HeadOutput,
    pub ccs: Option<HeadOutput>,
    pub norms: NormTrace,
}

/// Per-document code probabilities for both branches, row-major batch×d_m.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub icd: Vec<f64>,
    pub ccs: Vec<f64>,
    pub n_docs: usize,
}

/// Which label branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Icd,
    Ccs,
}

/// The full network: encoder, RAM, one attention head per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Marn<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub norms: Vec<NormState<T>>,
    pub encoder: Encoder,
    pub ram: Ram,
    pub icd_head: AttentionHead,
    pub ccs_head: AttentionHead,
}

impl<T: Real> Marn<T> {
    pub fn new(config: &ModelConfig, embeddings: Option<&Tensor<f64>>, seed: u64) -> Result<Self> {
        if config.n_icd == 0 || config.n_ccs == 0 {
            return Err(MarnError::Config("both label branches need at least one code".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut norms = Vec::new();
        let encoder = Encoder::init(&mut params, config.vocab_size, config.d_e, config.d_r, embeddings, &mut rng)?;
        let ram = Ram::init(&mut params, &mut norms, config.d_r, config.dropout, &mut rng)?;
        let hidden = 2 * config.d_r;
        let icd_head = AttentionHead::init(&mut params, "head.icd", hidden, config.n_icd, &mut rng)?;
        let ccs_head = AttentionHead::init(&mut params, "head.ccs", hidden, config.n_ccs, &mut rng)?;
        Ok(Marn {
            config: config.clone(),
            params,
            norms,
            encoder,
            ram,
            icd_head,
            ccs_head,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.bind(g)
    }

    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], batch: &Batch, opts: ForwardOptions) -> Result<ModelOutput> {
        let x = self.encoder.embed(g, vars, &batch.tokens, batch.size)?;
        let h = self.encoder.forward(g, vars, x, &batch.mask)?;
        let mut trace = Vec::new();
        let (ram, o) = if opts.use_ram {
            let mut ctx = Ctx {
                g: &mut *g,
                vars,
                norms: &self.norms,
                mask: &batch.mask,
                phase: opts.phase,
                trace: &mut trace,
            };
            let t = self.ram.forward(&mut ctx, h)?;
            (Some(t), t.o)
        } else {
            (None, h)
        };
        let icd = self.icd_head.forward(g, vars, o, &batch.mask)?;
        let ccs = if opts.use_ccs {
            Some(self.ccs_head.forward(g, vars, o, &batch.mask)?)
        } else {
            None
        };
        Ok(ModelOutput {
            h,
            ram,
            o,
            icd,
            ccs,
            norms: trace,
        })
    }

    /// Folds the batch statistics of a training-phase forward pass into the
    /// running statistics.
    pub fn update_norms(&mut self, g: &Graph<T>, trace: &NormTrace) {
        for &(idx, v) in trace {
            if let Some(stats) = g.batch_stats(v) {
                self.norms[idx].update(&stats.mean, &stats.var, stats.count, NORM_MOMENTUM);
            }
        }
    }

    /// Eval-phase probabilities for every document in the batch.
    pub fn predict(&self, batch: &Batch, use_ram: bool) -> Result<Predictions> {
        let mut g = Graph::new(0);
        let vars = self.bind(&mut g);
        let out = self.forward(&mut g, &vars, batch, ForwardOptions::eval(use_ram))?;
        let ccs = out.ccs.expect("eval pass runs both heads");
        Ok(Predictions {
            icd: g.value(out.icd.probs).to_f64_vec(),
            ccs: g.value(ccs.probs).to_f64_vec(),
            n_docs: batch.size,
        })
    }

    pub fn head(&self, branch: Branch) -> &AttentionHead {
        match branch {
            Branch::Icd => &self.icd_head,
            Branch::Ccs => &self.ccs_head,
        }
    }

    /// Per-code vectors of one branch: the code's query column, followed by
    /// its classifier row when `with_classifier` is set.
    pub fn code_embeddings(&self, branch: Branch, with_classifier: bool) -> Vec<Vec<f64>> {
        let head = self.head(branch);
        let q = self.params.get(head.q);
        let w = self.params.get(head.w);
        (0..head.d_m)
            .map(|m| {
                let mut v: Vec<f64> = (0..head.hidden).map(|j| q.at2(j, m).as_f64()).collect();
                if with_classifier {
                    v.extend(w.row(m).iter().map(|x| x.as_f64()));
                }
                v
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Marn<U> {
        Marn {
            config: self.config.clone(),
            params: self.params.cast(),
            norms: self.norms.iter().map(NormState::cast).collect(),
            encoder: self.encoder,
            ram: self.ram,
            icd_head: self.icd_head,
            ccs_head: self.ccs_head,
        }
    }
}

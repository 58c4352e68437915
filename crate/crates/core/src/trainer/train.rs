use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::batch::{pad_and_batch, Batch};
use crate::autodiff::Graph;
use crate::error::{MarnError, Result};
use crate::metrics;
use crate::model::{ForwardOptions, Marn, Phase, Predictions};
use crate::objectives::{branch_loss, joint_loss_node, LossConfig};
use crate::tensor::{Real, Tensor};
use crate::text::Document;

/// Component switches for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_mtl: bool,
    pub use_ram: bool,
    pub use_focal: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_mtl: true,
            use_ram: true,
            use_focal: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub monitor_k: usize,
    pub loss: LossConfig,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 16,
            patience: 10,
            max_epochs: 100,
            seed: 0,
            monitor_k: 5,
            loss: LossConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.batch_size == 0 || self.monitor_k == 0 {
            return Err(MarnError::Config("patience, batch_size and monitor_k must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MarnError::Config(format!("learning rate {} is not positive", self.learning_rate)));
        }
        self.loss.validate()
    }

    /// Loss weights with the CCS term removed when multitask training is off.
    pub fn effective_loss(&self) -> LossConfig {
        let mut l = self.loss;
        if !self.ablation.use_mtl {
            l.lambda_s = 0.0;
        }
        l
    }
}

/// Patience counter over a monitored value where larger is better.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records one evaluation; true when it strictly beats the best so far.
    pub fn observe(&mut self, value: f64) -> bool {
        match self.best {
            Some(b) if value <= b => {
                self.since_best += 1;
                false
            }
            _ => {
                self.best = Some(value);
                self.since_best = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_p_at_k: f64,
    pub val_micro_f1: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the restored parameters.
    pub best_epoch: usize,
    pub best_monitor: f64,
    pub stopped_early: bool,
}

/// Validation measurements of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub monitor: f64,
    pub p_at_k: f64,
    pub micro_f1: f64,
}

/// Model plus optimizer state under one configuration.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Marn<T>,
    pub adam: AdamState<T>,
    pub config: TrainConfig,
    pub steps: u64,
    pub epoch: usize,
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step)
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Marn<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&model.params);
        Ok(Trainer {
            model,
            adam,
            config,
            steps: 0,
            epoch: 0,
        })
    }

    /// Builds the training-phase graph for one batch and returns it with the
    /// bound parameters and the joint loss node.
    pub fn loss_graph(&self, batch: &Batch, seed: u64) -> Result<(Graph<T>, Vec<crate::autodiff::Var>, crate::autodiff::Var, crate::model::ModelOutput)> {
        let ab = self.config.ablation;
        let loss_cfg = self.config.effective_loss();
        let mut g = Graph::new(seed);
        let vars = self.model.bind(&mut g);
        let opts = ForwardOptions {
            phase: Phase::Train,
            use_ram: ab.use_ram,
            use_ccs: ab.use_mtl,
        };
        let out = self.model.forward(&mut g, &vars, batch, opts)?;
        let l_icd = branch_loss(&mut g, out.icd.probs, &batch.icd_targets, &loss_cfg, ab.use_focal)?;
        let l_ccs = match out.ccs {
            Some(h) => Some(branch_loss(&mut g, h.probs, &batch.ccs_targets, &loss_cfg, ab.use_focal)?),
            None => None,
        };
        let loss = joint_loss_node(&mut g, l_icd, l_ccs, &loss_cfg)?;
        Ok((g, vars, loss, out))
    }

    /// Graph seed (dropout masks) of the next training step.
    pub fn next_step_seed(&self) -> u64 {
        step_seed(self.config.seed, self.steps)
    }

    /// Forward, backward and one Adam update; returns the joint loss.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        let (mut g, vars, loss, out) = self.loss_graph(batch, self.next_step_seed())?;
        let value = g.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(MarnError::Numeric(format!("loss is {value} at step {}", self.steps)));
        }
        g.backward(loss)?;
        let grads: Vec<Tensor<T>> = vars.iter().map(|&v| g.grad(v)).collect();
        adam_step(&mut self.model.params, &grads, &mut self.adam, self.config.learning_rate)?;
        self.model.update_norms(&g, &out.norms);
        self.steps += 1;
        Ok(value)
    }

    /// One pass over `train` in a seeded order; returns the mean batch loss.
    pub fn train_epoch(&mut self, train: &[Document]) -> Result<f64> {
        if train.is_empty() {
            return Err(MarnError::Input("empty training set".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(self.config.seed ^ 0x5EED, self.epoch as u64));
        order.shuffle(&mut rng);
        let shuffled: Vec<Document> = order.iter().map(|&i| train[i].clone()).collect();
        let (n_icd, n_ccs) = (self.model.config.n_icd, self.model.config.n_ccs);
        let batches = pad_and_batch(&shuffled, self.config.batch_size, n_icd, n_ccs)?;
        let mut total = 0.0;
        for b in &batches {
            total += self.train_step(b)?;
        }
        self.epoch += 1;
        Ok(total / batches.len() as f64)
    }

    pub fn predict(&self, docs: &[Document]) -> Result<Predictions> {
        predict_documents(&self.model, docs, self.config.batch_size, self.config.ablation.use_ram)
    }

    /// Validation P@monitor_k (capped at the code count) and micro-F1 on the ICD branch.
    pub fn validate(&self, val: &[Document]) -> Result<Validation> {
        let pred = self.predict(val)?;
        let n_icd = self.model.config.n_icd;
        let truth = truth_matrix(val, n_icd, |d| &d.icd_labels);
        let k = self.config.monitor_k.min(n_icd);
        let p_at_k = metrics::precision_at_k(&pred.icd, &truth, n_icd, k)?;
        let (_, micro_f1) = metrics::f1_scores(&pred.icd, &truth, n_icd, metrics::F1_THRESHOLD)?;
        Ok(Validation {
            monitor: p_at_k,
            p_at_k,
            micro_f1,
        })
    }

    /// Trains with early stopping on validation P@k and restores the
    /// parameters of the best epoch.
    pub fn fit(&mut self, train: &[Document], val: &[Document]) -> Result<FitOutcome> {
        self.fit_with_monitor(train, val, |t, val| t.validate(val))
    }

    /// As [`Trainer::fit`], with the validation measurement supplied by `monitor`.
    pub fn fit_with_monitor<F>(&mut self, train: &[Document], val: &[Document], mut monitor: F) -> Result<FitOutcome>
    where
        F: FnMut(&Trainer<T>, &[Document]) -> Result<Validation>,
    {
        if val.is_empty() {
            return Err(MarnError::Input("empty validation set".into()));
        }
        let mut stopper = EarlyStopping::new(self.config.patience);
        let mut history = Vec::new();
        let mut best: Option<(Marn<T>, AdamState<T>, u64, usize)> = None;
        let mut stopped_early = false;
        for _ in 0..self.config.max_epochs {
            let epoch = self.epoch + 1;
            let train_loss = self.train_epoch(train).map_err(|e| at_epoch(e, epoch))?;
            let v = monitor(self, val).map_err(|e| at_epoch(e, epoch))?;
            if stopper.observe(v.monitor) {
                best = Some((self.model.clone(), self.adam.clone(), self.steps, self.epoch));
            }
            let stop = stopper.should_stop();
            history.push(EpochRecord {
                epoch,
                train_loss,
                val_p_at_k: v.p_at_k,
                val_micro_f1: v.micro_f1,
                stopped_early: stop,
            });
            log::info!(
                "epoch {epoch}: loss {train_loss:.5}, val P@k {:.4}, micro-F1 {:.4}",
                v.p_at_k,
                v.micro_f1
            );
            if stop {
                stopped_early = true;
                break;
            }
        }
        let best_monitor = stopper.best.unwrap_or(f64::NAN);
        let best_epoch = match best {
            Some((model, adam, steps, epoch)) => {
                self.model = model;
                self.adam = adam;
                self.steps = steps;
                self.epoch = epoch;
                epoch
            }
            None => self.epoch,
        };
        Ok(FitOutcome {
            history,
            best_epoch,
            best_monitor,
            stopped_early,
        })
    }
}

fn at_epoch(e: MarnError, epoch: usize) -> MarnError {
    match e {
        MarnError::Numeric(m) => MarnError::Numeric(format!("epoch {epoch}: {m}")),
        other => other,
    }
}

/// Eval-phase probabilities for every document, in input order.
pub fn predict_documents<T: Real>(model: &Marn<T>, docs: &[Document], batch_size: usize, use_ram: bool) -> Result<Predictions> {
    let batches = pad_and_batch(docs, batch_size, model.config.n_icd, model.config.n_ccs)?;
    let mut out = Predictions {
        icd: Vec::with_capacity(docs.len() * model.config.n_icd),
        ccs: Vec::with_capacity(docs.len() * model.config.n_ccs),
        n_docs: 0,
    };
    for b in &batches {
        let p = model.predict(b, use_ram)?;
        out.icd.extend(p.icd);
        out.ccs.extend(p.ccs);
        out.n_docs += p.n_docs;
    }
    Ok(out)
}

/// Row-major docs×n_codes membership matrix.
pub fn truth_matrix(docs: &[Document], n_codes: usize, labels: impl Fn(&Document) -> &std::collections::BTreeSet<usize>) -> Vec<bool> {
    let mut t = vec![false; docs.len() * n_codes];
    for (i, d) in docs.iter().enumerate() {
        for &c in labels(d) {
            t[i * n_codes + c] = true;
        }
    }
    t
}

//! Binary checkpoint format:
//!
//! ```text
//! "MARNCKPT" | u16 version | u32 n | n bytes of JSON metadata
//! u32 count | count × (u16 name length, name, u8 rank, rank × u32 dims, f32 data)
//! ```
//!
//! All integers and reals are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::train::{TrainConfig, Trainer};
use crate::error::{MarnError, Result};
use crate::model::{Marn, ModelConfig, ParamId};
use crate::tensor::{Real, Tensor};
use crate::text::LabelSpace;

pub const MAGIC: &[u8; 8] = b"MARNCKPT";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    best_monitor: Option<f64>,
    adam_step: u64,
    vocab: Option<Vec<String>>,
    labels: Option<LabelSpace>,
}

/// Everything needed to resume training or to predict.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Marn<f32>,
    pub adam: AdamState<f32>,
    pub train: TrainConfig,
    pub epoch: usize,
    pub best_monitor: Option<f64>,
    /// Vocabulary tokens in id order, so raw text can be encoded again.
    pub vocab: Option<Vec<String>>,
    pub labels: Option<LabelSpace>,
}

impl Checkpoint {
    pub fn from_trainer<T: Real>(t: &Trainer<T>, best_monitor: Option<f64>) -> Self {
        Checkpoint {
            model: t.model.cast(),
            adam: t.adam.cast(),
            train: t.config.clone(),
            epoch: t.epoch,
            best_monitor,
            vocab: None,
            labels: None,
        }
    }

    pub fn with_text(mut self, vocab: Vec<String>, labels: LabelSpace) -> Self {
        self.vocab = Some(vocab);
        self.labels = Some(labels);
        self
    }

    pub fn into_trainer(self) -> Result<Trainer<f32>> {
        let mut t = Trainer::new(self.model, self.train)?;
        t.steps = self.adam.step;
        t.adam = self.adam;
        t.epoch = self.epoch;
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            model: self.model.config.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            best_monitor: self.best_monitor,
            adam_step: self.adam.step,
            vocab: self.vocab.clone(),
            labels: self.labels.clone(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| MarnError::checkpoint("config", e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let records = self.records();
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    fn records(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (_, name, t) in self.model.params.iter() {
            out.push((name.to_string(), t.clone()));
        }
        for n in &self.model.norms {
            let c = n.channels();
            out.push((format!("norm:{}:mean", n.name), Tensor::from_parts(vec![c], n.running_mean.clone())));
            out.push((format!("norm:{}:var", n.name), Tensor::from_parts(vec![c], n.running_var.clone())));
        }
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            let name = self.model.params.name(ParamId(i));
            out.push((format!("adam.m:{name}"), m.clone()));
            out.push((format!("adam.v:{name}"), v.clone()));
        }
        out
    }

    /// Parses a checkpoint, building the model from its stored configuration.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::parse(bytes, None)
    }

    /// Parses a checkpoint into a model of the `expected` configuration;
    /// any tensor whose stored shape differs is reported by name.
    pub fn from_bytes_expecting(bytes: &[u8], expected: &ModelConfig) -> Result<Self> {
        Self::parse(bytes, Some(expected))
    }

    fn parse(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(MarnError::checkpoint("magic", "not a checkpoint file"));
        }
        let version = r.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(MarnError::checkpoint(
                "version",
                format!("format version {version}, expected {FORMAT_VERSION}"),
            ));
        }
        let len = r.u32("config length")? as usize;
        let meta: Meta = serde_json::from_slice(r.take(len, "config")?)
            .map_err(|e| MarnError::checkpoint("config", e.to_string()))?;
        let config = expected.unwrap_or(&meta.model);
        let mut model = Marn::<f32>::new(config, None, 0).map_err(|e| MarnError::checkpoint("config", e.to_string()))?;
        let mut adam = AdamState::new(&model.params);
        adam.step = meta.adam_step;

        let count = r.u32("tensor count")? as usize;
        let mut seen = std::collections::HashSet::new();
        for i in 0..count {
            let field = format!("tensor {i}");
            let name_len = r.u16(&field)? as usize;
            let name = std::str::from_utf8(r.take(name_len, &field)?)
                .map_err(|_| MarnError::checkpoint(&field, "name is not UTF-8"))?
                .to_string();
            let rank = r.take(1, &name)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&name)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, &name)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let mut slot = locate(&mut model, &mut adam, &name)?;
            if slot.shape() != shape.as_slice() {
                return Err(MarnError::checkpoint(
                    &name,
                    format!("shape mismatch: stored {shape:?}, model expects {:?}", slot.shape()),
                ));
            }
            slot.data_mut().copy_from_slice(&data);
            seen.insert(name);
        }
        if r.pos != bytes.len() {
            return Err(MarnError::checkpoint("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        for (_, name, _) in model.params.iter() {
            if !seen.contains(name) {
                return Err(MarnError::checkpoint(name, "missing from checkpoint"));
            }
        }
        for n in &model.norms {
            for suffix in ["mean", "var"] {
                let key = format!("norm:{}:{suffix}", n.name);
                if !seen.contains(&key) {
                    return Err(MarnError::checkpoint(&key, "missing from checkpoint"));
                }
            }
        }
        let mut labels = meta.labels;
        if let Some(l) = labels.as_mut() {
            l.rebuild_index();
        }
        Ok(Checkpoint {
            model,
            adam,
            train: meta.train,
            epoch: meta.epoch,
            best_monitor: meta.best_monitor,
            vocab: meta.vocab,
            labels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| MarnError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| MarnError::io(path, e))?)
    }

    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes_expecting(&std::fs::read(path).map_err(|e| MarnError::io(path, e))?, expected)
    }
}

/// Mutable view of the storage a record name refers to.
enum Slot<'a> {
    Tensor(&'a mut Tensor<f32>),
    Vec(&'a mut Vec<f32>),
}

impl Slot<'_> {
    fn shape(&self) -> Vec<usize> {
        match self {
            Slot::Tensor(t) => t.shape().to_vec(),
            Slot::Vec(v) => vec![v.len()],
        }
    }

    fn data_mut(&mut self) -> &mut [f32] {
        match self {
            Slot::Tensor(t) => t.data_mut(),
            Slot::Vec(v) => v,
        }
    }
}

fn locate<'a>(model: &'a mut Marn<f32>, adam: &'a mut AdamState<f32>, name: &str) -> Result<Slot<'a>> {
    let unknown = || MarnError::checkpoint(name, "unknown tensor for this model");
    if let Some(rest) = name.strip_prefix("norm:") {
        let (layer, which) = rest.rsplit_once(':').ok_or_else(unknown)?;
        let n = model.norms.iter_mut().find(|n| n.name == layer).ok_or_else(unknown)?;
        return match which {
            "mean" => Ok(Slot::Vec(&mut n.running_mean)),
            "var" => Ok(Slot::Vec(&mut n.running_var)),
            _ => Err(unknown()),
        };
    }
    for (prefix, moments) in [("adam.m:", &mut adam.m), ("adam.v:", &mut adam.v)] {
        if let Some(p) = name.strip_prefix(prefix) {
            let id = model.params.find(p).ok_or_else(unknown)?;
            return Ok(Slot::Tensor(&mut moments[id.0]));
        }
    }
    let id = model.params.find(name).ok_or_else(unknown)?;
    Ok(Slot::Tensor(model.params.get_mut(id)))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(MarnError::checkpoint(field, "file is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        let b = self.take(2, field)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Batch;
    use crate::text::Document;

    fn config(d_r: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_e: 4,
            d_r,
            n_icd: 3,
            n_ccs: 2,
            dropout: 0.2,
        }
    }

    fn trained() -> Trainer<f32> {
        let docs: Vec<Document> = (0..4)
            .map(|i| Document {
                id: i.to_string(),
                tokens: vec![2 + i, 3, 4 + i % 2],
                icd_labels: [i % 3].into(),
                ccs_labels: [i % 2].into(),
            })
            .collect();
        let mut t = Trainer::new(Marn::new(&config(4), None, 1).unwrap(), TrainConfig::default()).unwrap();
        let b = Batch::from_docs(&docs.iter().collect::<Vec<_>>(), 3, 2).unwrap();
        for _ in 0..3 {
            t.train_step(&b).unwrap();
        }
        t
    }

    #[test]
    fn round_trip_restores_everything() {
        let t = trained();
        let ck = Checkpoint::from_trainer(&t, Some(0.5));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.adam.step, 3);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = Checkpoint::from_trainer(&trained(), None).to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(MarnError::Checkpoint { field, .. }) if field == "magic"
        ));
    }

    #[test]
    fn version_mismatch_names_the_field() {
        let mut bytes = Checkpoint::from_trainer(&trained(), None).to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(MarnError::Checkpoint { field, .. }) if field == "version"
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = Checkpoint::from_trainer(&trained(), None).to_bytes().unwrap();
        for cut in [4, 11, 40, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(MarnError::Checkpoint { .. })
            ));
        }
    }

    #[test]
    fn loading_into_a_wider_model_is_a_shape_error() {
        let bytes = Checkpoint::from_trainer(&trained(), None).to_bytes().unwrap();
        match Checkpoint::from_bytes_expecting(&bytes, &config(8)) {
            Err(MarnError::Checkpoint { field, message }) => {
                assert!(message.contains("shape"), "{message}");
                assert!(!field.is_empty());
            }
            other => panic!("expected a shape error, got {other:?}"),
        }
    }
}

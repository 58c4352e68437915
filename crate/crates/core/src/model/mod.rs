//! BiGRU encoder, recalibrated aggregation module, and label attention heads.
//!
//! Components register their trainable arrays in a shared [`ParamStore`] and
//! address them through [`ParamId`]s; a forward pass receives the graph
//! leaves bound from that store, in store order.

pub mod attention;
pub mod encoder;
pub mod marn;
pub mod params;
pub mod ram;

pub use attention::{AttentionHead, HeadOutput};
pub use encoder::{Encoder, GruWeights};
pub use marn::{Branch, ForwardOptions, Marn, ModelConfig, ModelOutput, Predictions};
pub use params::{ParamId, ParamStore};
pub use ram::{Block, BlockKind, NormState, Phase, Ram, RamTrace, NORM_EPS, NORM_MOMENTUM};

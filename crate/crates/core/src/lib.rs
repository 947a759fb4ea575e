//! Sparse prefill and progressive KV compression on a toy transformer.

pub mod bench;
pub mod compress;
pub mod metrics;
pub mod model;
pub mod session;
pub mod sparsify;
pub mod synth;
pub mod tensor;

pub use bench::{DialogueInstance, Vocab};
pub use compress::{CompressionConfig, DecodePolicy, KVCacheHead};
pub use metrics::MetricsRecord;
pub use model::{KvCache, ModelConfig, ModelWeights, TokenId};
pub use session::{Mode, SessionParams, SessionState};
pub use sparsify::{HeadPlan, LineKind};
pub use tensor::{AttentionBlock, Matrix};

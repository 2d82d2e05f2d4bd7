//! The toy decoder-only transformer that stands in for the frozen
//! pretrained language model.

mod backward;
mod checkpoint;
mod config;
mod layout;
mod model;
mod pretrain;
mod scalar;

pub use backward::log_softmax_at;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub(crate) use checkpoint::write_atomic;
pub use config::ModelConfig;
pub use layout::{Param, ParamLayout};
pub use model::{init_model, ActivationTrace, InjectionSite, Logits, ToyTransformer, Transformer};
pub use pretrain::{pretrain, PretrainReport, PretrainSchedule};
pub use scalar::Scalar;

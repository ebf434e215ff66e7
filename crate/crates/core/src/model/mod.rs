//! Transformer backbone with per-axis decoding heads.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use config::{Mode, ModelConfig};
pub use forward::{
    build_loss, build_loss_on, entry_log_probs, forward_incremental, forward_logits, forward_train,
    log_softmax, loss_and_grads, raster_forward_train, Example, KvCache, LossGraph, SequencePlan,
    SlotInput, TrainOutput,
};
pub use params::{BlockLayout, HeadLayout, ModelParams, ParamLayout};

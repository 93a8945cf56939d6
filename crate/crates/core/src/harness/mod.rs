//! Training loop, evaluation protocols, channel-token fine-tuning,
//! checkpointing and mask-statistics export.

mod checkpoint;
mod eval;
mod finetune;
mod maskstats;
mod train;

pub use checkpoint::{
    checkpoint_to_bytes, config_hash, load_checkpoint, save_checkpoint, Checkpoint,
};
pub use eval::{evaluate, leave_k_out_sweep, recon_loss_on, EvalReport, SweepReport, SweepRow};
pub use finetune::{finetune_channel_tokens, novel_patch_plan, FinetuneOutcome, PlanFn};
pub use maskstats::{collect_mask_stats, MaskStats};
pub use train::{lr_at, train, AdamW, ChannelStats, TrainConfig, TrainLogRecord, TrainOutcome};

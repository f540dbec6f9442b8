//! The schedule-compiled transformer: text-only layers, cross-attention
//! layers that read frozen-or-refined visual tokens, and selective
//! self-attention layers that update them.

mod checkpoint;
mod forward;
mod params;
mod schedule;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use forward::{
    argmax_token, conditional_pos_embed, cross_attention_block, dense_forward, forward,
    forward_sample, forward_sample_dropped, greedy_decode, taped_sample_loss, CrossProjections,
    ForwardTrace, LayerTraceRecord, Sample, VisualInput,
};
pub(crate) use forward::{execution_plan, Engine};
pub use params::{
    CrossSlots, LayerSlots, ModelDims, ModelParams, RouterHead, POS_CONV_KERNEL, POS_CONV_PADDING,
};
pub use schedule::{build_schedule, Configuration, LayerKind, LayerSchedule};
pub use train::{
    evaluate_config, mean_answer_loss, sample_score, train_step, train_universal, AdamState,
    EvalStats, SampleScore, UniformConfigSampler,
};

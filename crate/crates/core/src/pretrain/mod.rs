//! Masked latent regression against an EMA teacher: masking, target
//! construction, decoders, the two-term loss, the training step and collapse
//! diagnostics.

mod collapse;
mod decoder;
mod loss;
mod mask;
mod targets;
mod teacher;
mod trainer;

pub use collapse::{collapse_diagnostics, effective_rank, embedding_stats, CollapseReport, EmbeddingStats};
pub use decoder::{Decoder, DecoderConfig, DecoderKind};
pub use loss::{mlr_loss, mlr_loss_tape, LocalNorm, LossReport, ViewLoss};
pub use mask::{inverse_block_mask, random_mask, MaskPlan};
pub use targets::{make_targets, Targets, TARGET_EPS};
pub use teacher::{ema_update, EmaSchedule, TeacherState};
pub use trainer::{MaskConfig, PretrainConfig, Sample, StepReport, Trainer, ViewVars};

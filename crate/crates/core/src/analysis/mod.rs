//! Attention loss, the ALr gap between key-norm and attention-optimal
//! eviction, per-head heatmaps, raw dumps and the key-dimension probe.

mod audit;
mod heatmap;
mod loss;
mod probe;

pub use audit::{policy_loss_audit, AuditRow, LossAudit};
pub use heatmap::{alr_heatmap, norm_attention_dump, AlrCell, AlrOptions, AlrReport, DumpRow};
pub use loss::{alr, alr_curve, attention_loss, norm_drop_order, score_drop_order};
pub use probe::{dim_zero_probe, peak_dims, random_dims, ProbeMode, ProbeOptions, ProbeResult};

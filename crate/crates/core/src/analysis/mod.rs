//! Measurement apparatus: representation similarity, attention-share
//! decomposition, vision-drop sensitivity, per-sample oracle selection, and
//! the FLOPs cost model.

mod cka;
mod drop;
mod flops;
mod oracle;
mod shares;

pub use cka::{cka, cka_csv, cka_matrix, cka_matrix_mean, CkaMatrix};
pub use drop::{drop_csv, layer_drop_sensitivity, DropSensitivityRecord};
pub use flops::{cost_csv, flops_report, CostReport};
pub use oracle::{oracle_evaluate, oracle_pick, oracle_select, prefix_match_score};
pub use shares::{attention_shares, shares_csv, AttentionShareRecord, Segments};

//! Closed-form FLOPs cost model for scheduled forward passes.
//!
//! Costing convention (shared with the forward engine's
//! multiply-accumulate meter): one multiply-accumulate is two FLOPs; the
//! QKV and output projections, attention score and value matmuls,
//! feed-forward matmuls, and the one-time positional convolution count;
//! softmax, normalization, activations, embedding lookups, and the output
//! head do not.
//!
//! Per-layer costs with `N = N_t + N_v`:
//!
//! - dense / active self-attention layer: `C(N) = 8Nd² + 4N²d + 4N·d·d_ff`
//! - text-only layer (including deactivated self-attention): `C(N_t)`
//! - cross-attention layer: `C(N_t) + 4N_t·d² + 4N_v·d² + 4·N_t·N_v·d`
//!   (the overhead vanishes at `N_v = 0`, where the sub-block is skipped)
//! - one-time positional convolution: `2·N_v·d·7`
//!
//! The dense baseline runs every layer at `C(N)` plus the same convolution,
//! so an all-self-attention configuration has savings exactly 1.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{Configuration, LayerKind, LayerSchedule, POS_CONV_KERNEL};

/// Per-layer and total FLOPs for one (schedule, configuration, shape).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub n_t: usize,
    pub n_v: usize,
    pub d: usize,
    pub d_ff: usize,
    /// FLOPs per layer, in layer order.
    pub per_layer: Vec<u128>,
    /// One-time positional convolution FLOPs.
    pub conv_flops: u128,
    /// Scheduled total (layers + convolution).
    pub total: u128,
    /// Dense baseline total (every layer over `[V; T]`, same convolution).
    pub dense_total: u128,
    /// `dense_total / total`.
    pub savings: f64,
}

/// Cost of one dense transformer layer over a sequence of length `n`.
fn dense_layer_flops(n: usize, d: usize, d_ff: usize) -> u128 {
    let (n, d, d_ff) = (n as u128, d as u128, d_ff as u128);
    8 * n * d * d + 4 * n * n * d + 4 * n * d * d_ff
}

fn cross_overhead_flops(n_t: usize, n_v: usize, d: usize) -> u128 {
    if n_v == 0 {
        return 0;
    }
    let (n_t, n_v, d) = (n_t as u128, n_v as u128, d as u128);
    4 * n_t * d * d + 4 * n_v * d * d + 4 * n_t * n_v * d
}

pub fn flops_report(
    schedule: &LayerSchedule,
    config: &Configuration,
    n_t: usize,
    n_v: usize,
    d: usize,
    d_ff: usize,
) -> Result<CostReport> {
    if n_t == 0 || d == 0 || d_ff == 0 {
        return Err(CoreError::InvalidArgument(
            "text length and model widths must be positive".into(),
        ));
    }
    if !config.is_subset_of_schedule(schedule) {
        return Err(CoreError::ConfigMismatch { config: config.active_sa().to_vec() });
    }
    let per_layer: Vec<u128> = (0..schedule.total_layers())
        .map(|l| match schedule.kind(l) {
            LayerKind::SelfAttn if config.is_active(l) => dense_layer_flops(n_t + n_v, d, d_ff),
            LayerKind::SelfAttn | LayerKind::TextOnly => dense_layer_flops(n_t, d, d_ff),
            LayerKind::CrossAttn => {
                dense_layer_flops(n_t, d, d_ff) + cross_overhead_flops(n_t, n_v, d)
            }
        })
        .collect();
    let conv_flops = 2 * (n_v * d * POS_CONV_KERNEL) as u128;
    let total = conv_flops + per_layer.iter().sum::<u128>();
    let dense_total = conv_flops
        + schedule.total_layers() as u128 * dense_layer_flops(n_t + n_v, d, d_ff);
    Ok(CostReport {
        n_t,
        n_v,
        d,
        d_ff,
        per_layer,
        conv_flops,
        total,
        dense_total,
        savings: dense_total as f64 / total as f64,
    })
}

/// Long-format CSV: `layer,kind,active,flops` rows plus a trailing summary.
pub fn cost_csv(schedule: &LayerSchedule, config: &Configuration, report: &CostReport) -> String {
    let mut out = String::from("layer,kind,active,flops\n");
    for (l, flops) in report.per_layer.iter().enumerate() {
        let kind = match schedule.kind(l) {
            LayerKind::TextOnly => "text",
            LayerKind::CrossAttn => "cross_attn",
            LayerKind::SelfAttn => "self_attn",
        };
        let active = schedule.kind(l) != LayerKind::SelfAttn || config.is_active(l);
        out.push_str(&format!("{l},{kind},{active},{flops}\n"));
    }
    out.push_str(&format!("conv,one_time,true,{}\n", report.conv_flops));
    out
}

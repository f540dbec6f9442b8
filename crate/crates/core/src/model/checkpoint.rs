//! Self-describing JSON checkpoint format.
//!
//! Layout (format version 1), stable across releases:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "seeds": [["init", 42], ["train", 7]],
//!   "schedule": { "total_layers": .., "kinds": [..], "ca_indices": [..], "sa_indices": [..] },
//!   "viable_configs": [{ "active_sa": [..], "id": 0 }, ..] | null,
//!   "params": {
//!     "dims": { "vocab": .., "d": .., "d_ff": .., "heads": .., "layers": .. },
//!     "names": ["embedding", "pos_conv_kernels", "layer0.norm1_gain", ..],
//!     "tensors": [{ "rows": .., "cols": .., "data": [..] }, ..],
//!     ... slot indices ...,
//!     "router_head": { "w1": .., "b1": .., "w2": .., "b2": .., "read_layer": .., "trained": .. } | null
//!   }
//! }
//! ```
//!
//! Tensors are flat row-major f64 arrays; `names` and slot indices make the
//! file self-describing. serde_json round-trips f64 exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

use super::params::ModelParams;
use super::schedule::{Configuration, LayerSchedule};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Named seeds that produced this model (init, training stages, ...).
    pub seeds: Vec<(String, u64)>,
    pub schedule: LayerSchedule,
    pub viable_configs: Option<Vec<Configuration>>,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(params: ModelParams, schedule: LayerSchedule) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            seeds: Vec::new(),
            schedule,
            viable_configs: None,
            params,
        }
    }

    pub fn with_seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.push((name.to_string(), seed));
        self
    }

    pub fn with_viable(mut self, viable: Vec<Configuration>) -> Self {
        self.viable_configs = Some(viable);
        self
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let json = serde_json::to_string(ckpt)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported checkpoint format version {} (expected {})",
            ckpt.format_version, CHECKPOINT_FORMAT_VERSION
        )));
    }
    ckpt.params.supports_schedule(&ckpt.schedule)?;
    Ok(ckpt)
}

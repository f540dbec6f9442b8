use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// What a layer does in a compiled schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Transformer layer over the text stream only.
    TextOnly,
    /// Cross-attention sub-block (text queries, visual keys/values) followed
    /// by the text transformer layer. Visual tokens are read, never written.
    CrossAttn,
    /// Full transformer layer over the concatenated `[V; T]` sequence; the
    /// only kind that updates the visual tokens.
    SelfAttn,
}

/// Per-layer kind assignment compiled from the total layer count and the
/// cross-attention / self-attention index sets.
///
/// The self-attention set wins on paper-order priority, but overlapping
/// assignments are rejected outright rather than silently resolved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSchedule {
    total_layers: usize,
    kinds: Vec<LayerKind>,
    ca_indices: Vec<usize>,
    sa_indices: Vec<usize>,
}

/// Compiles a schedule; indices out of `[0, total_layers)` or present in
/// both sets are rejected.
pub fn build_schedule(
    total_layers: usize,
    ca_indices: &[usize],
    sa_indices: &[usize],
) -> Result<LayerSchedule> {
    let mut ca: Vec<usize> = ca_indices.to_vec();
    let mut sa: Vec<usize> = sa_indices.to_vec();
    ca.sort_unstable();
    ca.dedup();
    sa.sort_unstable();
    sa.dedup();
    for &idx in ca.iter().chain(sa.iter()) {
        if idx >= total_layers {
            return Err(CoreError::InvalidSchedule(format!(
                "index {idx} out of range for {total_layers} layers"
            )));
        }
    }
    if let Some(&idx) = ca.iter().find(|i| sa.binary_search(i).is_ok()) {
        return Err(CoreError::InvalidSchedule(format!("index {idx} in both sets")));
    }
    let mut kinds = vec![LayerKind::TextOnly; total_layers];
    for &i in &ca {
        kinds[i] = LayerKind::CrossAttn;
    }
    for &i in &sa {
        kinds[i] = LayerKind::SelfAttn;
    }
    Ok(LayerSchedule { total_layers, kinds, ca_indices: ca, sa_indices: sa })
}

impl LayerSchedule {
    pub fn total_layers(&self) -> usize {
        self.total_layers
    }

    pub fn kind(&self, layer: usize) -> LayerKind {
        self.kinds[layer]
    }

    pub fn kinds(&self) -> &[LayerKind] {
        &self.kinds
    }

    pub fn ca_indices(&self) -> &[usize] {
        &self.ca_indices
    }

    pub fn sa_indices(&self) -> &[usize] {
        &self.sa_indices
    }

    /// The configuration that activates every self-attention layer.
    pub fn maximal_config(&self) -> Configuration {
        Configuration::new(self.sa_indices.clone(), 0)
    }
}

/// An active subset of a schedule's self-attention layers. Deactivated
/// layers run as text-only for that forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Configuration {
    active_sa: Vec<usize>,
    id: usize,
}

impl Configuration {
    pub fn new(mut active_sa: Vec<usize>, id: usize) -> Self {
        active_sa.sort_unstable();
        active_sa.dedup();
        Configuration { active_sa, id }
    }

    pub fn active_sa(&self) -> &[usize] {
        &self.active_sa
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn with_id(mut self, id: usize) -> Self {
        self.id = id;
        self
    }

    pub fn num_active(&self) -> usize {
        self.active_sa.len()
    }

    pub fn is_active(&self, layer: usize) -> bool {
        self.active_sa.binary_search(&layer).is_ok()
    }

    pub fn is_subset_of_schedule(&self, schedule: &LayerSchedule) -> bool {
        self.active_sa.iter().all(|i| schedule.sa_indices().binary_search(i).is_ok())
    }
}

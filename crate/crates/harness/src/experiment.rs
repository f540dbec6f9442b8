//! Experiment configuration: one JSON file fully determines a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use vlsched_core::model::{build_schedule, LayerSchedule, ModelDims};
use vlsched_core::{CoreError, Result};

use crate::synthetic::{TaskKind, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub ca: Vec<usize>,
    pub sa: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: TaskKind,
    pub grid_h: usize,
    pub grid_w: usize,
    pub keys: usize,
    pub classes: usize,
    pub majority_fraction: f64,
    pub n_train: usize,
    pub n_eval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    /// Maximal-configuration pretraining steps.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Universal fine-tuning steps (configuration re-drawn per step).
    pub universal_steps: usize,
    pub universal_lr: f64,
    pub router_steps: usize,
    pub router_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreeningSection {
    pub threshold: f64,
    /// Optional cap on enumerated configurations (size-stratified sample).
    pub max_configs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackingSection {
    pub reduction: f64,
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub data: DataSection,
    pub training: TrainingSection,
    pub screening: ScreeningSection,
    pub packing: PackingSection,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelSection { layers: 12, d: 64, d_ff: 256, heads: 4 },
            schedule: ScheduleSection { ca: vec![2, 5, 8, 11], sa: vec![1, 4, 7, 10] },
            data: DataSection {
                kind: TaskKind::Mixture,
                grid_h: 8,
                grid_w: 8,
                keys: 7,
                classes: 7,
                majority_fraction: 0.7,
                n_train: 256,
                n_eval: 96,
            },
            training: TrainingSection {
                steps: 400,
                batch_size: 8,
                lr: 3e-3,
                universal_steps: 200,
                universal_lr: 1e-3,
                router_steps: 150,
                router_lr: 3e-2,
            },
            screening: ScreeningSection { threshold: 0.97, max_configs: Some(16) },
            packing: PackingSection { reduction: 2.0, block: 2 },
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            grid_h: self.data.grid_h,
            grid_w: self.data.grid_w,
            keys: self.data.keys,
            classes: self.data.classes,
            majority_fraction: self.data.majority_fraction,
        }
    }

    pub fn model_dims(&self) -> Result<ModelDims> {
        let vocab = self.task_spec().vocab()?.size();
        let dims = ModelDims {
            vocab,
            d: self.model.d,
            d_ff: self.model.d_ff,
            heads: self.model.heads,
            layers: self.model.layers,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn build_schedule(&self) -> Result<LayerSchedule> {
        build_schedule(self.model.layers, &self.schedule.ca, &self.schedule.sa)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_dims()?;
        self.build_schedule()?;
        if self.training.batch_size == 0 {
            return Err(CoreError::InvalidArgument("batch_size must be positive".into()));
        }
        if self.data.n_train == 0 || self.data.n_eval == 0 {
            return Err(CoreError::InvalidArgument("dataset sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.screening.threshold) {
            return Err(CoreError::InvalidArgument(
                "screening threshold must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
            CoreError::InvalidArgument(format!(
                "invalid config {}: {e} (line {}, column {})",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_pretty_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    /// Derived seeds for the independent random streams of one run.
    pub fn seed_for(&self, stream: SeedStream) -> u64 {
        self.seed.wrapping_mul(1000).wrapping_add(stream as u64)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum SeedStream {
    TrainData = 1,
    EvalData = 2,
    ParamInit = 3,
    UniversalDraws = 4,
    RouterInit = 5,
    RouterTrain = 6,
    DropSubsets = 7,
    PackDemo = 8,
}

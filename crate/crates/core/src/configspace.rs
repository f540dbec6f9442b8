//! Enumeration, viability screening, and persistence of self-attention
//! configurations.
//!
//! Screening evaluates candidate configurations of an already-trained
//! maximal model on named evaluation subsets. A configuration is viable
//! when it holds at least `threshold` of the maximal configuration's
//! accuracy on at least one subset — cheap layers earn their keep wherever
//! they keep accuracy high, not necessarily everywhere. Cross-attention
//! layers are always active; only self-attention membership varies.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{
    evaluate_config, Configuration, EvalStats, LayerSchedule, ModelParams, Sample,
};

/// Default relative-accuracy threshold for viability screening. Exposed and
/// logged rather than baked in, since it is a judgment call.
pub const DEFAULT_VIABILITY_THRESHOLD: f64 = 0.97;

/// A named group of evaluation samples (screening and routing both reason
/// per subset).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSubset {
    pub name: String,
    pub samples: Vec<Sample>,
}

/// Enumerates subsets of `sa_indices` as configurations.
///
/// Without `max_count` every subset is produced (guarded at 20 indices) in
/// lexicographic order of the sorted index sequences, so the empty set
/// comes first. With `max_count`, a deterministic size-stratified sample is
/// produced instead: the empty and full subsets, then rounds over subset
/// sizes 1, 2, ... taking index-lexicographic combinations from each size
/// in turn. Ids are assigned by output position.
pub fn enumerate_configurations(
    sa_indices: &[usize],
    max_count: Option<usize>,
) -> Result<Vec<Configuration>> {
    let mut sa: Vec<usize> = sa_indices.to_vec();
    sa.sort_unstable();
    sa.dedup();
    let n = sa.len();

    let subsets: Vec<Vec<usize>> = match max_count {
        None => {
            if n > 20 {
                return Err(CoreError::InvalidArgument(format!(
                    "{n} self-attention layers give 2^{n} configurations; pass max_count to sample"
                )));
            }
            let mut all: Vec<Vec<usize>> = (0u64..(1u64 << n))
                .map(|mask| {
                    (0..n).filter(|i| mask & (1 << i) != 0).map(|i| sa[i]).collect::<Vec<_>>()
                })
                .collect();
            all.sort();
            all
        }
        Some(cap) => {
            if cap < 2 && n > 0 {
                return Err(CoreError::InvalidArgument(
                    "max_count must be at least 2 to include the empty and full subsets".into(),
                ));
            }
            let mut out: Vec<Vec<usize>> = vec![Vec::new()];
            if n > 0 {
                out.push(sa.clone());
            }
            // Round-robin across sizes 1..n, lexicographic combinations
            // within each size.
            let mut iters: Vec<Combinations> = (1..n).map(|k| Combinations::new(n, k)).collect();
            let mut exhausted = 0usize;
            while out.len() < cap && !iters.is_empty() && exhausted < iters.len() {
                exhausted = 0;
                for it in iters.iter_mut() {
                    if out.len() >= cap {
                        break;
                    }
                    match it.next() {
                        Some(combo) => {
                            out.push(combo.iter().map(|&i| sa[i]).collect());
                        }
                        None => exhausted += 1,
                    }
                }
            }
            out
        }
    };

    Ok(subsets
        .into_iter()
        .enumerate()
        .map(|(id, active)| Configuration::new(active, id))
        .collect())
}

/// Lexicographic k-combinations of 0..n.
struct Combinations {
    n: usize,
    state: Option<Vec<usize>>,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        let state = if k <= n { Some((0..k).collect()) } else { None };
        Combinations { n, state }
    }

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.state.clone()?;
        let mut next = current.clone();
        let k = next.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.state = None;
                break;
            }
            i -= 1;
            if next[i] < self.n - (k - i) {
                next[i] += 1;
                for j in i + 1..k {
                    next[j] = next[j - 1] + 1;
                }
                self.state = Some(next);
                break;
            }
        }
        Some(current)
    }
}

/// Anything that can score a configuration on a subset. The model-backed
/// implementation is [`ModelEvaluator`]; tests plug in synthetic tables.
pub trait ConfigEvaluator: Sync {
    fn evaluate(&self, config: &Configuration, subset: &EvalSubset) -> Result<EvalStats>;
}

pub struct ModelEvaluator<'a> {
    pub params: &'a ModelParams,
    pub schedule: &'a LayerSchedule,
}

impl ConfigEvaluator for ModelEvaluator<'_> {
    fn evaluate(&self, config: &Configuration, subset: &EvalSubset) -> Result<EvalStats> {
        evaluate_config(self.params, self.schedule, config, &subset.samples)
    }
}

/// Per-(configuration, subset) relative accuracies against the maximal
/// configuration, plus the viable flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViabilityReport {
    pub subset_names: Vec<String>,
    pub configs: Vec<Configuration>,
    /// `[config][subset]` accuracy relative to the maximal configuration.
    pub relative_accuracy: Vec<Vec<f64>>,
    /// `[config][subset]` absolute exact-match accuracy.
    pub absolute_accuracy: Vec<Vec<f64>>,
    pub viable: Vec<bool>,
    pub threshold: f64,
    pub maximal_config_id: usize,
}

impl ViabilityReport {
    pub fn viable_configs(&self) -> Vec<Configuration> {
        self.configs
            .iter()
            .zip(self.viable.iter())
            .filter(|(_, v)| **v)
            .map(|(c, _)| c.clone())
            .collect()
    }
}

/// Screens `configs` against `eval_subsets` with the model evaluator.
/// `configs` must contain the maximal configuration (every schedule SA
/// layer active); the model is expected to be pretrained at it.
pub fn screen_viability(
    params: &ModelParams,
    schedule: &LayerSchedule,
    eval_subsets: &[EvalSubset],
    configs: &[Configuration],
    threshold: f64,
) -> Result<ViabilityReport> {
    let evaluator = ModelEvaluator { params, schedule };
    screen_with(&evaluator, schedule, eval_subsets, configs, threshold)
}

/// Screening core, generic over the evaluator. Evaluations fan out over
/// threads; results are assembled by index so the report is deterministic.
pub fn screen_with(
    evaluator: &dyn ConfigEvaluator,
    schedule: &LayerSchedule,
    eval_subsets: &[EvalSubset],
    configs: &[Configuration],
    threshold: f64,
) -> Result<ViabilityReport> {
    if eval_subsets.is_empty() {
        return Err(CoreError::InvalidArgument("no evaluation subsets given".into()));
    }
    if let Some(empty) = eval_subsets.iter().find(|s| s.samples.is_empty()) {
        return Err(CoreError::InvalidArgument(format!(
            "evaluation subset {:?} is empty",
            empty.name
        )));
    }
    let maximal_id = configs
        .iter()
        .find(|c| c.active_sa() == schedule.sa_indices())
        .map(|c| c.id())
        .ok_or_else(|| {
            CoreError::InvalidArgument(
                "configs must include the maximal configuration (all schedule SA layers)".into(),
            )
        })?;

    let accuracy = par_map(configs, |config| -> Result<Vec<EvalStats>> {
        eval_subsets.iter().map(|subset| evaluator.evaluate(config, subset)).collect()
    })?;

    let maximal_pos = configs.iter().position(|c| c.id() == maximal_id).expect("found above");
    let max_acc: Vec<f64> = accuracy[maximal_pos].iter().map(|s| s.accuracy).collect();

    let mut relative = Vec::with_capacity(configs.len());
    let mut absolute = Vec::with_capacity(configs.len());
    let mut viable = Vec::with_capacity(configs.len());
    for (ci, per_subset) in accuracy.iter().enumerate() {
        let mut rel_row = Vec::with_capacity(eval_subsets.len());
        let mut abs_row = Vec::with_capacity(eval_subsets.len());
        for (si, stats) in per_subset.iter().enumerate() {
            let rel = if ci == maximal_pos {
                1.0
            } else if max_acc[si] > 0.0 {
                stats.accuracy / max_acc[si]
            } else if stats.accuracy == 0.0 {
                1.0
            } else {
                f64::INFINITY
            };
            rel_row.push(rel);
            abs_row.push(stats.accuracy);
        }
        viable.push(rel_row.iter().any(|&r| r >= threshold));
        relative.push(rel_row);
        absolute.push(abs_row);
    }

    Ok(ViabilityReport {
        subset_names: eval_subsets.iter().map(|s| s.name.clone()).collect(),
        configs: configs.to_vec(),
        relative_accuracy: relative,
        absolute_accuracy: absolute,
        viable,
        threshold,
        maximal_config_id: maximal_id,
    })
}

/// Chunked scoped-thread map preserving input order.
pub(crate) fn par_map<T: Sync, R: Send>(
    items: &[T],
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let threads = std::thread::available_parallelism().map(|p| p.get()).unwrap_or(1);
    let threads = threads.min(items.len().max(1));
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut results: Vec<Result<Vec<R>>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        for h in handles {
            results.push(h.join().expect("worker thread panicked"));
        }
    });
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// The reference 13-configuration list for a 24-layer model, usable as a
/// fixture. Each entry lists the layers at which self-attention executes;
/// layer 1 appears in all of them because dropping it collapses accuracy.
pub fn load_reference_configs() -> Vec<Configuration> {
    const REFERENCE: [&[usize]; 13] = [
        &[1, 4],
        &[1, 7],
        &[1, 4, 7],
        &[1, 4, 16],
        &[1, 7, 16],
        &[1, 10, 16],
        &[1, 4, 7, 16],
        &[1, 4, 7, 22],
        &[1, 4, 10, 16],
        &[1, 4, 7, 10, 16],
        &[1, 4, 7, 16, 22],
        &[1, 4, 7, 10, 16, 22],
        &[1, 4, 7, 10, 16, 19, 22],
    ];
    REFERENCE
        .iter()
        .enumerate()
        .map(|(id, active)| Configuration::new(active.to_vec(), id))
        .collect()
}

/// Writes the report as CSV (rows: configs; columns: subsets; values:
/// relative accuracy) plus a JSON sidecar carrying the viable list that
/// universal training and the router consume.
pub fn write_report(report: &ViabilityReport, csv_path: &Path, json_path: &Path) -> Result<()> {
    std::fs::write(csv_path, report_csv(report))?;
    let sidecar = ViabilitySidecar {
        threshold: report.threshold,
        maximal_config_id: report.maximal_config_id,
        viable: report.viable_configs(),
        subset_names: report.subset_names.clone(),
    };
    std::fs::write(json_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn report_csv(report: &ViabilityReport) -> String {
    let mut out = String::from("config_id,active_sa,viable");
    for name in &report.subset_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (ci, config) in report.configs.iter().enumerate() {
        let active: Vec<String> = config.active_sa().iter().map(|i| i.to_string()).collect();
        out.push_str(&format!("{},{},{}", config.id(), active.join(" "), report.viable[ci]));
        for rel in &report.relative_accuracy[ci] {
            out.push_str(&format!(",{rel}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViabilitySidecar {
    pub threshold: f64,
    pub maximal_config_id: usize,
    pub viable: Vec<Configuration>,
    pub subset_names: Vec<String>,
}

pub fn load_viable_sidecar(path: &Path) -> Result<ViabilitySidecar> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

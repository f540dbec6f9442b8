//! Vision-drop sensitivity: accuracy when visual tokens are removed from
//! the attention of random layer subsets.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::configspace::par_map;
use crate::error::{CoreError, Result};
use crate::model::{forward_sample_dropped, ForwardTrace, LayerSchedule, ModelParams, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropSensitivityRecord {
    pub dropped_layers: Vec<usize>,
    pub accuracy: f64,
}

/// Evaluates exact-match accuracy with visual tokens masked out of the
/// attention of each sampled layer subset. The empty subset comes first and
/// is the baseline. Subsets are drawn reproducibly from `seed` by
/// including each layer with probability 1/2.
pub fn layer_drop_sensitivity(
    params: &ModelParams,
    schedule: &LayerSchedule,
    eval_set: &[Sample],
    num_subsets: usize,
    seed: u64,
) -> Result<Vec<DropSensitivityRecord>> {
    if eval_set.is_empty() {
        return Err(CoreError::InvalidArgument("empty evaluation set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subsets: Vec<BTreeSet<usize>> = vec![BTreeSet::new()];
    for _ in 0..num_subsets {
        let subset: BTreeSet<usize> =
            (0..schedule.total_layers()).filter(|_| rng.gen_bool(0.5)).collect();
        subsets.push(subset);
    }

    let records = par_map(&subsets, |subset| -> Result<DropSensitivityRecord> {
        let mut correct = 0usize;
        for sample in eval_set {
            if dropped_exact_match(params, schedule, sample, subset)? {
                correct += 1;
            }
        }
        Ok(DropSensitivityRecord {
            dropped_layers: subset.iter().copied().collect(),
            accuracy: correct as f64 / eval_set.len() as f64,
        })
    })?;
    Ok(records)
}

/// Teacher-forced exact match with visual tokens dropped at `subset` layers.
fn dropped_exact_match(
    params: &ModelParams,
    schedule: &LayerSchedule,
    sample: &Sample,
    subset: &BTreeSet<usize>,
) -> Result<bool> {
    let config = schedule.maximal_config();
    let (logits, _trace): (crate::numkernel::Matrix, ForwardTrace) =
        forward_sample_dropped(params, schedule, &config, sample, Some(subset), false)?;
    let answer = sample.answer();
    for (i, &truth) in answer.iter().enumerate() {
        if crate::model::argmax_token(logits.row(sample.answer_start - 1 + i)) != truth {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Long-format CSV: `subset_id,dropped_layers,accuracy`.
pub fn drop_csv(records: &[DropSensitivityRecord]) -> String {
    let mut out = String::from("subset_id,dropped_layers,accuracy\n");
    for (i, r) in records.iter().enumerate() {
        let layers: Vec<String> = r.dropped_layers.iter().map(|l| l.to_string()).collect();
        out.push_str(&format!("{i},{},{}\n", layers.join(" "), r.accuracy));
    }
    out
}

//! Training: answer-only cross-entropy, Adam updates with decoupled weight
//! decay fixed at zero, and the universal loop that re-draws a viable
//! configuration uniformly at every optimization step.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::numkernel::{Matrix, Tape};

use super::forward::{argmax_token, execution_plan, Engine, Sample, VisualInput};
use super::params::ModelParams;
use super::schedule::{Configuration, LayerSchedule};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> =
            params.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimization step on a batch: forward every sample under `config`,
/// average the per-sample answer cross-entropies, backpropagate, and apply
/// an Adam update (no weight decay). Returns the batch loss.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut AdamState,
    schedule: &LayerSchedule,
    config: &Configuration,
    batch: &[Sample],
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::InvalidArgument("empty training batch".into()));
    }
    let plan = execution_plan(schedule, config, None)?;
    let mut tape = Tape::new();

    // One set of parameter leaves for the whole batch, so the per-sample
    // gradients accumulate onto the same nodes.
    let bound = super::forward::bind_params(&mut tape, params);
    let mut total: Option<crate::numkernel::Var> = None;
    let weight = 1.0 / batch.len() as f64;
    for sample in batch {
        sample.validate()?;
        let mut engine = Engine::with_bound(
            &mut tape,
            params,
            schedule,
            VisualInput::FromSample(sample),
            &sample.text_ids,
            false,
            bound.clone(),
        )?;
        engine.run_until(schedule.total_layers(), &plan)?;
        let logits = engine.logits()?;
        let targets = sample.answer_targets();
        let loss = tape.cross_entropy(logits, &targets)?;
        let scaled = tape.scale(loss, weight);
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    let total = total.expect("non-empty batch");
    let loss_value = tape.scalar(total);
    if !loss_value.is_finite() {
        return Err(CoreError::NonFinite {
            context: "train_step",
            detail: format!(
                "batch loss {loss_value} with {} samples at optimizer step {}",
                batch.len(),
                opt.step + 1
            ),
        });
    }

    let grads = tape.backward(total)?;
    opt.step += 1;
    let bias1 = 1.0 - ADAM_BETA1.powi(opt.step as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(opt.step as i32);
    for (i, var) in bound.iter().enumerate() {
        let g = grads.wrt(*var, &tape);
        let m = &mut opt.m[i];
        let v = &mut opt.v[i];
        let p = params.tensor_mut(i);
        for j in 0..g.data().len() {
            let gj = g.data()[j];
            let mj = ADAM_BETA1 * m.data()[j] + (1.0 - ADAM_BETA1) * gj;
            let vj = ADAM_BETA2 * v.data()[j] + (1.0 - ADAM_BETA2) * gj * gj;
            m.data_mut()[j] = mj;
            v.data_mut()[j] = vj;
            let update = lr * (mj / bias1) / ((vj / bias2).sqrt() + ADAM_EPS);
            p.data_mut()[j] -= update;
        }
    }
    Ok(loss_value)
}

/// The uniform configuration sampler behind universal training: a seeded
/// stream of indices into a viable list of size `n`.
pub struct UniformConfigSampler {
    rng: ChaCha8Rng,
    n: usize,
}

impl UniformConfigSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        UniformConfigSampler { rng: ChaCha8Rng::seed_from_u64(seed), n }
    }

    pub fn next_index(&mut self) -> usize {
        self.rng.gen_range(0..self.n)
    }
}

/// Universal fine-tuning: every step draws one configuration uniformly at
/// random from the viable list (reproducibly from `seed`), then runs a
/// normal training step with it. Batches cycle the dataset in order.
/// Returns the drawn configuration ids, in step order.
#[allow(clippy::too_many_arguments)]
pub fn train_universal(
    params: &mut ModelParams,
    opt: &mut AdamState,
    schedule: &LayerSchedule,
    viable: &[Configuration],
    dataset: &[Sample],
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if viable.is_empty() {
        return Err(CoreError::InvalidArgument("viable configuration set is empty".into()));
    }
    if dataset.is_empty() || batch_size == 0 {
        return Err(CoreError::InvalidArgument("dataset and batch size must be non-empty".into()));
    }
    let mut sampler = UniformConfigSampler::new(viable.len(), seed);
    let mut drawn = Vec::with_capacity(steps);
    let mut cursor = 0usize;
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..steps {
        let pick = sampler.next_index();
        drawn.push(viable[pick].id());
        batch.clear();
        for _ in 0..batch_size {
            batch.push(dataset[cursor % dataset.len()].clone());
            cursor += 1;
        }
        train_step(params, opt, schedule, &viable[pick], &batch, lr)?;
    }
    Ok(drawn)
}

/// Per-sample evaluation record under one configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleScore {
    /// Exact match of the greedy decode against the reference answer.
    pub correct: bool,
    /// Number of matching answer tokens up to the first mismatch.
    pub prefix_matches: usize,
    /// Mean answer-token cross-entropy.
    pub loss: f64,
}

/// Teacher-forced scoring of one sample. The per-position argmax against
/// the true prefix agrees with token-by-token greedy decoding up to the
/// first mismatch, which is exactly what exact-match accuracy and
/// prefix-match scores need, at one forward pass instead of one per token.
pub fn sample_score(
    params: &ModelParams,
    schedule: &LayerSchedule,
    config: &Configuration,
    sample: &Sample,
) -> Result<SampleScore> {
    sample.validate()?;
    let (logits, _) = super::forward::forward_sample(params, schedule, config, sample, false)?;
    let answer = sample.answer();
    let mut prefix = 0usize;
    for (i, &truth) in answer.iter().enumerate() {
        let row = logits.row(sample.answer_start - 1 + i);
        if argmax_token(row) == truth {
            prefix += 1;
        } else {
            break;
        }
    }
    Ok(SampleScore {
        correct: prefix == answer.len(),
        prefix_matches: prefix,
        loss: mean_answer_loss(&logits, sample),
    })
}

/// Mean answer-token cross-entropy computed from a logits matrix.
pub fn mean_answer_loss(logits: &Matrix, sample: &Sample) -> f64 {
    let targets = sample.answer_targets();
    let mut total = 0.0;
    for (row, tok) in &targets {
        let r = logits.row(*row);
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = r.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        total -= (r[*tok] - max) - log_sum;
    }
    total / targets.len() as f64
}

/// Aggregate accuracy and mean loss of a configuration over a sample set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub n: usize,
}

pub fn evaluate_config(
    params: &ModelParams,
    schedule: &LayerSchedule,
    config: &Configuration,
    samples: &[Sample],
) -> Result<EvalStats> {
    if samples.is_empty() {
        return Err(CoreError::InvalidArgument("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for s in samples {
        let score = sample_score(params, schedule, config, s)?;
        if score.correct {
            correct += 1;
        }
        loss += score.loss;
    }
    Ok(EvalStats {
        accuracy: correct as f64 / samples.len() as f64,
        mean_loss: loss / samples.len() as f64,
        n: samples.len(),
    })
}

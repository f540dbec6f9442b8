//! Experiment orchestration: every CLI subcommand is a function here, so
//! tests drive the same code paths end to end. Each stage works inside a
//! run directory, echoes the resolved configuration as `config.json`, and
//! writes only deterministic artifacts (no timestamps, fixed field order),
//! so re-running a stage from its own echoed config reproduces its metric
//! files byte for byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use vlsched_core::analysis::{
    attention_shares, cka_matrix_mean, cost_csv, drop_csv, flops_report, layer_drop_sensitivity,
    oracle_evaluate, shares_csv, AttentionShareRecord, Segments,
};
use vlsched_core::configspace::{
    enumerate_configurations, load_viable_sidecar, screen_viability, write_report, EvalSubset,
};
use vlsched_core::model::{
    build_schedule, evaluate_config, forward_sample, load_checkpoint, save_checkpoint, AdamState,
    Checkpoint, Configuration, ForwardTrace, LayerSchedule, ModelParams, Sample, train_step,
    train_universal,
};
use vlsched_core::packing::{
    averaging_projector, pack_tokens, read_grid, write_grid, GridProvenance, TokenGrid,
};
use vlsched_core::router::{
    attach_routing_token_sample, generate_pseudo_labels, init_router_head, routed_sample_score,
    train_router, write_labels_jsonl, PseudoLabel,
};
use vlsched_core::{CoreError, Result};

use crate::dataset;
use crate::experiment::{ExperimentConfig, SeedStream};
use crate::synthetic::{gen_synthetic, Difficulty, SyntheticSample};
use crate::vocab::ROUTE;

/// A run directory with its resolved configuration echoed to disk.
pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub out_dir: PathBuf,
}

impl RunContext {
    pub fn create(cfg: ExperimentConfig, out_dir: PathBuf) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(&out_dir)?;
        std::fs::write(out_dir.join("config.json"), cfg.to_pretty_json())?;
        Ok(RunContext { cfg, out_dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(self.path(name), text)?;
        Ok(())
    }
}

/// Train and evaluation data with routing tokens attached, grouped into
/// difficulty subsets.
pub struct PreparedData {
    pub train: Vec<SyntheticSample>,
    pub eval: Vec<SyntheticSample>,
    pub train_subsets: Vec<EvalSubset>,
    pub eval_subsets: Vec<EvalSubset>,
}

impl PreparedData {
    pub fn train_samples(&self) -> Vec<Sample> {
        self.train.iter().map(|s| s.sample.clone()).collect()
    }

    pub fn eval_samples(&self) -> Vec<Sample> {
        self.eval.iter().map(|s| s.sample.clone()).collect()
    }
}

fn subsets_of(data: &[SyntheticSample]) -> Vec<EvalSubset> {
    let mut coarse = Vec::new();
    let mut fine = Vec::new();
    for s in data {
        match s.difficulty {
            Difficulty::Coarse => coarse.push(s.sample.clone()),
            Difficulty::Fine => fine.push(s.sample.clone()),
        }
    }
    let mut out = Vec::new();
    if !coarse.is_empty() {
        out.push(EvalSubset { name: "coarse".into(), samples: coarse });
    }
    if !fine.is_empty() {
        out.push(EvalSubset { name: "fine".into(), samples: fine });
    }
    out
}

/// Generates both splits from the config seed and attaches one routing
/// token after each question, so training and routed inference see the same
/// sequence layout.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let spec = cfg.task_spec();
    let attach = |data: Vec<SyntheticSample>| -> Result<Vec<SyntheticSample>> {
        data.into_iter()
            .map(|s| {
                Ok(SyntheticSample {
                    difficulty: s.difficulty,
                    sample: attach_routing_token_sample(&s.sample, ROUTE)?,
                })
            })
            .collect()
    };
    let train = attach(gen_synthetic(
        &spec,
        cfg.data.kind,
        cfg.data.n_train,
        cfg.seed_for(SeedStream::TrainData),
    )?)?;
    let eval = attach(gen_synthetic(
        &spec,
        cfg.data.kind,
        cfg.data.n_eval,
        cfg.seed_for(SeedStream::EvalData),
    )?)?;
    Ok(PreparedData {
        train_subsets: subsets_of(&train),
        eval_subsets: subsets_of(&eval),
        train,
        eval,
    })
}

pub fn cmd_gen_data(ctx: &RunContext) -> Result<()> {
    let data = prepare_data(&ctx.cfg)?;
    dataset::write_dataset(
        &ctx.out_dir,
        "train",
        &data.train,
        ctx.cfg.data.grid_h,
        ctx.cfg.data.grid_w,
    )?;
    dataset::write_dataset(
        &ctx.out_dir,
        "eval",
        &data.eval,
        ctx.cfg.data.grid_h,
        ctx.cfg.data.grid_w,
    )?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Dense reference: every layer is self-attention over `[V; T]`.
    Dense,
    /// The configured schedule at its maximal configuration.
    Fixed,
    /// Full adaptive recipe: pretrain maximal, screen, universal fine-tune,
    /// pseudo-label, train the routing head.
    Universal,
}

#[derive(Debug, Serialize)]
struct TrainMetrics {
    mode: String,
    pretrain_steps: usize,
    final_loss: f64,
    eval: Vec<SubsetMetric>,
    universal_steps: Option<usize>,
    viable_config_ids: Option<Vec<usize>>,
    router_holdout_accuracy: Option<f64>,
}

#[derive(Debug, Serialize)]
struct SubsetMetric {
    subset: String,
    accuracy: f64,
    mean_loss: f64,
    n: usize,
}

fn eval_subset_metrics(
    params: &ModelParams,
    schedule: &LayerSchedule,
    config: &Configuration,
    subsets: &[EvalSubset],
) -> Result<Vec<SubsetMetric>> {
    subsets
        .iter()
        .map(|s| {
            let stats = evaluate_config(params, schedule, config, &s.samples)?;
            Ok(SubsetMetric {
                subset: s.name.clone(),
                accuracy: stats.accuracy,
                mean_loss: stats.mean_loss,
                n: stats.n,
            })
        })
        .collect()
}

fn pretrain(
    ctx: &RunContext,
    schedule: &LayerSchedule,
    data: &PreparedData,
    log_name: &str,
) -> Result<(ModelParams, f64)> {
    let dims = ctx.cfg.model_dims()?;
    let mut params = ModelParams::init(dims, schedule, ctx.cfg.seed_for(SeedStream::ParamInit))?;
    let mut opt = AdamState::new(&params);
    let config = schedule.maximal_config();
    let train = data.train_samples();
    let bs = ctx.cfg.training.batch_size;
    let mut cursor = 0usize;
    let mut log = String::from("step,loss\n");
    let mut last_loss = f64::NAN;
    for step in 0..ctx.cfg.training.steps {
        let batch: Vec<Sample> =
            (0..bs).map(|i| train[(cursor + i) % train.len()].clone()).collect();
        cursor += bs;
        last_loss = train_step(&mut params, &mut opt, schedule, &config, &batch, ctx.cfg.training.lr)?;
        log.push_str(&format!("{step},{last_loss}\n"));
    }
    std::fs::write(ctx.path(log_name), log)?;
    Ok((params, last_loss))
}

pub fn cmd_train(
    ctx: &RunContext,
    mode: TrainMode,
    resume: Option<&Path>,
    viable_path: Option<&Path>,
) -> Result<()> {
    let data = prepare_data(&ctx.cfg)?;
    match mode {
        TrainMode::Dense => {
            let layers = ctx.cfg.model.layers;
            let schedule = build_schedule(layers, &[], &(0..layers).collect::<Vec<_>>())?;
            let (params, last_loss) = pretrain(ctx, &schedule, &data, "train_log.csv")?;
            let eval = eval_subset_metrics(
                &params,
                &schedule,
                &schedule.maximal_config(),
                &data.eval_subsets,
            )?;
            let ckpt = Checkpoint::new(params, schedule)
                .with_seed("init", ctx.cfg.seed_for(SeedStream::ParamInit));
            save_checkpoint(&ctx.path("checkpoint.json"), &ckpt)?;
            ctx.write_json(
                "train_metrics.json",
                &TrainMetrics {
                    mode: "dense".into(),
                    pretrain_steps: ctx.cfg.training.steps,
                    final_loss: last_loss,
                    eval,
                    universal_steps: None,
                    viable_config_ids: None,
                    router_holdout_accuracy: None,
                },
            )
        }
        TrainMode::Fixed => {
            let schedule = ctx.cfg.build_schedule()?;
            let (params, last_loss) = pretrain(ctx, &schedule, &data, "train_log.csv")?;
            let eval = eval_subset_metrics(
                &params,
                &schedule,
                &schedule.maximal_config(),
                &data.eval_subsets,
            )?;
            let ckpt = Checkpoint::new(params, schedule)
                .with_seed("init", ctx.cfg.seed_for(SeedStream::ParamInit));
            save_checkpoint(&ctx.path("checkpoint.json"), &ckpt)?;
            ctx.write_json(
                "train_metrics.json",
                &TrainMetrics {
                    mode: "fixed".into(),
                    pretrain_steps: ctx.cfg.training.steps,
                    final_loss: last_loss,
                    eval,
                    universal_steps: None,
                    viable_config_ids: None,
                    router_holdout_accuracy: None,
                },
            )
        }
        TrainMode::Universal => {
            let schedule = ctx.cfg.build_schedule()?;

            // Stage 1: reference network at the maximal configuration.
            let (mut params, pretrain_loss) = match resume {
                Some(path) => {
                    let ckpt = load_checkpoint(path)?;
                    if ckpt.schedule != schedule {
                        return Err(CoreError::InvalidArgument(
                            "resume checkpoint was trained under a different schedule".into(),
                        ));
                    }
                    (ckpt.params, f64::NAN)
                }
                None => pretrain(ctx, &schedule, &data, "pretrain_log.csv")?,
            };

            // Stage 2: viable configurations.
            let viable: Vec<Configuration> = match viable_path {
                Some(path) => load_viable_sidecar(path)?.viable,
                None => {
                    let configs = enumerate_configurations(
                        schedule.sa_indices(),
                        ctx.cfg.screening.max_configs,
                    )?;
                    let report = screen_viability(
                        &params,
                        &schedule,
                        &data.eval_subsets,
                        &configs,
                        ctx.cfg.screening.threshold,
                    )?;
                    write_report(&report, &ctx.path("viability.csv"), &ctx.path("viable.json"))?;
                    report.viable_configs()
                }
            };
            if viable.is_empty() {
                return Err(CoreError::InvalidArgument(
                    "screening produced no viable configurations".into(),
                ));
            }

            // Stage 3: universal fine-tuning over the viable set.
            let mut opt = AdamState::new(&params);
            let drawn = train_universal(
                &mut params,
                &mut opt,
                &schedule,
                &viable,
                &data.train_samples(),
                ctx.cfg.training.universal_steps,
                ctx.cfg.training.batch_size,
                ctx.cfg.training.universal_lr,
                ctx.cfg.seed_for(SeedStream::UniversalDraws),
            )?;
            let mut draw_log = String::from("step,config_id\n");
            for (i, id) in drawn.iter().enumerate() {
                draw_log.push_str(&format!("{i},{id}\n"));
            }
            std::fs::write(ctx.path("universal_draws.csv"), draw_log)?;

            // Stage 4: offline pseudo-labels on the training subsets.
            let labels =
                generate_pseudo_labels(&params, &schedule, &data.train_subsets, &viable)?;
            write_labels_jsonl(&labels, &ctx.path("labels.jsonl"))?;

            // Stage 5: routing head on frozen features.
            init_router_head(
                &mut params,
                &schedule,
                &viable,
                ROUTE,
                ctx.cfg.seed_for(SeedStream::RouterInit),
            )?;
            let labeled = labeled_samples(&data, &labels);
            let holdout_acc = train_router(
                &mut params,
                &schedule,
                &viable,
                &labeled,
                ROUTE,
                ctx.cfg.training.router_steps,
                ctx.cfg.training.router_lr,
                ctx.cfg.seed_for(SeedStream::RouterTrain),
            )?;

            let eval = eval_subset_metrics(
                &params,
                &schedule,
                &schedule.maximal_config(),
                &data.eval_subsets,
            )?;
            let viable_ids: Vec<usize> = viable.iter().map(|c| c.id()).collect();
            let ckpt = Checkpoint::new(params, schedule)
                .with_seed("init", ctx.cfg.seed_for(SeedStream::ParamInit))
                .with_seed("universal_draws", ctx.cfg.seed_for(SeedStream::UniversalDraws))
                .with_seed("router_train", ctx.cfg.seed_for(SeedStream::RouterTrain))
                .with_viable(viable);
            save_checkpoint(&ctx.path("checkpoint.json"), &ckpt)?;
            ctx.write_json(
                "train_metrics.json",
                &TrainMetrics {
                    mode: "universal".into(),
                    pretrain_steps: if resume.is_some() { 0 } else { ctx.cfg.training.steps },
                    final_loss: pretrain_loss,
                    eval,
                    universal_steps: Some(ctx.cfg.training.universal_steps),
                    viable_config_ids: Some(viable_ids),
                    router_holdout_accuracy: Some(holdout_acc),
                },
            )
        }
    }
}

/// Broadcasts each subset's pseudo-label to its training samples.
fn labeled_samples(data: &PreparedData, labels: &[PseudoLabel]) -> Vec<(Sample, usize)> {
    let mut out = Vec::new();
    for subset in &data.train_subsets {
        if let Some(label) = labels.iter().find(|l| l.subset == subset.name) {
            for s in &subset.samples {
                out.push((s.clone(), label.viable_index));
            }
        }
    }
    out
}

pub fn cmd_screen(ctx: &RunContext, ckpt_path: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let data = prepare_data(&ctx.cfg)?;
    let configs =
        enumerate_configurations(ckpt.schedule.sa_indices(), ctx.cfg.screening.max_configs)?;
    let report = screen_viability(
        &ckpt.params,
        &ckpt.schedule,
        &data.eval_subsets,
        &configs,
        ctx.cfg.screening.threshold,
    )?;
    write_report(&report, &ctx.path("viability.csv"), &ctx.path("viable.json"))?;
    Ok(())
}

pub fn cmd_route_label(ctx: &RunContext, ckpt_path: &Path, viable_path: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let viable = load_viable_sidecar(viable_path)?.viable;
    let data = prepare_data(&ctx.cfg)?;
    let labels = generate_pseudo_labels(&ckpt.params, &ckpt.schedule, &data.train_subsets, &viable)?;
    write_labels_jsonl(&labels, &ctx.path("labels.jsonl"))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct RouterMetrics {
    holdout_accuracy: f64,
    read_layer: usize,
    n_labeled: usize,
}

pub fn cmd_route_train(
    ctx: &RunContext,
    ckpt_path: &Path,
    viable_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let mut ckpt = load_checkpoint(ckpt_path)?;
    let viable = load_viable_sidecar(viable_path)?.viable;
    let labels = vlsched_core::router::read_labels_jsonl(labels_path)?;
    let data = prepare_data(&ctx.cfg)?;
    init_router_head(
        &mut ckpt.params,
        &ckpt.schedule,
        &viable,
        ROUTE,
        ctx.cfg.seed_for(SeedStream::RouterInit),
    )?;
    let labeled = labeled_samples(&data, &labels);
    let holdout = train_router(
        &mut ckpt.params,
        &ckpt.schedule,
        &viable,
        &labeled,
        ROUTE,
        ctx.cfg.training.router_steps,
        ctx.cfg.training.router_lr,
        ctx.cfg.seed_for(SeedStream::RouterTrain),
    )?;
    let read_layer = ckpt.params.router_head.as_ref().expect("initialized").read_layer;
    ckpt.viable_configs = Some(viable);
    save_checkpoint(&ctx.path("checkpoint.json"), &ckpt)?;
    ctx.write_json(
        "router_metrics.json",
        &RouterMetrics { holdout_accuracy: holdout, read_layer, n_labeled: labeled.len() },
    )?;
    Ok(())
}

#[derive(Debug, Clone)]
pub enum EvalMode {
    /// `None` selects the maximal configuration.
    Fixed(Option<usize>),
    Routed,
    Oracle,
}

#[derive(Debug, Serialize)]
struct EvalMetrics {
    mode: String,
    config_id: Option<usize>,
    accuracy: f64,
    mean_loss: Option<f64>,
    mean_flops: f64,
    mean_savings: f64,
    per_subset: Vec<SubsetMetric>,
}

fn viable_or_enumerated(
    ckpt: &Checkpoint,
    max_configs: Option<usize>,
) -> Result<Vec<Configuration>> {
    match &ckpt.viable_configs {
        Some(v) if !v.is_empty() => Ok(v.clone()),
        _ => enumerate_configurations(ckpt.schedule.sa_indices(), max_configs),
    }
}

fn mean_config_flops(
    schedule: &LayerSchedule,
    config: &Configuration,
    samples: &[Sample],
    d: usize,
    d_ff: usize,
) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut dense = 0.0;
    for s in samples {
        let report =
            flops_report(schedule, config, s.text_ids.len(), s.visual_ids.len(), d, d_ff)?;
        total += report.total as f64;
        dense += report.dense_total as f64;
    }
    let n = samples.len() as f64;
    Ok((total / n, dense / total))
}

pub fn cmd_eval(ctx: &RunContext, ckpt_path: &Path, mode: EvalMode) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let data = prepare_data(&ctx.cfg)?;
    let eval_all = data.eval_samples();
    let dims = ckpt.params.dims;

    let metrics = match &mode {
        EvalMode::Fixed(sel) => {
            let config = match sel {
                None => ckpt.schedule.maximal_config(),
                Some(id) => {
                    let candidates = viable_or_enumerated(&ckpt, ctx.cfg.screening.max_configs)?;
                    candidates
                        .iter()
                        .find(|c| c.id() == *id)
                        .cloned()
                        .ok_or_else(|| {
                            CoreError::InvalidArgument(format!("no configuration with id {id}"))
                        })?
                }
            };
            let stats = evaluate_config(&ckpt.params, &ckpt.schedule, &config, &eval_all)?;
            let per_subset =
                eval_subset_metrics(&ckpt.params, &ckpt.schedule, &config, &data.eval_subsets)?;
            let (mean_flops, mean_savings) =
                mean_config_flops(&ckpt.schedule, &config, &eval_all, dims.d, dims.d_ff)?;
            EvalMetrics {
                mode: "fixed".into(),
                config_id: Some(config.id()),
                accuracy: stats.accuracy,
                mean_loss: Some(stats.mean_loss),
                mean_flops,
                mean_savings,
                per_subset,
            }
        }
        EvalMode::Routed => {
            let viable = ckpt.viable_configs.clone().ok_or_else(|| {
                CoreError::InvalidArgument(
                    "checkpoint carries no viable configurations; run screening first".into(),
                )
            })?;
            let routed = routed_eval(&ckpt, &viable, &data, dims.d, dims.d_ff)?;

            // Comparison table: every viable fixed configuration vs routing.
            let mut table = String::from("row,config,accuracy,mean_flops,savings\n");
            for config in &viable {
                let stats = evaluate_config(&ckpt.params, &ckpt.schedule, config, &eval_all)?;
                let (flops, savings) =
                    mean_config_flops(&ckpt.schedule, config, &eval_all, dims.d, dims.d_ff)?;
                table.push_str(&format!(
                    "fixed,{:?},{},{flops},{savings}\n",
                    config.active_sa(),
                    stats.accuracy
                ));
            }
            table.push_str(&format!(
                "routed,adaptive,{},{},{}\n",
                routed.accuracy, routed.mean_flops, routed.mean_savings
            ));
            std::fs::write(ctx.path("comparison.csv"), &table)?;
            println!("{table}");
            routed
        }
        EvalMode::Oracle => {
            let configs = viable_or_enumerated(&ckpt, ctx.cfg.screening.max_configs)?;
            let (accuracy, choices) =
                oracle_evaluate(&ckpt.params, &ckpt.schedule, &eval_all, &configs)?;
            let mut mean_flops = 0.0;
            let mut dense = 0.0;
            for (s, choice) in eval_all.iter().zip(choices.iter()) {
                let report = flops_report(
                    &ckpt.schedule,
                    choice,
                    s.text_ids.len(),
                    s.visual_ids.len(),
                    dims.d,
                    dims.d_ff,
                )?;
                mean_flops += report.total as f64;
                dense += report.dense_total as f64;
            }
            let n = eval_all.len() as f64;
            EvalMetrics {
                mode: "oracle".into(),
                config_id: None,
                accuracy,
                mean_loss: None,
                mean_flops: mean_flops / n,
                mean_savings: dense / mean_flops,
                per_subset: Vec::new(),
            }
        }
    };
    ctx.write_json("metrics.json", &metrics)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn routed_eval(
    ckpt: &Checkpoint,
    viable: &[Configuration],
    data: &PreparedData,
    d: usize,
    d_ff: usize,
) -> Result<EvalMetrics> {
    let mut correct = 0usize;
    let mut loss = 0.0;
    let mut flops = 0.0;
    let mut dense = 0.0;
    let mut per_subset = Vec::new();
    for subset in &data.eval_subsets {
        let mut sub_correct = 0usize;
        let mut sub_loss = 0.0;
        for sample in &subset.samples {
            let (ok, sample_loss, decision) =
                routed_sample_score(&ckpt.params, &ckpt.schedule, viable, sample, ROUTE)?;
            let config = &viable[decision.final_index];
            let report = flops_report(
                &ckpt.schedule,
                config,
                sample.text_ids.len(),
                sample.visual_ids.len(),
                d,
                d_ff,
            )?;
            flops += report.total as f64;
            dense += report.dense_total as f64;
            loss += sample_loss;
            if ok {
                correct += 1;
                sub_correct += 1;
            }
            sub_loss += sample_loss;
        }
        per_subset.push(SubsetMetric {
            subset: subset.name.clone(),
            accuracy: sub_correct as f64 / subset.samples.len() as f64,
            mean_loss: sub_loss / subset.samples.len() as f64,
            n: subset.samples.len(),
        });
    }
    let n: usize = data.eval_subsets.iter().map(|s| s.samples.len()).sum();
    Ok(EvalMetrics {
        mode: "routed".into(),
        config_id: None,
        accuracy: correct as f64 / n as f64,
        mean_loss: Some(loss / n as f64),
        mean_flops: flops / n as f64,
        mean_savings: dense / flops,
        per_subset,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyzeKind {
    Cka,
    Shares,
    Drop,
    Flops,
}

#[derive(Debug, Serialize)]
struct CkaSummary {
    n_samples: usize,
    states: usize,
    min_off_diagonal: f64,
    mean_off_diagonal: f64,
}

#[derive(Debug, Serialize)]
struct SharesSummary {
    n_samples: usize,
    mean_query_to_image: f64,
    mean_answer_to_image: f64,
    mean_answer_to_query: f64,
}

#[derive(Debug, Serialize)]
struct DropSummary {
    baseline_accuracy: f64,
    min_accuracy: f64,
    n_subsets: usize,
}

#[derive(Debug, Serialize)]
struct FlopsSummary {
    n_t: usize,
    n_v: usize,
    maximal_total: u128,
    maximal_savings: f64,
    empty_total: u128,
    empty_savings: f64,
}

/// How many eval samples the trace-based analyses read.
const ANALYSIS_SAMPLE_CAP: usize = 16;

pub fn cmd_analyze(ctx: &RunContext, ckpt_path: &Path, what: AnalyzeKind) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let data = prepare_data(&ctx.cfg)?;
    let eval_all = data.eval_samples();
    let config = ckpt.schedule.maximal_config();
    match what {
        AnalyzeKind::Cka => {
            let samples: Vec<&Sample> = eval_all.iter().take(ANALYSIS_SAMPLE_CAP).collect();
            let traces: Vec<ForwardTrace> = samples
                .iter()
                .map(|s| {
                    forward_sample(&ckpt.params, &ckpt.schedule, &config, s, true)
                        .map(|(_, trace)| trace)
                })
                .collect::<Result<_>>()?;
            let matrix = cka_matrix_mean(&traces)?;
            std::fs::write(ctx.path("cka.csv"), vlsched_core::analysis::cka_csv(&matrix))?;
            let n = matrix.values.rows();
            let mut min_off = f64::INFINITY;
            let mut sum_off = 0.0;
            let mut count = 0usize;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let v = matrix.values.get(i, j);
                        min_off = min_off.min(v);
                        sum_off += v;
                        count += 1;
                    }
                }
            }
            ctx.write_json(
                "cka_summary.json",
                &CkaSummary {
                    n_samples: traces.len(),
                    states: n,
                    min_off_diagonal: min_off,
                    mean_off_diagonal: sum_off / count.max(1) as f64,
                },
            )
        }
        AnalyzeKind::Shares => {
            let samples: Vec<&Sample> = eval_all.iter().take(ANALYSIS_SAMPLE_CAP).collect();
            let mut acc: Vec<AttentionShareRecord> = Vec::new();
            for s in &samples {
                let (_, trace) = forward_sample(&ckpt.params, &ckpt.schedule, &config, s, true)?;
                let span = (s.question_spans[0].0, s.question_spans.last().unwrap().1);
                let segments = Segments::from_text_spans(
                    s.visual_ids.len(),
                    span,
                    (s.answer_start, s.text_ids.len()),
                );
                let records = attention_shares(&trace, &segments)?;
                if acc.is_empty() {
                    acc = records;
                } else {
                    for (a, r) in acc.iter_mut().zip(records.iter()) {
                        a.query_to_image += r.query_to_image;
                        a.answer_to_image += r.answer_to_image;
                        a.answer_to_query += r.answer_to_query;
                    }
                }
            }
            let n = samples.len() as f64;
            for a in acc.iter_mut() {
                a.query_to_image /= n;
                a.answer_to_image /= n;
                a.answer_to_query /= n;
            }
            std::fs::write(ctx.path("shares.csv"), shares_csv(&acc))?;
            let layers = acc.len() as f64;
            ctx.write_json(
                "shares_summary.json",
                &SharesSummary {
                    n_samples: samples.len(),
                    mean_query_to_image: acc.iter().map(|r| r.query_to_image).sum::<f64>() / layers,
                    mean_answer_to_image: acc.iter().map(|r| r.answer_to_image).sum::<f64>()
                        / layers,
                    mean_answer_to_query: acc.iter().map(|r| r.answer_to_query).sum::<f64>()
                        / layers,
                },
            )
        }
        AnalyzeKind::Drop => {
            let records = layer_drop_sensitivity(
                &ckpt.params,
                &ckpt.schedule,
                &eval_all,
                8,
                ctx.cfg.seed_for(SeedStream::DropSubsets),
            )?;
            std::fs::write(ctx.path("drop.csv"), drop_csv(&records))?;
            ctx.write_json(
                "drop_summary.json",
                &DropSummary {
                    baseline_accuracy: records[0].accuracy,
                    min_accuracy: records.iter().map(|r| r.accuracy).fold(f64::INFINITY, f64::min),
                    n_subsets: records.len(),
                },
            )
        }
        AnalyzeKind::Flops => {
            let sample = eval_all.first().ok_or_else(|| {
                CoreError::InvalidArgument("no evaluation samples to size the report".into())
            })?;
            let n_t = sample.text_ids.len();
            let n_v = sample.visual_ids.len();
            let dims = ckpt.params.dims;
            let configs = viable_or_enumerated(&ckpt, ctx.cfg.screening.max_configs)?;
            let mut csv = String::from("config_id,active_sa,total_flops,savings\n");
            for c in &configs {
                let report = flops_report(&ckpt.schedule, c, n_t, n_v, dims.d, dims.d_ff)?;
                let active: Vec<String> = c.active_sa().iter().map(|i| i.to_string()).collect();
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    c.id(),
                    active.join(" "),
                    report.total,
                    report.savings
                ));
            }
            std::fs::write(ctx.path("flops.csv"), csv)?;
            let maximal = flops_report(&ckpt.schedule, &config, n_t, n_v, dims.d, dims.d_ff)?;
            std::fs::write(
                ctx.path("flops_per_layer.csv"),
                cost_csv(&ckpt.schedule, &config, &maximal),
            )?;
            let empty = flops_report(
                &ckpt.schedule,
                &Configuration::new(vec![], usize::MAX),
                n_t,
                n_v,
                dims.d,
                dims.d_ff,
            )?;
            ctx.write_json(
                "flops_summary.json",
                &FlopsSummary {
                    n_t,
                    n_v,
                    maximal_total: maximal.total,
                    maximal_savings: maximal.savings,
                    empty_total: empty.total,
                    empty_savings: empty.savings,
                },
            )
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PackSummary {
    input_tokens: usize,
    packed_tokens: usize,
    target_tokens: f64,
    count_ratio: f64,
    packed_channels: usize,
    reduction: f64,
    block: usize,
    projected: bool,
}

pub fn cmd_pack(
    ctx: &RunContext,
    input: Option<&Path>,
    use_average_projector: bool,
) -> Result<()> {
    let grid = match input {
        Some(path) => read_grid(path)?,
        None => {
            // Demo grid from the config seed, written next to the output so
            // the run is self-contained.
            let (h, w, c) =
                (ctx.cfg.data.grid_h, ctx.cfg.data.grid_w, ctx.cfg.model.d);
            let mut state = ctx.cfg.seed_for(SeedStream::PackDemo);
            let data: Vec<f64> = (0..h * w * c)
                .map(|_| {
                    state = state
                        .wrapping_mul(6364136223846793005)
                        .wrapping_add(1442695040888963407);
                    (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
                })
                .collect();
            let grid = TokenGrid::new(h, w, c, data, GridProvenance::PostConnector)?;
            write_grid(&ctx.path("input.grid.bin"), &grid)?;
            grid
        }
    };
    let reduction = ctx.cfg.packing.reduction;
    let block = ctx.cfg.packing.block;
    let projector =
        use_average_projector.then(|| averaging_projector(block, grid.channels));
    let packed = pack_tokens(&grid, reduction, block, projector.as_ref())?;
    // Persist the packed tokens as a 1-row-per-token grid dump.
    let packed_grid = TokenGrid::new(
        packed.rows(),
        1,
        packed.cols(),
        packed.data().to_vec(),
        GridProvenance::PostConnector,
    )?;
    write_grid(&ctx.path("packed.grid.bin"), &packed_grid)?;
    let target = grid.token_count() as f64 / reduction;
    ctx.write_json(
        "pack_summary.json",
        &PackSummary {
            input_tokens: grid.token_count(),
            packed_tokens: packed.rows(),
            target_tokens: target,
            count_ratio: packed.rows() as f64 / target,
            packed_channels: packed.cols(),
            reduction,
            block,
            projected: projector.is_some(),
        },
    )?;
    Ok(())
}

//! The schedule-compiled forward pass.
//!
//! One engine serves every consumer: plain inference, traced analysis runs,
//! training (the engine works on the gradient tape), the dense reference
//! baseline, routed execution (which stops at the router's read layer and
//! resumes with the chosen configuration), and vision-drop ablations. Layer
//! behavior is compiled into an execution plan first:
//!
//! - self-attention layers run a standard transformer layer over `[V; T]`
//!   (visual tokens first, causal mask over the concatenation) and are the
//!   only place visual tokens change;
//! - cross-attention layers insert a residual text-queries/visual-keys
//!   sub-block before the layer's text transformer block and never write V;
//! - text-only layers (including deactivated self-attention layers) run the
//!   text transformer block alone.
//!
//! Per-layer multiply-accumulate counts are recorded from the actual
//! operand shapes under the costing convention shared with
//! [`crate::analysis::flops_report`]: projections, attention score/value
//! matmuls, feed-forward matmuls, and the one-time positional convolution
//! count; softmax, normalization, activations, embedding lookups, and the
//! output head do not.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::numkernel::{AttentionMask, Matrix, Tape, Var};

use super::params::{ModelParams, POS_CONV_PADDING};
use super::schedule::{Configuration, LayerKind, LayerSchedule};

/// One training or evaluation item: visual cell token ids plus a text
/// sequence whose tail (from `answer_start`) is the supervised answer.
///
/// A visual token's embedding is the sum of its primary id's table row and
/// the rows of any extra id streams (a factored toy patch embedder: a cell
/// can embed as symbol + attribute components from the same shared table).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Sample {
    pub visual_ids: Vec<usize>,
    /// Extra visual id streams summed into the embedding; each stream is
    /// parallel to `visual_ids`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub visual_extra: Vec<Vec<usize>>,
    pub text_ids: Vec<usize>,
    /// Index of the first answer token within `text_ids`; everything before
    /// it is prompt and carries no loss.
    pub answer_start: usize,
    /// Half-open `[start, end)` question spans within the prompt.
    pub question_spans: Vec<(usize, usize)>,
}

impl Sample {
    pub fn prompt(&self) -> &[usize] {
        &self.text_ids[..self.answer_start]
    }

    pub fn answer(&self) -> &[usize] {
        &self.text_ids[self.answer_start..]
    }

    /// Rows of the logits matrix that predict answer tokens, paired with
    /// the token ids they should predict.
    pub fn answer_targets(&self) -> Vec<(usize, usize)> {
        (self.answer_start..self.text_ids.len()).map(|p| (p - 1, self.text_ids[p])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.answer_start == 0 || self.answer_start > self.text_ids.len() {
            return Err(CoreError::InvalidArgument(format!(
                "answer_start {} out of range for a {}-token text sequence",
                self.answer_start,
                self.text_ids.len()
            )));
        }
        if let Some(stream) = self.visual_extra.iter().find(|s| s.len() != self.visual_ids.len()) {
            return Err(CoreError::InvalidArgument(format!(
                "extra visual stream of length {} does not match {} visual tokens",
                stream.len(),
                self.visual_ids.len()
            )));
        }
        Ok(())
    }
}

/// Per-layer snapshot record of an executed forward pass.
#[derive(Debug, Clone)]
pub struct LayerTraceRecord {
    /// What actually ran (a deactivated self-attention layer records
    /// `TextOnly`).
    pub kind: LayerKind,
    /// Head-averaged text self-attention weights (text-only and
    /// cross-attention layers).
    pub text_attention: Option<Matrix>,
    /// Head-averaged attention over `[V; T]` (self-attention layers).
    pub concat_attention: Option<Matrix>,
    /// Head-averaged text-to-visual cross-attention weights.
    pub cross_attention: Option<Matrix>,
}

/// Layer-by-layer states and attention weights from one forward pass.
///
/// `v_states` and `t_states` hold `L + 1` entries each, including the
/// inputs; layers that do not update the visual tokens share the previous
/// entry's allocation, so object identity (`Arc::ptr_eq`) certifies reuse.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub n_v: usize,
    pub n_t: usize,
    pub v_states: Vec<Arc<Matrix>>,
    pub t_states: Vec<Arc<Matrix>>,
    pub layers: Vec<LayerTraceRecord>,
    /// Counted multiply-accumulates per layer.
    pub layer_macs: Vec<u128>,
    /// One-time positional convolution multiply-accumulates.
    pub conv_macs: u128,
}

impl ForwardTrace {
    pub fn total_macs(&self) -> u128 {
        self.conv_macs + self.layer_macs.iter().sum::<u128>()
    }
}

/// Visual input to a forward pass: already-embedded token rows, or a
/// sample whose visual id streams are looked up in the shared embedding
/// table and summed.
#[derive(Debug, Clone, Copy)]
pub enum VisualInput<'a> {
    PreEmbedded(&'a Matrix),
    FromSample(&'a Sample),
}

/// Resolves per-layer behavior for a (schedule, configuration) pair.
/// `drop_visual` layers behave as if the visual tokens were absent: their
/// attention sees no visual keys/values and V passes through unchanged.
pub(crate) fn execution_plan(
    schedule: &LayerSchedule,
    config: &Configuration,
    drop_visual: Option<&BTreeSet<usize>>,
) -> Result<Vec<LayerKind>> {
    if !config.is_subset_of_schedule(schedule) {
        return Err(CoreError::ConfigMismatch { config: config.active_sa().to_vec() });
    }
    let plan = (0..schedule.total_layers())
        .map(|l| {
            let dropped = drop_visual.is_some_and(|d| d.contains(&l));
            match schedule.kind(l) {
                LayerKind::SelfAttn if config.is_active(l) && !dropped => LayerKind::SelfAttn,
                LayerKind::SelfAttn => LayerKind::TextOnly,
                LayerKind::CrossAttn if !dropped => LayerKind::CrossAttn,
                LayerKind::CrossAttn => LayerKind::TextOnly,
                LayerKind::TextOnly => LayerKind::TextOnly,
            }
        })
        .collect();
    Ok(plan)
}

/// Stepping forward-pass engine over a gradient tape.
pub(crate) struct Engine<'a> {
    pub tape: &'a mut Tape,
    params: &'a ModelParams,
    schedule: &'a LayerSchedule,
    /// Leaf vars parallel to `params.tensors()`.
    pub bound: Vec<Var>,
    collect_trace: bool,
    n_v: usize,
    n_t: usize,
    state_v: Var,
    state_t: Var,
    next_layer: usize,
    v_states: Vec<Arc<Matrix>>,
    t_states: Vec<Arc<Matrix>>,
    records: Vec<LayerTraceRecord>,
    layer_macs: Vec<u128>,
    conv_macs: u128,
}

/// Registers every parameter tensor as a tape leaf, in tensor order.
pub(crate) fn bind_params(tape: &mut Tape, params: &ModelParams) -> Vec<Var> {
    params.tensors().iter().map(|t| tape.leaf(t.clone())).collect()
}

impl<'a> Engine<'a> {
    /// Binds parameters onto the tape and embeds the inputs; see
    /// [`Engine::with_bound`].
    pub fn new(
        tape: &'a mut Tape,
        params: &'a ModelParams,
        schedule: &'a LayerSchedule,
        visual: VisualInput<'_>,
        text_ids: &[usize],
        collect_trace: bool,
    ) -> Result<Self> {
        let bound = bind_params(tape, params);
        Self::with_bound(tape, params, schedule, visual, text_ids, collect_trace, bound)
    }

    /// Embeds the inputs against an existing set of parameter leaves
    /// (several forwards on one tape share leaves so their gradients
    /// accumulate). Visual tokens receive the conditional positional
    /// embedding exactly once, before layer 0.
    #[allow(clippy::too_many_arguments)]
    pub fn with_bound(
        tape: &'a mut Tape,
        params: &'a ModelParams,
        schedule: &'a LayerSchedule,
        visual: VisualInput<'_>,
        text_ids: &[usize],
        collect_trace: bool,
        bound: Vec<Var>,
    ) -> Result<Self> {
        params.supports_schedule(schedule)?;
        if text_ids.is_empty() {
            return Err(CoreError::InvalidArgument("text input must be non-empty".into()));
        }
        debug_assert_eq!(bound.len(), params.num_tensors());

        let d = params.dims.d;
        let v0 = match visual {
            VisualInput::PreEmbedded(m) => {
                if m.rows() > 0 && m.cols() != d {
                    return Err(CoreError::InvalidArgument(format!(
                        "visual tokens have width {}, model width is {d}",
                        m.cols()
                    )));
                }
                tape.leaf(if m.rows() == 0 { Matrix::zeros(0, d) } else { m.clone() })
            }
            VisualInput::FromSample(sample) => {
                let mut v = tape.gather(bound[params.embedding_slot()], &sample.visual_ids)?;
                for stream in &sample.visual_extra {
                    let extra = tape.gather(bound[params.embedding_slot()], stream)?;
                    v = tape.add(v, extra)?;
                }
                v
            }
        };
        let n_v = tape.value(v0).rows();

        // Conditional positional embedding: V + depthwise_conv(V).
        let conv = tape.depthwise_conv1d(v0, bound[params.pos_conv_slot()], POS_CONV_PADDING)?;
        let v_in = tape.add(v0, conv)?;
        let conv_macs = (n_v * d * params.pos_conv().cols()) as u128;

        let t_in = tape.gather(bound[params.embedding_slot()], text_ids)?;
        let n_t = text_ids.len();

        let mut v_states = Vec::new();
        let mut t_states = Vec::new();
        if collect_trace {
            v_states.push(Arc::new(tape.value(v_in).clone()));
            t_states.push(Arc::new(tape.value(t_in).clone()));
        }

        Ok(Engine {
            tape,
            params,
            schedule,
            bound,
            collect_trace,
            n_v,
            n_t,
            state_v: v_in,
            state_t: t_in,
            next_layer: 0,
            v_states,
            t_states,
            records: Vec::new(),
            layer_macs: Vec::new(),
            conv_macs,
        })
    }


    /// Current text-stream state (the input to layer `next_layer`).
    pub fn text_state(&self) -> &Matrix {
        self.tape.value(self.state_t)
    }

    /// Runs layers `next_layer..end` under `plan` (indexed by absolute
    /// layer).
    pub fn run_until(&mut self, end: usize, plan: &[LayerKind]) -> Result<()> {
        debug_assert_eq!(plan.len(), self.schedule.total_layers());
        while self.next_layer < end {
            let l = self.next_layer;
            self.run_layer(l, plan[l])?;
            self.next_layer += 1;
        }
        Ok(())
    }

    fn run_layer(&mut self, l: usize, kind: LayerKind) -> Result<()> {
        let mut macs = 0u128;
        let mut record = LayerTraceRecord {
            kind,
            text_attention: None,
            concat_attention: None,
            cross_attention: None,
        };
        match kind {
            LayerKind::TextOnly => {
                let (t, w) = self.text_block(l, self.state_t, self.n_t, &mut macs)?;
                self.state_t = t;
                record.text_attention = w;
            }
            LayerKind::CrossAttn => {
                let z = if self.n_v == 0 {
                    // Degenerate case: no visual keys, the sub-block reduces
                    // to the identity residual and costs nothing.
                    self.state_t
                } else {
                    let (z, w) = self.cross_sub_block(l, self.state_t, self.state_v, &mut macs)?;
                    record.cross_attention = w;
                    z
                };
                let (t, w) = self.text_block(l, z, self.n_t, &mut macs)?;
                self.state_t = t;
                record.text_attention = w;
            }
            LayerKind::SelfAttn => {
                let cat = self.tape.concat_rows(self.state_v, self.state_t)?;
                let n = self.n_v + self.n_t;
                let (out, w) = self.transformer_block(l, cat, &AttentionMask::causal(n), &mut macs)?;
                self.state_v = self.tape.slice_rows(out, 0, self.n_v);
                self.state_t = self.tape.slice_rows(out, self.n_v, self.n_t);
                record.concat_attention = w;
            }
        }
        if self.collect_trace {
            let v_arc = if kind == LayerKind::SelfAttn {
                Arc::new(self.tape.value(self.state_v).clone())
            } else {
                // Visual tokens untouched: share the previous snapshot.
                Arc::clone(self.v_states.last().expect("initialized"))
            };
            self.v_states.push(v_arc);
            self.t_states.push(Arc::new(self.tape.value(self.state_t).clone()));
            self.records.push(record);
        }
        self.layer_macs.push(macs);
        Ok(())
    }

    /// Text transformer block: pre-norm causal self-attention plus
    /// pre-norm feed-forward, both residual.
    fn text_block(
        &mut self,
        l: usize,
        t: Var,
        n_t: usize,
        macs: &mut u128,
    ) -> Result<(Var, Option<Matrix>)> {
        self.transformer_block(l, t, &AttentionMask::causal(n_t), macs)
    }

    fn transformer_block(
        &mut self,
        l: usize,
        x: Var,
        mask: &AttentionMask,
        macs: &mut u128,
    ) -> Result<(Var, Option<Matrix>)> {
        let slots = *self.params.layer_slots(l);
        let d = self.params.dims.d;
        let d_ff = self.params.dims.d_ff;
        let n = self.tape.value(x).rows();

        let normed = self.tape.rmsnorm(x, Some(self.bound[slots.norm1_gain]))?;
        let (attn, weights) = self.attention(
            normed,
            normed,
            self.bound[slots.attn_q],
            self.bound[slots.attn_k],
            self.bound[slots.attn_v],
            self.bound[slots.attn_o],
            mask,
            macs,
        )?;
        let h = self.tape.add(x, attn)?;

        let normed2 = self.tape.rmsnorm(h, Some(self.bound[slots.norm2_gain]))?;
        let pre = self.tape.matmul(normed2, self.bound[slots.ffn_w1])?;
        let act = self.tape.silu(pre);
        let ffn = self.tape.matmul(act, self.bound[slots.ffn_w2])?;
        *macs += 2 * (n * d * d_ff) as u128;
        let out = self.tape.add(h, ffn)?;
        Ok((out, weights))
    }

    /// Residual cross-attention sub-block; visual tokens are read through
    /// ungained norms and never written.
    fn cross_sub_block(
        &mut self,
        l: usize,
        t: Var,
        v: Var,
        macs: &mut u128,
    ) -> Result<(Var, Option<Matrix>)> {
        let slots = *self.params.layer_slots(l);
        let cross = slots.cross.ok_or_else(|| {
            CoreError::InvalidArgument(format!("layer {l} has no cross-attention projections"))
        })?;
        let tn = self.tape.rmsnorm(t, None)?;
        let vn = self.tape.rmsnorm(v, None)?;
        let mask = AttentionMask::all_allowed(self.n_t, self.n_v);
        let (out, weights) = self.attention(
            tn,
            vn,
            self.bound[cross.q],
            self.bound[cross.k],
            self.bound[cross.v],
            self.bound[cross.o],
            &mask,
            macs,
        )?;
        let z = self.tape.add(t, out)?;
        Ok((z, weights))
    }

    /// Multi-head attention with separate query and key/value sources.
    /// Returns the output-projected result and, when tracing, the
    /// head-averaged weights.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        q_src: Var,
        kv_src: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
        mask: &AttentionMask,
        macs: &mut u128,
    ) -> Result<(Var, Option<Matrix>)> {
        let d = self.params.dims.d;
        let heads = self.params.dims.heads;
        let dh = self.params.dims.head_dim();
        let n_q = self.tape.value(q_src).rows();
        let n_k = self.tape.value(kv_src).rows();

        let q = self.tape.matmul(q_src, wq)?;
        let k = self.tape.matmul(kv_src, wk)?;
        let v = self.tape.matmul(kv_src, wv)?;
        *macs += ((n_q + 2 * n_k) * d * d) as u128;

        let mut head_outs = Vec::with_capacity(heads);
        let mut avg_weights: Option<Matrix> = None;
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh);
            let kh = self.tape.slice_cols(k, h * dh, dh);
            let vh = self.tape.slice_cols(v, h * dh, dh);
            let kt = self.tape.transpose(kh);
            let scores = self.tape.matmul(qh, kt)?;
            let scaled = self.tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let w = self.tape.masked_softmax_rows(scaled, mask.clone())?;
            let oh = self.tape.matmul(w, vh)?;
            *macs += 2 * (n_q * n_k * dh) as u128;
            if self.collect_trace {
                let wm = self.tape.value(w).scale(1.0 / heads as f64);
                avg_weights = Some(match avg_weights.take() {
                    Some(acc) => acc.add(&wm)?,
                    None => wm,
                });
            }
            head_outs.push(oh);
        }
        let cat = self.tape.concat_cols(&head_outs)?;
        let out = self.tape.matmul(cat, wo)?;
        *macs += (n_q * d * d) as u128;
        Ok((out, avg_weights))
    }

    /// Final norm plus output head over the text stream. Head cost is
    /// outside the costing convention and is not metered.
    pub fn logits(&mut self) -> Result<Var> {
        let normed =
            self.tape.rmsnorm(self.state_t, Some(self.bound[self.params.final_norm_gain_slot()]))?;
        self.tape.matmul(normed, self.bound[self.params.head_slot()])
    }

    pub fn into_trace(self) -> ForwardTrace {
        ForwardTrace {
            n_v: self.n_v,
            n_t: self.n_t,
            v_states: self.v_states,
            t_states: self.t_states,
            layers: self.records,
            layer_macs: self.layer_macs,
            conv_macs: self.conv_macs,
        }
    }

    pub fn trace_macs_only(self) -> ForwardTrace {
        ForwardTrace {
            n_v: self.n_v,
            n_t: self.n_t,
            v_states: Vec::new(),
            t_states: Vec::new(),
            layers: Vec::new(),
            layer_macs: self.layer_macs,
            conv_macs: self.conv_macs,
        }
    }
}

/// Full scheduled forward pass with trace collection. Deactivated
/// self-attention layers run as text-only; the text stream is causal
/// throughout. Returns next-token logits for the text positions and the
/// per-layer trace.
pub fn forward(
    params: &ModelParams,
    schedule: &LayerSchedule,
    config: &Configuration,
    v0: &Matrix,
    text_ids: &[usize],
) -> Result<(Matrix, ForwardTrace)> {
    let plan = execution_plan(schedule, config, None)?;
    let mut tape = Tape::new();
    let mut engine =
        Engine::new(&mut tape, params, schedule, VisualInput::PreEmbedded(v0), text_ids, true)?;
    engine.run_until(schedule.total_layers(), &plan)?;
    let logits = engine.logits()?;
    let trace = engine.into_trace();
    Ok((tape.value(logits).clone(), trace))
}

/// Reference dense baseline: every layer processes the concatenated
/// `[V; T]` sequence with the layer's transformer block (no cross-attention
/// sub-blocks anywhere). The equivalence and savings denominators are
/// measured against this.
pub fn dense_forward(params: &ModelParams, v0: &Matrix, text_ids: &[usize]) -> Result<Matrix> {
    let schedule = super::schedule::build_schedule(
        params.dims.layers,
        &[],
        &(0..params.dims.layers).collect::<Vec<_>>(),
    )?;
    let plan = vec![LayerKind::SelfAttn; params.dims.layers];
    let mut tape = Tape::new();
    let mut engine =
        Engine::new(&mut tape, params, &schedule, VisualInput::PreEmbedded(v0), text_ids, false)?;
    engine.run_until(plan.len(), &plan)?;
    let logits = engine.logits()?;
    Ok(tape.value(logits).clone())
}

/// Forward over a sample's token ids (visual cells embedded through the
/// shared table). Set `collect_trace` only when the per-layer snapshots are
/// needed; the MAC meter is always filled.
pub fn forward_sample(
    params: &ModelParams,
    schedule: &LayerSchedule,
    config: &Configuration,
    sample: &Sample,
    collect_trace: bool,
) -> Result<(Matrix, ForwardTrace)> {
    forward_sample_dropped(params, schedule, config, sample, None, collect_trace)
}

/// Like [`forward_sample`] but with visual tokens removed from the
/// attention of the given layers (the vision-drop ablation).
pub fn forward_sample_dropped(
    params: &ModelParams,
    schedule: &LayerSchedule,
    config: &Configuration,
    sample: &Sample,
    drop_visual: Option<&BTreeSet<usize>>,
    collect_trace: bool,
) -> Result<(Matrix, ForwardTrace)> {
    sample.validate()?;
    let plan = execution_plan(schedule, config, drop_visual)?;
    let mut tape = Tape::new();
    let mut engine = Engine::new(
        &mut tape,
        params,
        schedule,
        VisualInput::FromSample(sample),
        &sample.text_ids,
        collect_trace,
    )?;
    engine.run_until(schedule.total_layers(), &plan)?;
    let logits = engine.logits()?;
    let trace = if collect_trace { engine.into_trace() } else { engine.trace_macs_only() };
    Ok((tape.value(logits).clone(), trace))
}

/// Deterministic argmax: ties resolve to the lowest token id.
pub fn argmax_token(row: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &x) in row.iter().enumerate() {
        if x > best_val {
            best = i;
            best_val = x;
        }
    }
    best
}

/// Greedy decode of `n_tokens` continuations of the sample's prompt. No
/// key/value caching: each step reruns the forward pass on the extended
/// sequence.
pub fn greedy_decode(
    params: &ModelParams,
    schedule: &LayerSchedule,
    config: &Configuration,
    sample: &Sample,
    n_tokens: usize,
) -> Result<Vec<usize>> {
    let plan = execution_plan(schedule, config, None)?;
    let mut scratch = sample.clone();
    scratch.text_ids = sample.prompt().to_vec();
    let mut out = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let mut tape = Tape::new();
        let mut engine = Engine::new(
            &mut tape,
            params,
            schedule,
            VisualInput::FromSample(&scratch),
            &scratch.text_ids,
            false,
        )?;
        engine.run_until(schedule.total_layers(), &plan)?;
        let logits = engine.logits()?;
        let lv = tape.value(logits);
        let next = argmax_token(lv.row(lv.rows() - 1));
        scratch.text_ids.push(next);
        out.push(next);
    }
    Ok(out)
}

/// Builds one sample's answer cross-entropy on a caller-owned tape against
/// caller-owned parameter leaves (`vars`, in tensor order). This is the
/// loss surface `gradient_check` differentiates: the forward pass reads
/// parameter values from the tape leaves, so perturbing them perturbs the
/// loss.
pub fn taped_sample_loss(
    tape: &mut Tape,
    params: &ModelParams,
    schedule: &LayerSchedule,
    config: &Configuration,
    sample: &Sample,
    vars: &[Var],
) -> Result<Var> {
    sample.validate()?;
    let plan = execution_plan(schedule, config, None)?;
    let mut engine = Engine::with_bound(
        tape,
        params,
        schedule,
        VisualInput::FromSample(sample),
        &sample.text_ids,
        false,
        vars.to_vec(),
    )?;
    engine.run_until(schedule.total_layers(), &plan)?;
    let logits = engine.logits()?;
    tape.cross_entropy(logits, &sample.answer_targets())
}

/// Pure form of the conditional positional embedding: `V + conv(V)` with
/// the model's depthwise kernels. Applied exactly once to the initial
/// visual tokens.
pub fn conditional_pos_embed(v: &Matrix, kernels: &Matrix) -> Result<Matrix> {
    let conv = crate::numkernel::depthwise_conv1d(v, kernels, POS_CONV_PADDING)?;
    v.add(&conv)
}

/// Borrowed cross-attention projections of one layer.
#[derive(Debug, Clone, Copy)]
pub struct CrossProjections<'a> {
    pub q: &'a Matrix,
    pub k: &'a Matrix,
    pub v: &'a Matrix,
    pub o: &'a Matrix,
}

impl ModelParams {
    pub fn cross_projections(&self, layer: usize) -> Option<CrossProjections<'_>> {
        let slots = self.layer_slots(layer).cross?;
        Some(CrossProjections {
            q: self.tensor(slots.q),
            k: self.tensor(slots.k),
            v: self.tensor(slots.v),
            o: self.tensor(slots.o),
        })
    }
}

/// Pure cross-attention block: `Z = T + OutProj(MHA(Q(norm T), K(norm V),
/// V(norm V)))` with no mask over the visual keys. V is read, never
/// written. Multi-head with `heads` heads.
pub fn cross_attention_block(
    t: &Matrix,
    v: &Matrix,
    proj: &CrossProjections<'_>,
    heads: usize,
) -> Result<Matrix> {
    if v.rows() == 0 {
        return Ok(t.clone());
    }
    if t.cols() != v.cols() {
        return Err(CoreError::ShapeMismatch {
            op: "cross_attention_block",
            left_rows: t.rows(),
            left_cols: t.cols(),
            right_rows: v.rows(),
            right_cols: v.cols(),
        });
    }
    let d = t.cols();
    if heads == 0 || d % heads != 0 {
        return Err(CoreError::InvalidArgument(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let ones = vec![1.0; d];
    let tn = crate::numkernel::rmsnorm(t, &ones)?;
    let vn = crate::numkernel::rmsnorm(v, &ones)?;
    let q = crate::numkernel::matmul(&tn, proj.q)?;
    let k = crate::numkernel::matmul(&vn, proj.k)?;
    let val = crate::numkernel::matmul(&vn, proj.v)?;
    let mask = AttentionMask::all_allowed(t.rows(), v.rows());
    let mut heads_out: Option<Matrix> = None;
    for h in 0..heads {
        let (out, _) = crate::numkernel::scaled_dot_attention(
            &q.slice_cols(h * dh, dh),
            &k.slice_cols(h * dh, dh),
            &val.slice_cols(h * dh, dh),
            &mask,
        )?;
        heads_out = Some(match heads_out.take() {
            Some(acc) => {
                let mut cat = Vec::with_capacity(acc.rows() * (acc.cols() + dh));
                for r in 0..acc.rows() {
                    cat.extend_from_slice(acc.row(r));
                    cat.extend_from_slice(out.row(r));
                }
                Matrix::from_vec(acc.rows(), acc.cols() + dh, cat)?
            }
            None => out,
        });
    }
    let cat = heads_out.expect("at least one head");
    let projected = crate::numkernel::matmul(&cat, proj.o)?;
    t.add(&projected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ModelDims;
    use crate::model::schedule::build_schedule;

    fn tiny_params(l: usize, ca: &[usize], sa: &[usize], seed: u64) -> (ModelParams, LayerSchedule) {
        let dims = ModelDims { vocab: 12, d: 8, d_ff: 16, heads: 2, layers: l };
        let schedule = build_schedule(l, ca, sa).unwrap();
        let params = ModelParams::init(dims, &schedule, seed).unwrap();
        (params, schedule)
    }

    #[test]
    fn text_only_schedule_ignores_visual_tokens() {
        let (params, schedule) = tiny_params(3, &[], &[], 5);
        let config = Configuration::new(vec![], 0);
        let text = [1usize, 2, 3, 4];
        let v_a = Matrix::zeros(0, 8);
        let mut v_b = Matrix::zeros(4, 8);
        for x in v_b.data_mut() {
            *x = 0.37;
        }
        let (la, _) = forward(&params, &schedule, &config, &v_a, &text).unwrap();
        let (lb, _) = forward(&params, &schedule, &config, &v_b, &text).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn ca_only_trace_keeps_visual_state_identical() {
        let (params, schedule) = tiny_params(4, &[1, 3], &[], 9);
        let config = Configuration::new(vec![], 0);
        let sample = Sample {
            visual_ids: vec![3, 4, 5, 6, 7],
            visual_extra: vec![],
            text_ids: vec![1, 2, 8],
            answer_start: 2,
            question_spans: vec![(0, 2)],
        };
        let (_, trace) = forward_sample(&params, &schedule, &config, &sample, true).unwrap();
        assert_eq!(trace.v_states.len(), 5);
        for l in 1..trace.v_states.len() {
            assert!(Arc::ptr_eq(&trace.v_states[0], &trace.v_states[l]));
        }
    }

    #[test]
    fn all_sa_forward_matches_dense_forward() {
        let l = 3;
        let (params, schedule) = tiny_params(l, &[], &[0, 1, 2], 11);
        let config = schedule.maximal_config();
        let v0 = Matrix::from_vec(4, 8, (0..32).map(|i| (i as f64 / 16.0) - 1.0).collect()).unwrap();
        let text = [1usize, 2, 3];
        let (logits, _) = forward(&params, &schedule, &config, &v0, &text).unwrap();
        let dense = dense_forward(&params, &v0, &text).unwrap();
        assert!(logits.max_abs_diff(&dense) <= 1e-10);
    }

    #[test]
    fn zero_init_cross_attention_is_transparent() {
        // With zero CA output projections and deactivated SA layers, the
        // text stream computes exactly the text-only stack's logits.
        let (params, schedule) = tiny_params(4, &[1], &[2], 13);
        let text_only = build_schedule(4, &[], &[]).unwrap();
        let config_off = Configuration::new(vec![], 0);
        let v0 = Matrix::from_vec(3, 8, (0..24).map(|i| (i as f64 / 12.0) - 1.0).collect()).unwrap();
        let text = [2usize, 4, 6];
        let (with_branches, _) = forward(&params, &schedule, &config_off, &v0, &text).unwrap();
        let (plain, _) = forward(&params, &text_only, &config_off, &v0, &text).unwrap();
        assert_eq!(with_branches, plain);
    }

    #[test]
    fn config_outside_schedule_is_rejected() {
        let (params, schedule) = tiny_params(3, &[], &[1], 1);
        let config = Configuration::new(vec![2], 0);
        let v0 = Matrix::zeros(0, 8);
        let err = forward(&params, &schedule, &config, &v0, &[1, 2]).unwrap_err();
        assert!(matches!(err, CoreError::ConfigMismatch { .. }));
    }

    #[test]
    fn one_layer_passthrough_logits_are_head_of_normed_embeddings() {
        let (mut params, schedule) = tiny_params(1, &[], &[], 3);
        // Zero attention and feed-forward weights: the block is the identity.
        for name in ["layer0.attn_q", "layer0.attn_k", "layer0.attn_v", "layer0.attn_o",
                     "layer0.ffn_w1", "layer0.ffn_w2"] {
            let idx = params.index_of(name).unwrap();
            let t = params.tensor_mut(idx);
            for x in t.data_mut() {
                *x = 0.0;
            }
        }
        let config = Configuration::new(vec![], 0);
        let text = [5usize, 7];
        let (logits, _) =
            forward(&params, &schedule, &config, &Matrix::zeros(0, 8), &text).unwrap();

        let emb = Matrix::from_rows(&[params.embedding().row(5), params.embedding().row(7)]);
        let ones = vec![1.0; 8];
        let normed = crate::numkernel::rmsnorm(&emb, &ones).unwrap();
        let head = params.tensor(params.head_slot());
        let want = crate::numkernel::matmul(&normed, head).unwrap();
        assert!(logits.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn visual_permutation_changes_logits() {
        let (params, schedule) = tiny_params(2, &[], &[0, 1], 17);
        let config = schedule.maximal_config();
        let mut v0 = Matrix::zeros(3, 8);
        for (i, x) in v0.data_mut().iter_mut().enumerate() {
            *x = ((i * 31 % 17) as f64 - 8.0) / 8.0;
        }
        let mut v_swapped = v0.clone();
        for c in 0..8 {
            let a = v_swapped.get(0, c);
            let b = v_swapped.get(1, c);
            v_swapped.set(0, c, b);
            v_swapped.set(1, c, a);
        }
        let text = [1usize, 2];
        let (la, _) = forward(&params, &schedule, &config, &v0, &text).unwrap();
        let (lb, _) = forward(&params, &schedule, &config, &v_swapped, &text).unwrap();
        assert!(la.max_abs_diff(&lb) > 1e-9);
    }

    #[test]
    fn cross_attention_block_zero_output_projection_is_identity() {
        let (params, _schedule) = tiny_params(2, &[0], &[], 23);
        let proj = params.cross_projections(0).unwrap();
        let t = Matrix::from_vec(3, 8, (0..24).map(|i| i as f64 / 24.0).collect()).unwrap();
        let v = Matrix::from_vec(5, 8, (0..40).map(|i| (i as f64 / 40.0) - 0.5).collect()).unwrap();
        let z = cross_attention_block(&t, &v, &proj, 2).unwrap();
        assert_eq!(z, t);
    }

    #[test]
    fn cross_attention_block_zero_visual_tokens_is_identity() {
        let (mut params, _schedule) = tiny_params(2, &[0], &[], 29);
        // Give the output projection real values; the all-zero V rows force
        // zero attention output anyway (no biases anywhere).
        let o_idx = params.index_of("layer0.ca_o").unwrap();
        for (i, x) in params.tensor_mut(o_idx).data_mut().iter_mut().enumerate() {
            *x = (i % 5) as f64 * 0.1 - 0.2;
        }
        let proj = params.cross_projections(0).unwrap();
        let t = Matrix::from_vec(2, 8, (0..16).map(|i| i as f64 / 8.0).collect()).unwrap();
        let v = Matrix::zeros(4, 8);
        let z = cross_attention_block(&t, &v, &proj, 2).unwrap();
        assert!(z.max_abs_diff(&t) <= 1e-12);
    }

    #[test]
    fn cross_attention_block_matches_kernel_composition() {
        // Single-head projections composed by hand out of the numeric
        // kernels, against the block.
        let (mut params, _schedule) = tiny_params(2, &[0], &[], 37);
        let o_idx = params.index_of("layer0.ca_o").unwrap();
        for (i, x) in params.tensor_mut(o_idx).data_mut().iter_mut().enumerate() {
            *x = ((i * 29 % 13) as f64 - 6.0) / 20.0;
        }
        let proj = params.cross_projections(0).unwrap();
        let t = Matrix::from_vec(3, 8, (0..24).map(|i| (i as f64 / 11.0).sin()).collect()).unwrap();
        let v = Matrix::from_vec(5, 8, (0..40).map(|i| (i as f64 / 7.0).cos()).collect()).unwrap();
        let got = cross_attention_block(&t, &v, &proj, 1).unwrap();

        let ones = vec![1.0; 8];
        let tn = crate::numkernel::rmsnorm(&t, &ones).unwrap();
        let vn = crate::numkernel::rmsnorm(&v, &ones).unwrap();
        let q = crate::numkernel::matmul(&tn, proj.q).unwrap();
        let k = crate::numkernel::matmul(&vn, proj.k).unwrap();
        let val = crate::numkernel::matmul(&vn, proj.v).unwrap();
        let (attn, _) = crate::numkernel::scaled_dot_attention(
            &q,
            &k,
            &val,
            &AttentionMask::all_allowed(3, 5),
        )
        .unwrap();
        let out = crate::numkernel::matmul(&attn, proj.o).unwrap();
        let want = t.add(&out).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn conditional_pos_embed_identities() {
        let v = Matrix::from_vec(6, 4, (0..24).map(|i| i as f64 * 0.1).collect()).unwrap();
        let zero_kernels = Matrix::zeros(4, 7);
        assert_eq!(conditional_pos_embed(&v, &zero_kernels).unwrap(), v);

        // Single token, center-only kernel of weight w: V * (1 + w).
        let single = Matrix::from_vec(1, 4, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let mut kernels = Matrix::zeros(4, 7);
        for c in 0..4 {
            kernels.set(c, 3, 0.5);
        }
        let out = conditional_pos_embed(&single, &kernels).unwrap();
        for c in 0..4 {
            assert!((out.get(0, c) - single.get(0, c) * 1.5).abs() <= 1e-15);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (params, schedule) = tiny_params(3, &[1], &[2], 31);
        let config = schedule.maximal_config();
        let sample = Sample {
            visual_ids: vec![1, 2, 3, 4],
            visual_extra: vec![],
            text_ids: vec![5, 6, 7],
            answer_start: 2,
            question_spans: vec![(0, 2)],
        };
        let (a, _) = forward_sample(&params, &schedule, &config, &sample, false).unwrap();
        let (b, _) = forward_sample(&params, &schedule, &config, &sample, false).unwrap();
        assert_eq!(a, b);
    }
}

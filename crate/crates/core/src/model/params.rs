use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numkernel::Matrix;

use super::schedule::LayerSchedule;

/// Kernel size of the conditional positional embedding's depthwise
/// convolution, with its matching padding.
pub const POS_CONV_KERNEL: usize = 7;
pub const POS_CONV_PADDING: usize = 3;

/// Model width configuration. `d_ff` defaults to `4 * d` when built through
/// [`ModelDims::new`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
}

impl ModelDims {
    pub fn new(vocab: usize, d: usize, heads: usize, layers: usize) -> Self {
        ModelDims { vocab, d, d_ff: 4 * d, heads, layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.vocab == 0 || self.layers == 0 || self.d_ff == 0 {
            return Err(CoreError::InvalidArgument("model dimensions must be positive".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "head count {} must divide model width {}",
                self.heads, self.d
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Tensor indices of one layer's text transformer block, plus the
/// cross-attention projections when the layer carries them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlots {
    pub norm1_gain: usize,
    pub attn_q: usize,
    pub attn_k: usize,
    pub attn_v: usize,
    pub attn_o: usize,
    pub norm2_gain: usize,
    pub ffn_w1: usize,
    pub ffn_w2: usize,
    pub cross: Option<CrossSlots>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossSlots {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
}

/// The 2-layer MLP policy head that predicts a configuration from the
/// routing token's hidden state. Stored beside the backbone tensors and
/// trained separately with the backbone frozen. This is the one place in
/// the model with bias terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterHead {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    /// Forward layer index at whose input the routing token state is read
    /// (the block before the first self-attention layer that viable
    /// configurations disagree on).
    pub read_layer: usize,
    pub trained: bool,
}

/// All learned tensors, stored flat with a named layout so that the
/// optimizer, the gradient tape, and the checkpoint format all address
/// parameters the same way.
///
/// No linear projection carries a bias. Cross-attention output projections
/// start at exactly zero, so a freshly built schedule's text stream computes
/// the same logits as a text-only stack until training moves them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    names: Vec<String>,
    tensors: Vec<Matrix>,
    embedding: usize,
    pos_conv: usize,
    final_norm_gain: usize,
    head: usize,
    layers: Vec<LayerSlots>,
    ca_layers: Vec<usize>,
    pub router_head: Option<RouterHead>,
}

impl ModelParams {
    /// Initializes parameters for a schedule. Gains start at one,
    /// cross-attention output projections at zero, everything else at
    /// N(0, 0.02) drawn in layout order from a seeded stream.
    pub fn init(dims: ModelDims, schedule: &LayerSchedule, seed: u64) -> Result<Self> {
        dims.validate()?;
        if schedule.total_layers() != dims.layers {
            return Err(CoreError::InvalidArgument(format!(
                "schedule has {} layers but dims declare {}",
                schedule.total_layers(),
                dims.layers
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mut names = Vec::new();
        let mut tensors = Vec::new();

        let push_random = |names: &mut Vec<String>,
                               tensors: &mut Vec<Matrix>,
                               name: String,
                               rows: usize,
                               cols: usize,
                               rng: &mut ChaCha8Rng| {
            let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            names.push(name);
            tensors.push(Matrix::from_vec(rows, cols, data).expect("sized"));
            tensors.len() - 1
        };
        let push_const = |names: &mut Vec<String>,
                          tensors: &mut Vec<Matrix>,
                          name: String,
                          rows: usize,
                          cols: usize,
                          value: f64| {
            names.push(name);
            tensors.push(Matrix::from_vec(rows, cols, vec![value; rows * cols]).expect("sized"));
            tensors.len() - 1
        };

        let embedding =
            push_random(&mut names, &mut tensors, "embedding".into(), dims.vocab, dims.d, &mut rng);
        let pos_conv = push_random(
            &mut names,
            &mut tensors,
            "pos_conv_kernels".into(),
            dims.d,
            POS_CONV_KERNEL,
            &mut rng,
        );

        let mut layers = Vec::with_capacity(dims.layers);
        for l in 0..dims.layers {
            let norm1_gain =
                push_const(&mut names, &mut tensors, format!("layer{l}.norm1_gain"), 1, dims.d, 1.0);
            let attn_q = push_random(
                &mut names,
                &mut tensors,
                format!("layer{l}.attn_q"),
                dims.d,
                dims.d,
                &mut rng,
            );
            let attn_k = push_random(
                &mut names,
                &mut tensors,
                format!("layer{l}.attn_k"),
                dims.d,
                dims.d,
                &mut rng,
            );
            let attn_v = push_random(
                &mut names,
                &mut tensors,
                format!("layer{l}.attn_v"),
                dims.d,
                dims.d,
                &mut rng,
            );
            let attn_o = push_random(
                &mut names,
                &mut tensors,
                format!("layer{l}.attn_o"),
                dims.d,
                dims.d,
                &mut rng,
            );
            let norm2_gain =
                push_const(&mut names, &mut tensors, format!("layer{l}.norm2_gain"), 1, dims.d, 1.0);
            let ffn_w1 = push_random(
                &mut names,
                &mut tensors,
                format!("layer{l}.ffn_w1"),
                dims.d,
                dims.d_ff,
                &mut rng,
            );
            let ffn_w2 = push_random(
                &mut names,
                &mut tensors,
                format!("layer{l}.ffn_w2"),
                dims.d_ff,
                dims.d,
                &mut rng,
            );
            let cross = if schedule.ca_indices().binary_search(&l).is_ok() {
                let q = push_random(
                    &mut names,
                    &mut tensors,
                    format!("layer{l}.ca_q"),
                    dims.d,
                    dims.d,
                    &mut rng,
                );
                let k = push_random(
                    &mut names,
                    &mut tensors,
                    format!("layer{l}.ca_k"),
                    dims.d,
                    dims.d,
                    &mut rng,
                );
                let v = push_random(
                    &mut names,
                    &mut tensors,
                    format!("layer{l}.ca_v"),
                    dims.d,
                    dims.d,
                    &mut rng,
                );
                // Zero output projection: a fresh cross-attention layer is a
                // no-op on the text stream.
                let o =
                    push_const(&mut names, &mut tensors, format!("layer{l}.ca_o"), dims.d, dims.d, 0.0);
                Some(CrossSlots { q, k, v, o })
            } else {
                None
            };
            layers.push(LayerSlots {
                norm1_gain,
                attn_q,
                attn_k,
                attn_v,
                attn_o,
                norm2_gain,
                ffn_w1,
                ffn_w2,
                cross,
            });
        }

        let final_norm_gain =
            push_const(&mut names, &mut tensors, "final_norm_gain".into(), 1, dims.d, 1.0);
        let head =
            push_random(&mut names, &mut tensors, "head".into(), dims.d, dims.vocab, &mut rng);

        Ok(ModelParams {
            dims,
            names,
            tensors,
            embedding,
            pos_conv,
            final_norm_gain,
            head,
            layers,
            ca_layers: schedule.ca_indices().to_vec(),
            router_head: None,
        })
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensor(&self, idx: usize) -> &Matrix {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Matrix {
        &mut self.tensors[idx]
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name_of(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn embedding(&self) -> &Matrix {
        &self.tensors[self.embedding]
    }

    pub fn embedding_slot(&self) -> usize {
        self.embedding
    }

    pub fn pos_conv_slot(&self) -> usize {
        self.pos_conv
    }

    pub fn pos_conv(&self) -> &Matrix {
        &self.tensors[self.pos_conv]
    }

    pub fn final_norm_gain_slot(&self) -> usize {
        self.final_norm_gain
    }

    pub fn head_slot(&self) -> usize {
        self.head
    }

    pub fn layer_slots(&self, layer: usize) -> &LayerSlots {
        &self.layers[layer]
    }

    /// CA layer indices this parameter set carries projections for.
    pub fn ca_layers(&self) -> &[usize] {
        &self.ca_layers
    }

    /// A schedule is runnable when its layer count matches and every one of
    /// its CA layers has projections here. Extra CA projections are fine:
    /// they let the same weights serve reduced schedules.
    pub fn supports_schedule(&self, schedule: &LayerSchedule) -> Result<()> {
        if schedule.total_layers() != self.dims.layers {
            return Err(CoreError::InvalidArgument(format!(
                "schedule has {} layers, parameters have {}",
                schedule.total_layers(),
                self.dims.layers
            )));
        }
        for &l in schedule.ca_indices() {
            if self.layers[l].cross.is_none() {
                return Err(CoreError::InvalidArgument(format!(
                    "schedule marks layer {l} as cross-attention but the parameters carry no projections for it"
                )));
            }
        }
        Ok(())
    }

    /// Total scalar parameter count (excluding the router head).
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.rows() * t.cols()).sum()
    }
}

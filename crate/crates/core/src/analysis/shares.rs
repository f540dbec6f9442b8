//! Attention-share decomposition: how much attention mass flows from the
//! query and answer tokens to the image across layers.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{ForwardTrace, LayerKind};

/// Token segments in global coordinates: visual tokens occupy
/// `[0, n_v)`, text tokens follow at `n_v + i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segments {
    pub image: (usize, usize),
    pub query: (usize, usize),
    pub answer: (usize, usize),
}

impl Segments {
    /// Builds global segments from text-local query/answer spans.
    pub fn from_text_spans(
        n_v: usize,
        query_span: (usize, usize),
        answer_span: (usize, usize),
    ) -> Self {
        Segments {
            image: (0, n_v),
            query: (n_v + query_span.0, n_v + query_span.1),
            answer: (n_v + answer_span.0, n_v + answer_span.1),
        }
    }

    fn validate(&self, n_total: usize) -> Result<()> {
        let spans = [self.image, self.query, self.answer];
        for (s, e) in spans {
            if s > e || e > n_total {
                return Err(CoreError::InvalidArgument(format!(
                    "segment [{s}, {e}) out of range for {n_total} tokens"
                )));
            }
        }
        let disjoint = |a: (usize, usize), b: (usize, usize)| a.1 <= b.0 || b.1 <= a.0;
        if !disjoint(self.image, self.query)
            || !disjoint(self.image, self.answer)
            || !disjoint(self.query, self.answer)
        {
            return Err(CoreError::InvalidArgument("segments overlap".into()));
        }
        Ok(())
    }

    fn contains(span: (usize, usize), idx: usize) -> bool {
        idx >= span.0 && idx < span.1
    }
}

/// Per-layer attention mass fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionShareRecord {
    pub layer: usize,
    pub query_to_image: f64,
    pub answer_to_image: f64,
    pub answer_to_query: f64,
}

/// One attention map with its row/column index offsets into the global
/// token space.
struct MapView<'a> {
    weights: &'a crate::numkernel::Matrix,
    row_offset: usize,
    col_offset: usize,
}

/// Computes the per-layer share records from a collected trace.
///
/// For each source row, the row's attention distributions are averaged
/// across the maps it appears in (a cross-attention layer gives text rows
/// both a cross map and a text self-attention map), so every source row
/// contributes exactly one unit of mass per layer. Weights in the trace are
/// already head-averaged.
pub fn attention_shares(
    trace: &ForwardTrace,
    segments: &Segments,
) -> Result<Vec<AttentionShareRecord>> {
    if trace.layers.is_empty() {
        return Err(CoreError::InvalidArgument(
            "trace carries no attention records (was it collected?)".into(),
        ));
    }
    let n_total = trace.n_v + trace.n_t;
    segments.validate(n_total)?;

    let mut records = Vec::with_capacity(trace.layers.len());
    for (l, layer) in trace.layers.iter().enumerate() {
        let mut maps: Vec<MapView> = Vec::new();
        match layer.kind {
            LayerKind::SelfAttn => {
                if let Some(w) = &layer.concat_attention {
                    maps.push(MapView { weights: w, row_offset: 0, col_offset: 0 });
                }
            }
            LayerKind::CrossAttn => {
                if let Some(w) = &layer.cross_attention {
                    maps.push(MapView { weights: w, row_offset: trace.n_v, col_offset: 0 });
                }
                if let Some(w) = &layer.text_attention {
                    maps.push(MapView {
                        weights: w,
                        row_offset: trace.n_v,
                        col_offset: trace.n_v,
                    });
                }
            }
            LayerKind::TextOnly => {
                if let Some(w) = &layer.text_attention {
                    maps.push(MapView {
                        weights: w,
                        row_offset: trace.n_v,
                        col_offset: trace.n_v,
                    });
                }
            }
        }
        let mass = |source: (usize, usize), target: (usize, usize)| -> f64 {
            let mut total = 0.0;
            let mut rows = 0usize;
            for global_row in source.0..source.1 {
                let in_maps: Vec<&MapView> = maps
                    .iter()
                    .filter(|m| {
                        global_row >= m.row_offset
                            && global_row < m.row_offset + m.weights.rows()
                    })
                    .collect();
                if in_maps.is_empty() {
                    continue;
                }
                rows += 1;
                let mut row_mass = 0.0;
                for m in &in_maps {
                    let r = global_row - m.row_offset;
                    for c in 0..m.weights.cols() {
                        if Segments::contains(target, c + m.col_offset) {
                            row_mass += m.weights.get(r, c);
                        }
                    }
                }
                total += row_mass / in_maps.len() as f64;
            }
            if rows == 0 {
                0.0
            } else {
                total / rows as f64
            }
        };
        records.push(AttentionShareRecord {
            layer: l,
            query_to_image: mass(segments.query, segments.image),
            answer_to_image: mass(segments.answer, segments.image),
            answer_to_query: mass(segments.answer, segments.query),
        });
    }
    Ok(records)
}

/// Long-format CSV: `layer,metric,value`.
pub fn shares_csv(records: &[AttentionShareRecord]) -> String {
    let mut out = String::from("layer,metric,value\n");
    for r in records {
        out.push_str(&format!("{},query_to_image,{}\n", r.layer, r.query_to_image));
        out.push_str(&format!("{},answer_to_image,{}\n", r.layer, r.answer_to_image));
        out.push_str(&format!("{},answer_to_query,{}\n", r.layer, r.answer_to_query));
    }
    out
}

//! Linear centered kernel alignment between feature matrices.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::ForwardTrace;
use crate::numkernel::Matrix;

/// Linear CKA between two feature sets with matching row counts.
///
/// Gram matrices `K = XXᵀ` and `L = YYᵀ` are centered on both sides with
/// `H = I − (1/n)·1`, and the result is the normalized Frobenius inner
/// product `⟨K̃, L̃⟩_F / (‖K̃‖_F ‖L̃‖_F)`. Returns 0 when either centered
/// norm vanishes (featureless input).
pub fn cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(CoreError::ShapeMismatch {
            op: "cka",
            left_rows: x.rows(),
            left_cols: x.cols(),
            right_rows: y.rows(),
            right_cols: y.cols(),
        });
    }
    if x.rows() < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "cka needs at least 2 rows, got {}",
            x.rows()
        )));
    }
    let k = centered_gram(x);
    let l = centered_gram(y);
    let mut dot = 0.0;
    let mut k_norm = 0.0;
    let mut l_norm = 0.0;
    for (a, b) in k.data().iter().zip(l.data().iter()) {
        dot += a * b;
        k_norm += a * a;
        l_norm += b * b;
    }
    if k_norm == 0.0 || l_norm == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (k_norm.sqrt() * l_norm.sqrt()))
}

/// `H (X Xᵀ) H` via double centering of the Gram matrix.
fn centered_gram(x: &Matrix) -> Matrix {
    let n = x.rows();
    let gram = crate::numkernel::matmul(x, &x.transpose()).expect("square gram");
    let mut row_mean = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            s += gram.get(i, j);
        }
        row_mean[i] = s / n as f64;
        total += s;
    }
    let total_mean = total / (n * n) as f64;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // Gram is symmetric, so column means equal row means.
            out.set(i, j, gram.get(i, j) - row_mean[i] - row_mean[j] + total_mean);
        }
    }
    out
}

/// Pairwise CKA between per-layer visual features of one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    /// `(L+1) x (L+1)` over the traced visual states, inputs included.
    pub values: Matrix,
}

pub fn cka_matrix(trace: &ForwardTrace) -> Result<CkaMatrix> {
    if trace.v_states.is_empty() {
        return Err(CoreError::InvalidArgument(
            "trace has no visual state snapshots (was it collected?)".into(),
        ));
    }
    let states = &trace.v_states;
    let n = states.len();
    let mut values = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = cka(&states[i], &states[j])?;
            values.set(i, j, v);
            values.set(j, i, v);
        }
    }
    Ok(CkaMatrix { values })
}

/// Element-wise mean of per-sample CKA matrices (per-sample CKA first, then
/// averaging, rather than pooled Gram matrices).
pub fn cka_matrix_mean(traces: &[ForwardTrace]) -> Result<CkaMatrix> {
    if traces.is_empty() {
        return Err(CoreError::InvalidArgument("no traces given".into()));
    }
    let mut acc: Option<Matrix> = None;
    for t in traces {
        let m = cka_matrix(t)?.values;
        acc = Some(match acc {
            Some(a) => a.add(&m)?,
            None => m,
        });
    }
    Ok(CkaMatrix { values: acc.expect("non-empty").scale(1.0 / traces.len() as f64) })
}

/// Long-format CSV: `layer_i,layer_j,cka`.
pub fn cka_csv(matrix: &CkaMatrix) -> String {
    let mut out = String::from("layer_i,layer_j,cka\n");
    for i in 0..matrix.values.rows() {
        for j in 0..matrix.values.cols() {
            out.push_str(&format!("{i},{j},{}\n", matrix.values.get(i, j)));
        }
    }
    out
}

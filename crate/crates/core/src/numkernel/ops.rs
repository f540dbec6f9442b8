use crate::error::{CoreError, Result};

use super::matrix::{AttentionMask, Matrix};

/// Epsilon added inside the root-mean-square normalization.
pub const RMSNORM_EPS: f64 = 1e-6;

/// Standard matrix product with a fixed summation order: for each output
/// row, contributions are accumulated over the inner index `k` in increasing
/// order. This makes the result bit-reproducible across runs.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(CoreError::ShapeMismatch {
            op: "matmul",
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    let (m, inner, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (k, &aik) in a_row.iter().enumerate().take(inner) {
            let b_row = b.row(k);
            for j in 0..n {
                out_row[j] += aik * b_row[j];
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax with per-row max subtraction for stability.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// Row-wise softmax restricted to mask-allowed positions; disallowed
/// positions get exactly zero weight. A query row with no allowed key is
/// rejected (it would have no distribution to normalize).
pub fn masked_softmax_rows(m: &Matrix, mask: &AttentionMask) -> Result<Matrix> {
    if mask.queries() != m.rows() || mask.keys() != m.cols() {
        return Err(CoreError::ShapeMismatch {
            op: "masked_softmax_rows",
            left_rows: m.rows(),
            left_cols: m.cols(),
            right_rows: mask.queries(),
            right_cols: mask.keys(),
        });
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let src = m.row(r);
        let mut max = f64::NEG_INFINITY;
        for (k, &x) in src.iter().enumerate() {
            if mask.is_allowed(r, k) && x > max {
                max = x;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(CoreError::InvalidArgument(format!(
                "attention row {r} has no allowed key positions"
            )));
        }
        let dst = out.row_mut(r);
        let mut sum = 0.0;
        for (k, &x) in src.iter().enumerate() {
            if mask.is_allowed(r, k) {
                let e = (x - max).exp();
                dst[k] = e;
                sum += e;
            }
        }
        for v in dst.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Root-mean-square normalization per row, followed by an element-wise gain.
/// `gain` length must equal the column count.
pub fn rmsnorm(x: &Matrix, gain: &[f64]) -> Result<Matrix> {
    if gain.len() != x.cols() {
        return Err(CoreError::InvalidArgument(format!(
            "rmsnorm gain length {} does not match {} columns",
            gain.len(),
            x.cols()
        )));
    }
    let mut out = x.clone();
    let cols = x.cols();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let inv = 1.0 / (ms + RMSNORM_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gain.iter()) {
            *v = *v * inv * g;
        }
    }
    Ok(out)
}

/// Scaled dot-product attention.
///
/// `weights = masked_softmax(Q Kᵀ / sqrt(d))`, `out = weights × V`, where
/// `d` is the shared query/key width. Masked positions carry exactly zero
/// weight. Returns `(out, weights)`.
pub fn scaled_dot_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &AttentionMask,
) -> Result<(Matrix, Matrix)> {
    if q.cols() != k.cols() {
        return Err(CoreError::ShapeMismatch {
            op: "attention q/k",
            left_rows: q.rows(),
            left_cols: q.cols(),
            right_rows: k.rows(),
            right_cols: k.cols(),
        });
    }
    if k.rows() != v.rows() {
        return Err(CoreError::ShapeMismatch {
            op: "attention k/v",
            left_rows: k.rows(),
            left_cols: k.cols(),
            right_rows: v.rows(),
            right_cols: v.cols(),
        });
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let scores = matmul(q, &k.transpose())?.scale(scale);
    let weights = masked_softmax_rows(&scores, mask)?;
    let out = matmul(&weights, v)?;
    Ok((out, weights))
}

/// Depthwise 1D convolution along the token axis with zero padding.
///
/// `kernels` has one row per feature channel and `k` columns (odd `k`);
/// `padding` must equal `(k - 1) / 2` so the output length matches the
/// input length.
pub fn depthwise_conv1d(x: &Matrix, kernels: &Matrix, padding: usize) -> Result<Matrix> {
    let k = kernels.cols();
    if k % 2 == 0 {
        return Err(CoreError::InvalidArgument(format!(
            "depthwise_conv1d requires an odd kernel size, got {k}"
        )));
    }
    if kernels.rows() != x.cols() {
        return Err(CoreError::InvalidArgument(format!(
            "depthwise_conv1d kernel channels {} do not match input channels {}",
            kernels.rows(),
            x.cols()
        )));
    }
    if padding != (k - 1) / 2 {
        return Err(CoreError::InvalidArgument(format!(
            "depthwise_conv1d padding {padding} must be (k-1)/2 = {}",
            (k - 1) / 2
        )));
    }
    let n = x.rows();
    let channels = x.cols();
    let mut out = Matrix::zeros(n, channels);
    for i in 0..n {
        for c in 0..channels {
            let mut acc = 0.0;
            for t in 0..k {
                // Input position for tap t; zero outside the sequence.
                let pos = i as isize + t as isize - padding as isize;
                if pos >= 0 && (pos as usize) < n {
                    acc += kernels.get(c, t) * x.get(pos as usize, c);
                }
            }
            out.set(i, c, acc);
        }
    }
    Ok(out)
}

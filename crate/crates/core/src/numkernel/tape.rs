//! Reverse-mode gradient tape over [`Matrix`] values.
//!
//! The tape is a Wengert list: every primitive application appends a node
//! holding the forward value and the information needed to evaluate its
//! vector-Jacobian product. [`Tape::backward`] replays the list in reverse
//! and accumulates a gradient for every node; parameters never touched by
//! the forward pass get an exactly-zero gradient.
//!
//! Forward values are computed by the same pure kernels exposed from
//! [`super::ops`], so the tape adds derivatives without forking the
//! numerics. A tape is confined to one logical thread.

use crate::error::{CoreError, Result};

use super::matrix::{AttentionMask, Matrix};
use super::ops;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Silu { a: Var },
    // Backward reads only the saved output: masked entries have exactly
    // zero weight there, so they contribute nothing to the VJP.
    MaskedSoftmaxRows { a: Var },
    RmsNorm { x: Var, gain: Option<Var> },
    DepthwiseConv { x: Var, kernels: Var, padding: usize },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows { a: Var, b: Var },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    AddRowBroadcast { a: Var, bias: Var },
    /// Mean negative log-likelihood of `targets` = (row, token id) pairs.
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)> },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to `var`; exactly zero if the variable did not
    /// influence the loss.
    pub fn wrt(&self, var: Var, shape_of: &Tape) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let v = shape_of.value(var);
                Matrix::zeros(v.rows(), v.cols())
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads[var.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        debug_assert_eq!((v.rows(), v.cols()), (1, 1));
        v.get(0, 0)
    }

    // Non-finite values are allowed to flow: training checks its loss and
    // reports divergence as an error instead of crashing mid-pass.
    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose { a })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale { a, factor })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.push(value, Op::Silu { a })
    }

    pub fn masked_softmax_rows(&mut self, a: Var, mask: AttentionMask) -> Result<Var> {
        let value = ops::masked_softmax_rows(self.value(a), &mask)?;
        Ok(self.push(value, Op::MaskedSoftmaxRows { a }))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let mask = AttentionMask::all_allowed(v.rows(), v.cols());
        self.masked_softmax_rows(a, mask)
    }

    /// Root-mean-square normalization; `gain` of `None` applies no learned
    /// gain (used by the cross-attention input norms, which carry none).
    pub fn rmsnorm(&mut self, x: Var, gain: Option<Var>) -> Result<Var> {
        let gain_vec: Vec<f64> = match gain {
            Some(g) => {
                let gm = self.value(g);
                if gm.rows() != 1 {
                    return Err(CoreError::InvalidArgument(
                        "rmsnorm gain must be a single row".into(),
                    ));
                }
                gm.row(0).to_vec()
            }
            None => vec![1.0; self.value(x).cols()],
        };
        let value = ops::rmsnorm(self.value(x), &gain_vec)?;
        Ok(self.push(value, Op::RmsNorm { x, gain }))
    }

    pub fn depthwise_conv1d(&mut self, x: Var, kernels: Var, padding: usize) -> Result<Var> {
        let value = ops::depthwise_conv1d(self.value(x), self.value(kernels), padding)?;
        Ok(self.push(value, Op::DepthwiseConv { x, kernels, padding }))
    }

    /// Row lookup: output row r = table row ids[r].
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(CoreError::InvalidArgument(format!(
                    "gather id {id} out of range for table with {} rows",
                    t.rows()
                )));
            }
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_rows(self.value(b))?;
        Ok(self.push(value, Op::ConcatRows { a, b }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_rows(start, len);
        self.push(value, Op::SliceRows { a, start })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        self.push(value, Op::SliceCols { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::InvalidArgument("concat_cols of no parts".into()));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_cols",
                    left_rows: rows,
                    left_cols: 0,
                    right_rows: v.rows(),
                    right_cols: v.cols(),
                });
            }
            for r in 0..rows {
                out.row_mut(r)[at..at + v.cols()].copy_from_slice(v.row(r));
            }
            at += v.cols();
        }
        Ok(self.push(out, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Adds a 1-row bias to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(CoreError::ShapeMismatch {
                op: "add_row_broadcast",
                left_rows: av.rows(),
                left_cols: av.cols(),
                right_rows: bv.rows(),
                right_cols: bv.cols(),
            });
        }
        let mut out = av.clone();
        let bias_row: Vec<f64> = bv.row(0).to_vec();
        for r in 0..out.rows() {
            for (x, b) in out.row_mut(r).iter_mut().zip(bias_row.iter()) {
                *x += b;
            }
        }
        Ok(self.push(out, Op::AddRowBroadcast { a, bias }))
    }

    /// Mean cross-entropy of the given (row, target token) pairs under a
    /// row-wise softmax of `logits`. Produces a 1x1 scalar node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        if targets.is_empty() {
            return Err(CoreError::InvalidArgument("cross_entropy with no targets".into()));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for &(row, tok) in targets {
            if row >= lv.rows() || tok >= lv.cols() {
                return Err(CoreError::InvalidArgument(format!(
                    "cross_entropy target ({row}, {tok}) out of range for {}x{} logits",
                    lv.rows(),
                    lv.cols()
                )));
            }
            total -= log_softmax_at(lv.row(row), tok);
        }
        let loss = total / targets.len() as f64;
        let value = Matrix::from_vec(1, 1, vec![loss])?;
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec() }))
    }

    /// Reverse pass seeded with d(loss)/d(loss) = 1. `loss` must be 1x1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(CoreError::InvalidArgument(format!(
                "backward requires a scalar loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        if !lv.is_finite() {
            return Err(CoreError::NonFinite {
                context: "backward",
                detail: format!("loss = {}", lv.get(0, 0)),
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(grad_out) = grads[idx].take() else { continue };
            // Re-insert so callers can read the gradient of interior nodes.
            let grad_out = {
                grads[idx] = Some(grad_out);
                grads[idx].as_ref().unwrap().clone()
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let da = ops::matmul(&grad_out, &self.value(*b).transpose())?;
                    let db = ops::matmul(&self.value(*a).transpose(), &grad_out)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Transpose { a } => {
                    accumulate(&mut grads, *a, grad_out.transpose())?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, grad_out.clone())?;
                    accumulate(&mut grads, *b, grad_out)?;
                }
                Op::Scale { a, factor } => {
                    accumulate(&mut grads, *a, grad_out.scale(*factor))?;
                }
                Op::Silu { a } => {
                    let x = self.value(*a);
                    let mut dx = grad_out;
                    for (g, &xv) in dx.data_mut().iter_mut().zip(x.data().iter()) {
                        let s = sigmoid(xv);
                        *g *= s * (1.0 + xv * (1.0 - s));
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::MaskedSoftmaxRows { a } => {
                    // dx_ij = y_ij * (dy_ij - sum_k dy_ik y_ik); masked
                    // entries have y = 0 and so contribute nothing.
                    let y = &self.nodes[idx].value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = grad_out.row(r);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                        let dr = dx.row_mut(r);
                        for j in 0..yr.len() {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::RmsNorm { x, gain } => {
                    let xv = self.value(*x);
                    let cols = xv.cols();
                    let gain_vec: Vec<f64> = match gain {
                        Some(g) => self.value(*g).row(0).to_vec(),
                        None => vec![1.0; cols],
                    };
                    let mut dx = Matrix::zeros(xv.rows(), cols);
                    let mut dgain = vec![0.0; cols];
                    for r in 0..xv.rows() {
                        let xr = xv.row(r);
                        let gr = grad_out.row(r);
                        let ms = xr.iter().map(|v| v * v).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (ms + ops::RMSNORM_EPS).sqrt();
                        // u = upstream gradient times gain.
                        let mut u_dot_x = 0.0;
                        for j in 0..cols {
                            u_dot_x += gr[j] * gain_vec[j] * xr[j];
                        }
                        let dr = dx.row_mut(r);
                        for j in 0..cols {
                            let u = gr[j] * gain_vec[j];
                            dr[j] = inv * u - inv.powi(3) / cols as f64 * xr[j] * u_dot_x;
                            dgain[j] += gr[j] * xr[j] * inv;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                    if let Some(g) = gain {
                        accumulate(&mut grads, *g, Matrix::from_vec(1, cols, dgain)?)?;
                    }
                }
                Op::DepthwiseConv { x, kernels, padding } => {
                    let xv = self.value(*x);
                    let kv = self.value(*kernels);
                    let (n, channels, k, pad) =
                        (xv.rows() as isize, xv.cols(), kv.cols(), *padding as isize);
                    let mut dx = Matrix::zeros(xv.rows(), channels);
                    let mut dk = Matrix::zeros(kv.rows(), k);
                    for i in 0..xv.rows() {
                        for c in 0..channels {
                            let g = grad_out.get(i, c);
                            for t in 0..k {
                                let pos = i as isize + t as isize - pad;
                                if pos >= 0 && pos < n {
                                    let p = pos as usize;
                                    dx.set(p, c, dx.get(p, c) + kv.get(c, t) * g);
                                    dk.set(c, t, dk.get(c, t) + xv.get(p, c) * g);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *kernels, dk)?;
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        let src = grad_out.row(r);
                        for (d, s) in dt.row_mut(id).iter_mut().zip(src.iter()) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *table, dt)?;
                }
                Op::ConcatRows { a, b } => {
                    let a_rows = self.value(*a).rows();
                    let b_rows = self.value(*b).rows();
                    accumulate(&mut grads, *a, grad_out.slice_rows(0, a_rows))?;
                    accumulate(&mut grads, *b, grad_out.slice_rows(a_rows, b_rows))?;
                }
                Op::SliceRows { a, start } => {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..grad_out.rows() {
                        da.row_mut(start + r).copy_from_slice(grad_out.row(r));
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::SliceCols { a, start } => {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..grad_out.rows() {
                        da.row_mut(r)[*start..start + grad_out.cols()]
                            .copy_from_slice(grad_out.row(r));
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::ConcatCols { parts } => {
                    let mut at = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut dp = Matrix::zeros(grad_out.rows(), cols);
                        for r in 0..grad_out.rows() {
                            dp.row_mut(r).copy_from_slice(&grad_out.row(r)[at..at + cols]);
                        }
                        accumulate(&mut grads, p, dp)?;
                        at += cols;
                    }
                }
                Op::AddRowBroadcast { a, bias } => {
                    accumulate(&mut grads, *a, grad_out.clone())?;
                    let mut db = Matrix::zeros(1, grad_out.cols());
                    for r in 0..grad_out.rows() {
                        for (d, s) in db.row_mut(0).iter_mut().zip(grad_out.row(r).iter()) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *bias, db)?;
                }
                Op::CrossEntropy { logits, targets } => {
                    let lv = self.value(*logits);
                    let seed = grad_out.get(0, 0) / targets.len() as f64;
                    let mut dl = Matrix::zeros(lv.rows(), lv.cols());
                    for &(row, tok) in targets {
                        let probs = softmax_row(lv.row(row));
                        let dr = dl.row_mut(row);
                        for (j, p) in probs.iter().enumerate() {
                            dr[j] += seed * (p - if j == tok { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(&mut grads, *logits, dl)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], var: Var, delta: Matrix) -> Result<()> {
    match &mut grads[var.0] {
        Some(existing) => {
            *existing = existing.add(&delta)?;
        }
        slot @ None => {
            *slot = Some(delta);
        }
    }
    Ok(())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    (row[idx] - max) - log_sum
}

/// Compares tape gradients of a scalar loss against central finite
/// differences, component-wise over every parameter, and returns the worst
/// relative error `|g - fd| / max(|g|, |fd|, 1)` (which degrades to the
/// absolute error when both gradients are small).
pub fn gradient_check<F>(mut loss: F, params: &[Matrix], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Matrix], loss: &mut F| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = loss(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.rows() != 1 || v.cols() != 1 {
            return Err(CoreError::InvalidArgument("loss function must return a scalar".into()));
        }
        if !v.is_finite() {
            return Err(CoreError::NonFinite {
                context: "gradient_check",
                detail: "loss is not finite".into(),
            });
        }
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(params, &mut loss)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut perturbed: Vec<Matrix> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.wrt(vars[pi], &tape);
        for j in 0..param.data().len() {
            let orig = param.data()[j];

            perturbed[pi].data_mut()[j] = orig + eps;
            let (tape_p, _, out_p) = eval(&perturbed, &mut loss)?;
            let plus = tape_p.scalar(out_p);

            perturbed[pi].data_mut()[j] = orig - eps;
            let (tape_m, _, out_m) = eval(&perturbed, &mut loss)?;
            let minus = tape_m.scalar(out_m);

            perturbed[pi].data_mut()[j] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let g = analytic.data()[j];
            let err = (g - fd).abs() / f64::max(1.0, f64::max(g.abs(), fd.abs()));
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

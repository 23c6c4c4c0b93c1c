//! Differentiable primitives.
//!
//! Every operation computes its value eagerly and, when an operand is
//! tracked, records a pullback on the shared tape. Pullbacks run plain
//! sequential loops so repeated runs are bit-identical.

use std::sync::Arc;

use super::{NodeRef, Tape, TapeHandle, Tensor};
use crate::error::{Error, Result};

/// Finds the single tape shared by the tracked operands, if any.
pub(crate) fn joint_tape(parts: &[&Tensor]) -> Result<Option<TapeHandle>> {
    let mut found: Option<TapeHandle> = None;
    for p in parts {
        if let Some(nr) = p.node_ref() {
            match &found {
                None => found = Some(nr.tape.clone()),
                Some(t) => {
                    if !Arc::ptr_eq(t, &nr.tape) {
                        return Err(Error::Contract(
                            "operands are tracked on different tapes".into(),
                        ));
                    }
                }
            }
        }
    }
    if let Some(t) = &found {
        if t.lock().unwrap().consumed {
            return Err(Error::State("tape already consumed by backward".into()));
        }
    }
    Ok(found)
}

fn record(
    tape: Option<TapeHandle>,
    shape: Vec<usize>,
    data: Vec<f64>,
    input_ids: Vec<usize>,
    vjp: Box<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send>,
) -> Tensor {
    match tape {
        Some(tape) if !input_ids.is_empty() => {
            let size = data.len();
            let id = {
                let mut inner = tape.lock().unwrap();
                let id = inner.nodes.len();
                inner.nodes.push(super::Node { inputs: input_ids, vjp, size });
                id
            };
            Tensor::tracked_on(shape, data, NodeRef { tape, id })
        }
        _ => Tensor::new(shape, data).expect("internal op produced a valid tensor"),
    }
}

fn tracked_ids(parts: &[&Tensor]) -> Vec<usize> {
    parts.iter().filter_map(|t| t.node_ref().map(|n| n.id)).collect()
}

fn require_2d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Dimension { op, lhs: other.to_vec(), rhs: vec![] }),
    }
}

/// Exact Gaussian-CDF GELU, exposed so independent test oracles evaluate
/// the same elementary function.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
fn gelu_val(x: f64) -> f64 {
    gelu_scalar(x)
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    const INV_SQRT_TAU: f64 = 0.398_942_280_401_432_7; // 1/sqrt(2*pi)
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = INV_SQRT_TAU * (-0.5 * x * x).exp();
    cdf + x * pdf
}

impl Tensor {
    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = require_2d(self, "matmul")?;
        let (k2, n) = require_2d(rhs, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (t, &av) in arow.iter().enumerate() {
                let brow = &b[t * n..(t + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }

        let tape = joint_tape(&[self, rhs])?;
        let ids = tracked_ids(&[self, rhs]);
        let (a_arc, b_arc) = (self.data_arc(), rhs.data_arc());
        let (a_tr, b_tr) = (self.is_tracked(), rhs.is_tracked());
        let vjp = Box::new(move |g: &[f64]| {
            let mut grads = Vec::new();
            if a_tr {
                // dA = g @ B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for t in 0..k {
                        let mut acc = 0.0;
                        let brow = &b_arc[t * n..(t + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        da[i * k + t] = acc;
                    }
                }
                grads.push(da);
            }
            if b_tr {
                // dB = A^T @ g
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let arow = &a_arc[i * k..(i + 1) * k];
                    let grow = &g[i * n..(i + 1) * n];
                    for (t, &av) in arow.iter().enumerate() {
                        let drow = &mut db[t * n..(t + 1) * n];
                        for j in 0..n {
                            drow[j] += av * grow[j];
                        }
                    }
                }
                grads.push(db);
            }
            grads
        });
        Ok(record(tape, vec![m, n], out, ids, vjp))
    }

    fn zip_same_shape(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        vjp_builder: impl FnOnce(Arc<Vec<f64>>, Arc<Vec<f64>>, bool, bool) -> Box<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send>,
    ) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(Error::Dimension {
                op,
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let out: Vec<f64> = self.data().iter().zip(rhs.data()).map(|(&a, &b)| f(a, b)).collect();
        let tape = joint_tape(&[self, rhs])?;
        let ids = tracked_ids(&[self, rhs]);
        let vjp = vjp_builder(self.data_arc(), rhs.data_arc(), self.is_tracked(), rhs.is_tracked());
        Ok(record(tape, self.shape().to_vec(), out, ids, vjp))
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(rhs, "add", |a, b| a + b, |_, _, a_tr, b_tr| {
            Box::new(move |g: &[f64]| {
                let mut grads = Vec::new();
                if a_tr {
                    grads.push(g.to_vec());
                }
                if b_tr {
                    grads.push(g.to_vec());
                }
                grads
            })
        })
    }

    /// Elementwise difference of same-shape tensors.
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(rhs, "sub", |a, b| a - b, |_, _, a_tr, b_tr| {
            Box::new(move |g: &[f64]| {
                let mut grads = Vec::new();
                if a_tr {
                    grads.push(g.to_vec());
                }
                if b_tr {
                    grads.push(g.iter().map(|v| -v).collect());
                }
                grads
            })
        })
    }

    /// Elementwise (Hadamard) product; also serves as mask multiplication.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(rhs, "mul", |a, b| a * b, |a_arc, b_arc, a_tr, b_tr| {
            Box::new(move |g: &[f64]| {
                let mut grads = Vec::new();
                if a_tr {
                    grads.push(g.iter().zip(b_arc.iter()).map(|(gv, bv)| gv * bv).collect());
                }
                if b_tr {
                    grads.push(g.iter().zip(a_arc.iter()).map(|(gv, av)| gv * av).collect());
                }
                grads
            })
        })
    }

    /// Multiplication by a plain constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        let tape = joint_tape(&[self]).expect("single operand cannot conflict");
        let ids = tracked_ids(&[self]);
        let vjp = Box::new(move |g: &[f64]| vec![g.iter().map(|v| v * c).collect()]);
        record(tape, self.shape().to_vec(), out, ids, vjp)
    }

    /// Adds a length-`c` vector to every row of a `[r,c]` matrix.
    pub fn add_row(&self, v: &Tensor) -> Result<Tensor> {
        let (r, c) = require_2d(self, "add_row")?;
        if v.numel() != c {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let vd = v.data();
        let mut out = self.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += vd[j];
            }
        }
        let tape = joint_tape(&[self, v])?;
        let ids = tracked_ids(&[self, v]);
        let (a_tr, v_tr) = (self.is_tracked(), v.is_tracked());
        let vjp = Box::new(move |g: &[f64]| {
            let mut grads = Vec::new();
            if a_tr {
                grads.push(g.to_vec());
            }
            if v_tr {
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dv[j] += g[i * c + j];
                    }
                }
                grads.push(dv);
            }
            grads
        });
        Ok(record(tape, vec![r, c], out, ids, vjp))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = require_2d(self, "transpose")?;
        let d = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let tape = joint_tape(&[self])?;
        let ids = tracked_ids(&[self]);
        let vjp = Box::new(move |g: &[f64]| {
            let mut dg = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dg[i * c + j] = g[j * r + i];
                }
            }
            vec![dg]
        });
        Ok(record(tape, vec![c, r], out, ids, vjp))
    }

    /// Same data, new shape with identical element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.is_empty() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape,
            });
        }
        let tape = joint_tape(&[self])?;
        let ids = tracked_ids(&[self]);
        let vjp = Box::new(move |g: &[f64]| vec![g.to_vec()]);
        Ok(record(tape, shape, self.data().to_vec(), ids, vjp))
    }

    /// Stable softmax along the last axis; each slice sums to one.
    pub fn softmax_rows(&self) -> Tensor {
        let cols = *self.shape().last().expect("tensor has at least one axis");
        let rows = self.numel() / cols;
        let d = self.data();
        let mut out = vec![0.0; self.numel()];
        for i in 0..rows {
            let row = &d[i * cols..(i + 1) * cols];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let orow = &mut out[i * cols..(i + 1) * cols];
            let mut s = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - m).exp();
                s += *o;
            }
            for o in orow.iter_mut() {
                *o /= s;
            }
        }
        let tape = joint_tape(&[self]).expect("single operand cannot conflict");
        let ids = tracked_ids(&[self]);
        let y = Arc::new(out.clone());
        let vjp = Box::new(move |g: &[f64]| {
            let mut dx = vec![0.0; y.len()];
            for i in 0..rows {
                let yr = &y[i * cols..(i + 1) * cols];
                let gr = &g[i * cols..(i + 1) * cols];
                let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                let dr = &mut dx[i * cols..(i + 1) * cols];
                for j in 0..cols {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![dx]
        });
        record(tape, self.shape().to_vec(), out, ids, vjp)
    }

    /// Row-wise layer normalization with learnable scale and shift.
    ///
    /// `eps` is added to the population variance before the square root.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = require_2d(self, "layer_norm")?;
        if gamma.numel() != c || beta.numel() != c {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut out = vec![0.0; r * c];
        let mut stats = Vec::with_capacity(r); // (mu, inv_std) per row
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            stats.push((mu, inv));
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] = (row[j] - mu) * inv * gm[j] + bt[j];
            }
        }

        let tape = joint_tape(&[self, gamma, beta])?;
        let ids = tracked_ids(&[self, gamma, beta]);
        let (x_arc, g_arc) = (self.data_arc(), gamma.data_arc());
        let (x_tr, gm_tr, bt_tr) = (self.is_tracked(), gamma.is_tracked(), beta.is_tracked());
        let stats = Arc::new(stats);
        let vjp = Box::new(move |g: &[f64]| {
            let mut grads = Vec::new();
            if x_tr {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let (mu, inv) = stats[i];
                    let xr = &x_arc[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let mut dvar = 0.0;
                    let mut dmu = 0.0;
                    for j in 0..c {
                        let dxhat = gr[j] * g_arc[j];
                        dvar += dxhat * (xr[j] - mu) * (-0.5) * inv * inv * inv;
                        dmu += dxhat * (-inv);
                    }
                    let mut centered_sum = 0.0;
                    for v in xr {
                        centered_sum += v - mu;
                    }
                    dmu += dvar * (-2.0) * centered_sum / c as f64;
                    let dr = &mut dx[i * c..(i + 1) * c];
                    for j in 0..c {
                        let dxhat = gr[j] * g_arc[j];
                        dr[j] = dxhat * inv
                            + dvar * 2.0 * (xr[j] - mu) / c as f64
                            + dmu / c as f64;
                    }
                }
                grads.push(dx);
            }
            if gm_tr {
                let mut dg = vec![0.0; c];
                for i in 0..r {
                    let (mu, inv) = stats[i];
                    for j in 0..c {
                        dg[j] += g[i * c + j] * (x_arc[i * c + j] - mu) * inv;
                    }
                }
                grads.push(dg);
            }
            if bt_tr {
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g[i * c + j];
                    }
                }
                grads.push(db);
            }
            grads
        });
        Ok(record(tape, vec![r, c], out, ids, vjp))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&v| gelu_val(v)).collect();
        let tape = joint_tape(&[self]).expect("single operand cannot conflict");
        let ids = tracked_ids(&[self]);
        let x_arc = self.data_arc();
        let vjp = Box::new(move |g: &[f64]| {
            vec![g.iter().zip(x_arc.iter()).map(|(gv, &xv)| gv * gelu_grad(xv)).collect()]
        });
        record(tape, self.shape().to_vec(), out, ids, vjp)
    }

    /// Rectifier with subgradient 0 at the kink.
    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let tape = joint_tape(&[self]).expect("single operand cannot conflict");
        let ids = tracked_ids(&[self]);
        let x_arc = self.data_arc();
        let vjp = Box::new(move |g: &[f64]| {
            vec![g
                .iter()
                .zip(x_arc.iter())
                .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                .collect()]
        });
        record(tape, self.shape().to_vec(), out, ids, vjp)
    }

    /// Mean over every element, as a `[1]` scalar.
    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let m = self.data().iter().sum::<f64>() / n as f64;
        let tape = joint_tape(&[self]).expect("single operand cannot conflict");
        let ids = tracked_ids(&[self]);
        let vjp = Box::new(move |g: &[f64]| vec![vec![g[0] / n as f64; n]]);
        record(tape, vec![1], vec![m], ids, vjp)
    }

    /// Sum over every element, as a `[1]` scalar.
    pub fn sum_all(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().sum::<f64>();
        let tape = joint_tape(&[self]).expect("single operand cannot conflict");
        let ids = tracked_ids(&[self]);
        let vjp = Box::new(move |g: &[f64]| vec![vec![g[0]; n]]);
        record(tape, vec![1], vec![s], ids, vjp)
    }

    /// One element by flat index, as a `[1]` scalar.
    pub fn pick(&self, idx: usize) -> Result<Tensor> {
        let n = self.numel();
        if idx >= n {
            return Err(Error::Input(format!("pick index {idx} out of range for {n} elements")));
        }
        let v = self.data()[idx];
        let tape = joint_tape(&[self])?;
        let ids = tracked_ids(&[self]);
        let vjp = Box::new(move |g: &[f64]| {
            let mut dx = vec![0.0; n];
            dx[idx] = g[0];
            vec![dx]
        });
        Ok(record(tape, vec![1], vec![v], ids, vjp))
    }

    /// Rows `r0..r1` of a 2-D tensor.
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Result<Tensor> {
        let (r, c) = require_2d(self, "slice_rows")?;
        if r0 >= r1 || r1 > r {
            return Err(Error::Input(format!("slice_rows {r0}..{r1} out of range for {r} rows")));
        }
        let out = self.data()[r0 * c..r1 * c].to_vec();
        let tape = joint_tape(&[self])?;
        let ids = tracked_ids(&[self]);
        let vjp = Box::new(move |g: &[f64]| {
            let mut dx = vec![0.0; r * c];
            dx[r0 * c..r1 * c].copy_from_slice(g);
            vec![dx]
        });
        Ok(record(tape, vec![r1 - r0, c], out, ids, vjp))
    }

    /// Columns `c0..c1` of a 2-D tensor.
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Result<Tensor> {
        let (r, c) = require_2d(self, "slice_cols")?;
        if c0 >= c1 || c1 > c {
            return Err(Error::Input(format!("slice_cols {c0}..{c1} out of range for {c} cols")));
        }
        let w = c1 - c0;
        let d = self.data();
        let mut out = vec![0.0; r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w].copy_from_slice(&d[i * c + c0..i * c + c1]);
        }
        let tape = joint_tape(&[self])?;
        let ids = tracked_ids(&[self]);
        let vjp = Box::new(move |g: &[f64]| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                dx[i * c + c0..i * c + c1].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            vec![dx]
        });
        Ok(record(tape, vec![r, w], out, ids, vjp))
    }

    /// Rows selected (or permuted) by index; duplicate indices are allowed
    /// and their cotangents accumulate.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = require_2d(self, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::Input("gather_rows: empty index list".into()));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Input(format!("gather_rows index {bad} out of range for {r} rows")));
        }
        let d = self.data();
        let mut out = vec![0.0; idx.len() * c];
        for (k, &i) in idx.iter().enumerate() {
            out[k * c..(k + 1) * c].copy_from_slice(&d[i * c..(i + 1) * c]);
        }
        let tape = joint_tape(&[self])?;
        let ids = tracked_ids(&[self]);
        let idx_own: Vec<usize> = idx.to_vec();
        let vjp = Box::new(move |g: &[f64]| {
            let mut dx = vec![0.0; r * c];
            for (k, &i) in idx_own.iter().enumerate() {
                for j in 0..c {
                    dx[i * c + j] += g[k * c + j];
                }
            }
            vec![dx]
        });
        Ok(record(tape, vec![idx.len(), c], out, ids, vjp))
    }

    /// Splits an `[h,w,c]` image into non-overlapping `p x p` patches,
    /// flattened row-major as (dy, dx, channel): output `[n, p*p*c]`.
    pub fn extract_patches(&self, p: usize) -> Result<Tensor> {
        let (h, w, c) = match self.shape() {
            [h, w, c] => (*h, *w, *c),
            other => {
                return Err(Error::Dimension { op: "extract_patches", lhs: other.to_vec(), rhs: vec![p] })
            }
        };
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Dimension {
                op: "extract_patches",
                lhs: self.shape().to_vec(),
                rhs: vec![p],
            });
        }
        let (nr, nc) = (h / p, w / p);
        let n = nr * nc;
        let plen = p * p * c;
        let d = self.data();
        let mut out = vec![0.0; n * plen];
        for pi in 0..nr {
            for pj in 0..nc {
                let patch = pi * nc + pj;
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..c {
                            out[patch * plen + (dy * p + dx) * c + ch] =
                                d[((pi * p + dy) * w + (pj * p + dx)) * c + ch];
                        }
                    }
                }
            }
        }
        let tape = joint_tape(&[self])?;
        let ids = tracked_ids(&[self]);
        let vjp = Box::new(move |g: &[f64]| {
            let mut dx = vec![0.0; h * w * c];
            for pi in 0..nr {
                for pj in 0..nc {
                    let patch = pi * nc + pj;
                    for dy in 0..p {
                        for dx_ in 0..p {
                            for ch in 0..c {
                                dx[((pi * p + dy) * w + (pj * p + dx_)) * c + ch] =
                                    g[patch * plen + (dy * p + dx_) * c + ch];
                            }
                        }
                    }
                }
            }
            vec![dx]
        });
        Ok(record(tape, vec![n, plen], out, ids, vjp))
    }

    /// Cross-entropy of flat logits against an integer label:
    /// `logsumexp(logits) - logits[label]`, max-stabilized.
    pub fn cross_entropy_logits(&self, label: usize) -> Result<Tensor> {
        let k = self.numel();
        if label >= k {
            return Err(Error::Input(format!("label {label} out of range for {k} classes")));
        }
        let d = self.data();
        let m = d.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum_exp: f64 = d.iter().map(|&v| (v - m).exp()).sum();
        let loss = m + sum_exp.ln() - d[label];

        let tape = joint_tape(&[self])?;
        let ids = tracked_ids(&[self]);
        let x_arc = self.data_arc();
        let vjp = Box::new(move |g: &[f64]| {
            let mut dx: Vec<f64> = x_arc.iter().map(|&v| (v - m).exp() / sum_exp * g[0]).collect();
            dx[label] -= g[0];
            vec![dx]
        });
        Ok(record(tape, vec![1], vec![loss], ids, vjp))
    }

    /// Stride-1, zero-padded ("same") 2-D convolution.
    ///
    /// `self`: `[h,w,cin]`; `weight`: `[k,k,cin,cout]` with odd `k`;
    /// `bias`: `[cout]`. Output `[h,w,cout]`.
    pub fn conv2d_same(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (h, w, cin) = match self.shape() {
            [h, w, c] => (*h, *w, *c),
            other => {
                return Err(Error::Dimension { op: "conv2d_same", lhs: other.to_vec(), rhs: weight.shape().to_vec() })
            }
        };
        let (k, cout) = match weight.shape() {
            [k1, k2, ci, co] if k1 == k2 && *ci == cin && k1 % 2 == 1 => (*k1, *co),
            other => {
                return Err(Error::Dimension { op: "conv2d_same", lhs: self.shape().to_vec(), rhs: other.to_vec() })
            }
        };
        if bias.numel() != cout {
            return Err(Error::Dimension {
                op: "conv2d_same",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let pad = k / 2;
        let x = self.data();
        let wt = weight.data();
        let bd = bias.data();
        let mut out = vec![0.0; h * w * cout];
        for y in 0..h {
            for xx in 0..w {
                let orow = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                orow.copy_from_slice(bd);
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = xx as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xbase = ((iy as usize) * w + ix as usize) * cin;
                        let wbase = (ky * k + kx) * cin;
                        for ci in 0..cin {
                            let xv = x[xbase + ci];
                            let wrow = &wt[(wbase + ci) * cout..(wbase + ci + 1) * cout];
                            for co in 0..cout {
                                orow[co] += xv * wrow[co];
                            }
                        }
                    }
                }
            }
        }

        let tape = joint_tape(&[self, weight, bias])?;
        let ids = tracked_ids(&[self, weight, bias]);
        let (x_arc, w_arc) = (self.data_arc(), weight.data_arc());
        let (x_tr, w_tr, b_tr) = (self.is_tracked(), weight.is_tracked(), bias.is_tracked());
        let vjp = Box::new(move |g: &[f64]| {
            let mut grads = Vec::new();
            if x_tr {
                let mut dx = vec![0.0; h * w * cin];
                for y in 0..h {
                    for xx in 0..w {
                        let grow = &g[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                        for ky in 0..k {
                            let iy = y as isize + ky as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = xx as isize + kx as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xbase = ((iy as usize) * w + ix as usize) * cin;
                                let wbase = (ky * k + kx) * cin;
                                for ci in 0..cin {
                                    let wrow = &w_arc[(wbase + ci) * cout..(wbase + ci + 1) * cout];
                                    let mut acc = 0.0;
                                    for co in 0..cout {
                                        acc += grow[co] * wrow[co];
                                    }
                                    dx[xbase + ci] += acc;
                                }
                            }
                        }
                    }
                }
                grads.push(dx);
            }
            if w_tr {
                let mut dw = vec![0.0; k * k * cin * cout];
                for y in 0..h {
                    for xx in 0..w {
                        let grow = &g[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                        for ky in 0..k {
                            let iy = y as isize + ky as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = xx as isize + kx as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xbase = ((iy as usize) * w + ix as usize) * cin;
                                let wbase = (ky * k + kx) * cin;
                                for ci in 0..cin {
                                    let xv = x_arc[xbase + ci];
                                    let drow = &mut dw[(wbase + ci) * cout..(wbase + ci + 1) * cout];
                                    for co in 0..cout {
                                        drow[co] += xv * grow[co];
                                    }
                                }
                            }
                        }
                    }
                }
                grads.push(dw);
            }
            if b_tr {
                let mut db = vec![0.0; cout];
                for yx in 0..h * w {
                    for co in 0..cout {
                        db[co] += g[yx * cout + co];
                    }
                }
                grads.push(db);
            }
            grads
        });
        Ok(record(tape, vec![h, w, cout], out, ids, vjp))
    }

    /// 2x2 average pooling over an `[h,w,c]` tensor with even `h` and `w`.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        let (h, w, c) = match self.shape() {
            [h, w, c] if h % 2 == 0 && w % 2 == 0 => (*h, *w, *c),
            other => {
                return Err(Error::Dimension { op: "avg_pool2", lhs: other.to_vec(), rhs: vec![2, 2] })
            }
        };
        let (oh, ow) = (h / 2, w / 2);
        let d = self.data();
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..c {
                    let s = d[((2 * y) * w + 2 * x) * c + ch]
                        + d[((2 * y) * w + 2 * x + 1) * c + ch]
                        + d[((2 * y + 1) * w + 2 * x) * c + ch]
                        + d[((2 * y + 1) * w + 2 * x + 1) * c + ch];
                    out[(y * ow + x) * c + ch] = s * 0.25;
                }
            }
        }
        let tape = joint_tape(&[self])?;
        let ids = tracked_ids(&[self]);
        let vjp = Box::new(move |g: &[f64]| {
            let mut dx = vec![0.0; h * w * c];
            for y in 0..oh {
                for x in 0..ow {
                    for ch in 0..c {
                        let gv = g[(y * ow + x) * c + ch] * 0.25;
                        dx[((2 * y) * w + 2 * x) * c + ch] = gv;
                        dx[((2 * y) * w + 2 * x + 1) * c + ch] = gv;
                        dx[((2 * y + 1) * w + 2 * x) * c + ch] = gv;
                        dx[((2 * y + 1) * w + 2 * x + 1) * c + ch] = gv;
                    }
                }
            }
            vec![dx]
        });
        Ok(record(tape, vec![oh, ow, c], out, ids, vjp))
    }
}

/// Vertical concatenation of 2-D tensors with equal column counts.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Input("concat_rows: no operands".into()));
    }
    let (_, c) = require_2d(parts[0], "concat_rows")?;
    let mut rows = 0;
    for p in parts {
        let (r, pc) = require_2d(p, "concat_rows")?;
        if pc != c {
            return Err(Error::Dimension {
                op: "concat_rows",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        rows += r;
    }
    let mut out = Vec::with_capacity(rows * c);
    for p in parts {
        out.extend_from_slice(p.data());
    }
    let tape = joint_tape(parts)?;
    let ids = tracked_ids(parts);
    // (offset, len) per tracked part, in operand order.
    let mut spans = Vec::new();
    let mut off = 0;
    for p in parts {
        let len = p.numel();
        if p.is_tracked() {
            spans.push((off, len));
        }
        off += len;
    }
    let vjp = Box::new(move |g: &[f64]| {
        spans.iter().map(|&(o, l)| g[o..o + l].to_vec()).collect()
    });
    Ok(record(tape, vec![rows, c], out, ids, vjp))
}

/// Horizontal concatenation of 2-D tensors with equal row counts.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Input("concat_cols: no operands".into()));
    }
    let (r, _) = require_2d(parts[0], "concat_cols")?;
    let mut cols = 0;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pr, pc) = require_2d(p, "concat_cols")?;
        if pr != r {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        widths.push(pc);
        cols += pc;
    }
    let mut out = vec![0.0; r * cols];
    let mut coff = 0;
    for (p, &pw) in parts.iter().zip(&widths) {
        let d = p.data();
        for i in 0..r {
            out[i * cols + coff..i * cols + coff + pw].copy_from_slice(&d[i * pw..(i + 1) * pw]);
        }
        coff += pw;
    }
    let tape = joint_tape(parts)?;
    let ids = tracked_ids(parts);
    let mut spans = Vec::new();
    let mut coff = 0;
    for (p, &pw) in parts.iter().zip(&widths) {
        if p.is_tracked() {
            spans.push((coff, pw));
        }
        coff += pw;
    }
    let vjp = Box::new(move |g: &[f64]| {
        spans
            .iter()
            .map(|&(o, pw)| {
                let mut dp = vec![0.0; r * pw];
                for i in 0..r {
                    dp[i * pw..(i + 1) * pw].copy_from_slice(&g[i * cols + o..i * cols + o + pw]);
                }
                dp
            })
            .collect()
    });
    Ok(record(tape, vec![r, cols], out, ids, vjp))
}

/// Convenience: watches `x` on a fresh tape and returns both.
pub fn watched(x: &Tensor) -> (Tape, Tensor) {
    let tape = Tape::new();
    let xt = tape.watch(x);
    (tape, xt)
}

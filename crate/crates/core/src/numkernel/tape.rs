//! Reverse-mode gradient tape over [`Tensor2`] values.
//!
//! Every operation appends a node holding its forward value and enough
//! context to run its vector-Jacobian product. [`Tape::backward`] walks the
//! nodes in reverse and returns a gradient for every registered parameter,
//! zero-filled for parameters the loss never touched.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::activation::{gelu_approx, gelu_approx_grad, logistic, talu};
use super::tensor::{dot, Tensor2};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Gelu(Var),
    Talu(Var),
    Logistic(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor2,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Rows {
        src: Var,
        start: usize,
    },
    Cols {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MulConst(Var, Tensor2),
    ExpandCols(Var),
    ExpandRows(Var),
    RepeatRow(Var),
    Bce {
        pred: Var,
        cells: Vec<(usize, f64)>,
        eps: f64,
    },
    LinComb(Vec<(Var, f64)>),
}

struct Node<'p> {
    value: Cow<'p, Tensor2>,
    op: Op,
}

/// Single-writer computation record. Parameter values are borrowed, so a
/// tape never outlives the model it differentiates.
pub struct Tape<'p> {
    id: u64,
    nodes: Vec<Node<'p>>,
    params: Vec<usize>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    nodes: Vec<Option<Tensor2>>,
    params: Vec<Tensor2>,
}

impl Gradients {
    /// Gradients in parameter registration order.
    pub fn params(&self) -> &[Tensor2] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Tensor2> {
        self.params
    }

    /// Gradient with respect to any node, `None` if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor2> {
        if var.tape != self.tape {
            return None;
        }
        self.nodes.get(var.idx).and_then(Option::as_ref)
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(())
    }

    fn push(&mut self, value: Cow<'p, Tensor2>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn owned(&mut self, value: Tensor2, op: Op) -> Var {
        self.push(Cow::Owned(value), op)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        debug_assert_eq!(v.tape, self.id);
        &self.nodes[v.idx].value
    }

    /// Constant leaf; receives a gradient but is not a parameter.
    pub fn input(&mut self, value: Tensor2) -> Var {
        self.owned(value, Op::Input)
    }

    /// Registers a parameter. Registration order defines the order of
    /// [`Gradients::params`].
    pub fn param(&mut self, value: &'p Tensor2) -> Var {
        let v = self.push(Cow::Borrowed(value), Op::Param);
        self.params.push(v.idx);
        v
    }

    /// Registers an owned parameter value.
    pub fn param_owned(&mut self, value: Tensor2) -> Var {
        let v = self.owned(value, Op::Param);
        self.params.push(v.idx);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.owned(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.owned(out, Op::MatMulT(a, b)))
    }

    /// Adds a `1 x c` bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.check(a)?;
        self.check(bias)?;
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::shape("add_bias", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.owned(out, Op::AddBias(a, bias)))
    }

    /// `x Wᵀ + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul_t(x, w)?;
        self.add_bias(xw, b)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor2> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        av.zip_map(bv, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.owned(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.owned(out, Op::Sub(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.owned(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|x| x * factor);
        Ok(self.owned(out, Op::Scale(a, factor)))
    }

    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|x| 1.0 - x);
        Ok(self.owned(out, Op::OneMinus(a)))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(gelu_approx);
        Ok(self.owned(out, Op::Gelu(a)))
    }

    pub fn talu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(talu);
        Ok(self.owned(out, Op::Talu(a)))
    }

    pub fn logistic(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(logistic);
        Ok(self.owned(out, Op::Logistic(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.owned(out, Op::SoftmaxRows(a)))
    }

    /// Row-wise layer normalization with `1 x c` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let c = xv.cols();
        if gv.shape() != (1, c) || bv.shape() != (1, c) {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let mut xhat = Tensor2::zeros(xv.rows(), c);
        let mut out = Tensor2::zeros(xv.rows(), c);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for k in 0..c {
                let h = (row[k] - mean) * is;
                xhat.set(r, k, h);
                out.set(r, k, h * gv.data()[k] + bv.data()[k]);
            }
        }
        Ok(self.owned(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        let tv = self.value(table);
        let mut out = Tensor2::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= tv.rows() {
                return Err(Error::IdOutOfRange {
                    id,
                    vocab: tv.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        Ok(self.owned(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Contiguous row block `[start, start + len)`.
    pub fn rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        self.check(src)?;
        let sv = self.value(src);
        if start + len > sv.rows() {
            return Err(Error::shape("rows", sv.shape(), (start + len, sv.cols())));
        }
        let c = sv.cols();
        let out = Tensor2::from_vec(len, c, sv.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.owned(out, Op::Rows { src, start }))
    }

    /// Contiguous column block `[start, start + len)`.
    pub fn cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        self.check(src)?;
        let sv = self.value(src);
        if start + len > sv.cols() {
            return Err(Error::shape("cols", sv.shape(), (sv.rows(), start + len)));
        }
        let mut out = Tensor2::zeros(sv.rows(), len);
        for r in 0..sv.rows() {
            out.row_mut(r)
                .copy_from_slice(&sv.row(r)[start..start + len]);
        }
        Ok(self.owned(out, Op::Cols { src, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Config("concat of zero tensors".into()));
        };
        for &p in parts {
            self.check(p)?;
        }
        let rows = self.value(first).rows();
        let mut width = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(first).shape(),
                    pv.shape(),
                ));
            }
            width += pv.cols();
        }
        let mut out = Tensor2::zeros(rows, width);
        for r in 0..rows {
            let mut at = 0;
            for &p in parts {
                let pv = self.value(p);
                out.row_mut(r)[at..at + pv.cols()].copy_from_slice(pv.row(r));
                at += pv.cols();
            }
        }
        Ok(self.owned(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Element-wise product with a constant (dropout masks, validity masks).
    pub fn mul_const(&mut self, a: Var, mask: Tensor2) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).zip_map(&mask, |x, m| x * m)?;
        Ok(self.owned(out, Op::MulConst(a, mask)))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: rand::Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        self.check(a)?;
        if rate <= 0.0 {
            return Ok(a);
        }
        let (r, c) = self.value(a).shape();
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..r * c)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(a, Tensor2::from_vec(r, c, mask)?)
    }

    /// `l x 1` column to `l x n`, `out[i][j] = a[i]`.
    pub fn expand_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        if av.cols() != 1 {
            return Err(Error::shape("expand_cols", av.shape(), (av.rows(), 1)));
        }
        let mut out = Tensor2::zeros(av.rows(), n);
        for i in 0..av.rows() {
            out.row_mut(i).fill(av.data()[i]);
        }
        Ok(self.owned(out, Op::ExpandCols(a)))
    }

    /// `l x 1` column to `n x l`, `out[i][j] = a[j]`.
    pub fn expand_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        if av.cols() != 1 {
            return Err(Error::shape("expand_rows", av.shape(), (av.rows(), 1)));
        }
        let mut out = Tensor2::zeros(n, av.rows());
        for i in 0..n {
            out.row_mut(i).copy_from_slice(av.data());
        }
        Ok(self.owned(out, Op::ExpandRows(a)))
    }

    /// `1 x c` row repeated `n` times.
    pub fn repeat_row(&mut self, a: Var, n: usize) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        if av.rows() != 1 {
            return Err(Error::shape("repeat_row", av.shape(), (1, av.cols())));
        }
        let mut out = Tensor2::zeros(n, av.cols());
        for i in 0..n {
            out.row_mut(i).copy_from_slice(av.data());
        }
        Ok(self.owned(out, Op::RepeatRow(a)))
    }

    /// Mean binary cross-entropy over the given flat cells of `pred`, with
    /// predictions clamped to `[eps, 1 - eps]`. Returns a `1 x 1` node, or
    /// `None` when `cells` is empty.
    pub fn bce(&mut self, pred: Var, cells: &[(usize, f64)], eps: f64) -> Result<Option<Var>> {
        self.check(pred)?;
        if cells.is_empty() {
            return Ok(None);
        }
        let pv = self.value(pred);
        let mut total = 0.0;
        for &(k, y) in cells {
            if k >= pv.len() {
                return Err(Error::shape("bce", pv.shape(), (k, 1)));
            }
            let x = pv.data()[k].clamp(eps, 1.0 - eps);
            total -= y * x.ln() + (1.0 - y) * (1.0 - x).ln();
        }
        let loss = total / cells.len() as f64;
        Ok(Some(self.owned(
            Tensor2::scalar(loss),
            Op::Bce {
                pred,
                cells: cells.to_vec(),
                eps,
            },
        )))
    }

    /// `Σ wᵢ · vᵢ` over same-shaped nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::Config("linear combination of zero terms".into()));
        };
        self.check(first)?;
        let shape = self.value(first).shape();
        let mut out = Tensor2::zeros(shape.0, shape.1);
        for &(v, w) in terms {
            self.check(v)?;
            let vv = self.value(v);
            if vv.shape() != shape {
                return Err(Error::shape("lin_comb", shape, vv.shape()));
            }
            out.add_scaled(vv, w);
        }
        Ok(self.owned(out, Op::LinComb(terms.to_vec())))
    }

    /// Reverse pass from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NotScalar {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor2::scalar(1.0));

        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .params
            .iter()
            .map(|&idx| match &grads[idx] {
                Some(g) => g.clone(),
                None => {
                    let (r, c) = self.nodes[idx].value.shape();
                    Tensor2::zeros(r, c)
                }
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let node = &self.nodes[idx];
        let out = &*node.value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.matmul_t(bv).expect("shape"));
                accumulate(grads, *b, av.t_matmul(g).expect("shape"));
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.matmul(bv).expect("shape"));
                accumulate(grads, *b, g.t_matmul(av).expect("shape"));
            }
            Op::AddBias(a, bias) => {
                let mut gb = Tensor2::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (acc, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *bias, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.zip_map(bv, |x, y| x * y).expect("shape"));
                accumulate(grads, *b, g.zip_map(av, |x, y| x * y).expect("shape"));
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.map(|v| v * f)),
            Op::OneMinus(a) => accumulate(grads, *a, g.map(|v| -v)),
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d = g
                    .zip_map(av, |gv, x| gv * gelu_approx_grad(x))
                    .expect("shape");
                accumulate(grads, *a, d);
            }
            Op::Talu(a) => {
                let d = g
                    .zip_map(out, |gv, y| gv * 2.0 * y * (1.0 - y))
                    .expect("shape");
                accumulate(grads, *a, d);
            }
            Op::Logistic(a) => {
                let d = g.zip_map(out, |gv, y| gv * y * (1.0 - y)).expect("shape");
                accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = Tensor2::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let inner = dot(y, gr);
                    for (k, dv) in d.row_mut(r).iter_mut().enumerate() {
                        *dv = y[k] * (gr[k] - inner);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let c = out.cols();
                let mut dgamma = Tensor2::zeros(1, c);
                let mut dbeta = Tensor2::zeros(1, c);
                let mut dx = Tensor2::zeros(out.rows(), c);
                for r in 0..out.rows() {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for k in 0..c {
                        dgamma.data_mut()[k] += gr[k] * hr[k];
                        dbeta.data_mut()[k] += gr[k];
                        let dh = gr[k] * gv.data()[k];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[k];
                    }
                    let n = c as f64;
                    for k in 0..c {
                        let dh = gr[k] * gv.data()[k];
                        dx.set(
                            r,
                            k,
                            inv_std[r] * (dh - sum_dh / n - hr[k] * sum_dh_h / n),
                        );
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::Gather { table, ids } => {
                let (tr, tc) = self.value(*table).shape();
                let mut d = Tensor2::zeros(tr, tc);
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, &v) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                accumulate(grads, *table, d);
            }
            Op::Rows { src, start } => {
                let (sr, sc) = self.value(*src).shape();
                let mut d = Tensor2::zeros(sr, sc);
                d.data_mut()[start * sc..start * sc + g.len()].copy_from_slice(g.data());
                accumulate(grads, *src, d);
            }
            Op::Cols { src, start } => {
                let (sr, sc) = self.value(*src).shape();
                let mut d = Tensor2::zeros(sr, sc);
                for r in 0..sr {
                    d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *src, d);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).shape();
                    let mut d = Tensor2::zeros(pr, pc);
                    for r in 0..pr {
                        d.row_mut(r).copy_from_slice(&g.row(r)[at..at + pc]);
                    }
                    at += pc;
                    accumulate(grads, p, d);
                }
            }
            Op::MulConst(a, mask) => {
                accumulate(grads, *a, g.zip_map(mask, |x, m| x * m).expect("shape"));
            }
            Op::ExpandCols(a) => {
                let mut d = Tensor2::zeros(g.rows(), 1);
                for i in 0..g.rows() {
                    d.data_mut()[i] = g.row(i).iter().sum();
                }
                accumulate(grads, *a, d);
            }
            Op::ExpandRows(a) => {
                let mut d = Tensor2::zeros(g.cols(), 1);
                for i in 0..g.rows() {
                    for (acc, &v) in d.data_mut().iter_mut().zip(g.row(i)) {
                        *acc += v;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::RepeatRow(a) => {
                let mut d = Tensor2::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (acc, &v) in d.data_mut().iter_mut().zip(g.row(i)) {
                        *acc += v;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::Bce { pred, cells, eps } => {
                let pv = self.value(*pred);
                let mut d = Tensor2::zeros(pv.rows(), pv.cols());
                let scale = g.data()[0] / cells.len() as f64;
                for &(k, y) in cells {
                    let x = pv.data()[k];
                    // clamp has zero slope outside the interval
                    if x < *eps || x > 1.0 - eps {
                        continue;
                    }
                    d.data_mut()[k] += scale * (-(y / x) + (1.0 - y) / (1.0 - x));
                }
                accumulate(grads, *pred, d);
            }
            Op::LinComb(terms) => {
                for &(v, w) in terms {
                    accumulate(grads, v, g.map(|x| x * w));
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], v: Var, d: Tensor2) {
    match &mut grads[v.idx] {
        Some(acc) => acc.add_scaled(&d, 1.0),
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_gradient() {
        let p = Tensor2::scalar(3.0);
        let mut tape = Tape::new();
        let x = tape.param(&p);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.params()[0].data(), &[6.0]);
    }

    #[test]
    fn talu_gradient_at_zero() {
        let p = Tensor2::scalar(0.0);
        let mut tape = Tape::new();
        let x = tape.param(&p);
        let y = tape.talu(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.params()[0].data(), &[0.5]);
    }

    #[test]
    fn untouched_parameter_gets_zero() {
        let a = Tensor2::scalar(2.0);
        let b = Tensor2::from_rows(&[vec![1.0, 2.0]]);
        let mut tape = Tape::new();
        let x = tape.param(&a);
        let _unused = tape.param(&b);
        let y = tape.scale(x, 4.0).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.params()[0].data(), &[4.0]);
        assert_eq!(g.params()[1], Tensor2::zeros(1, 2));
    }

    #[test]
    fn foreign_loss_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.input(Tensor2::scalar(1.0));
        let _ = b.input(Tensor2::scalar(1.0));
        assert!(matches!(b.backward(x), Err(Error::NotOnTape)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.input(Tensor2::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn empty_bce_is_none() {
        let mut t = Tape::new();
        let x = t.input(Tensor2::zeros(1, 2));
        assert!(t.bce(x, &[], 1e-7).unwrap().is_none());
    }

    /// Every op composed into one scalar, checked against central differences.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![
            Tensor2::uniform(4, 3, 0.8, &mut rng), // x
            Tensor2::uniform(3, 3, 0.8, &mut rng), // w
            Tensor2::uniform(1, 3, 0.3, &mut rng), // b
            Tensor2::uniform(1, 3, 0.5, &mut rng), // gamma
            Tensor2::uniform(1, 3, 0.5, &mut rng), // beta
            Tensor2::uniform(5, 3, 0.5, &mut rng), // table
        ];
        let loss_of = |ps: &[Tensor2]| -> (f64, Vec<Tensor2>) {
            let mut t = Tape::new();
            let v: Vec<Var> = ps.iter().map(|p| t.param(p)).collect();
            let h = t.affine(v[0], v[1], v[2]).unwrap();
            let h = t.gelu(h).unwrap();
            let e = t.gather(v[5], &[1, 4, 1, 0]).unwrap();
            let h = t.add(h, e).unwrap();
            let h = t.layer_norm(h, v[3], v[4], 1e-5).unwrap();
            let a = t.matmul_t(h, h).unwrap();
            let a = t.softmax_rows(a).unwrap();
            let z = t.matmul(a, h).unwrap();
            let left = t.cols(z, 0, 2).unwrap();
            let right = t.cols(z, 2, 1).unwrap();
            let cat = t.concat_cols(&[right, left]).unwrap();
            let g = t.logistic(cat).unwrap();
            let og = t.one_minus(g).unwrap();
            let mix = t.mul(g, cat).unwrap();
            let mix = t.sub(mix, og).unwrap();
            let cls = t.rows(mix, 0, 1).unwrap();
            let rep = t.repeat_row(cls, 4).unwrap();
            let s = t.matmul_t(mix, rep).unwrap();
            let col = t.cols(s, 1, 1).unwrap();
            let p1 = t.expand_cols(col, 4).unwrap();
            let p2 = t.expand_rows(col, 4).unwrap();
            let m = t.lin_comb(&[(p1, 0.5), (p2, 0.5), (s, 0.25)]).unwrap();
            let m = t.scale(m, 0.3).unwrap();
            let m = t.talu(m).unwrap();
            let m = t.mul_const(m, Tensor2::filled(4, 4, 0.9)).unwrap();
            let cells: Vec<(usize, f64)> =
                (0..16).map(|k| (k, if k % 3 == 0 { 1.0 } else { 0.0 })).collect();
            let loss = t.bce(m, &cells, 1e-7).unwrap().unwrap();
            let val = t.value(loss).data()[0];
            let g = t.backward(loss).unwrap();
            (val, g.into_params())
        };
        let (_, analytic) = loss_of(&params);
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            for k in 0..p.len() {
                let mut plus = params.clone();
                plus[pi].data_mut()[k] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[k] -= h;
                let fd = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
                let an = analytic[pi].data()[k];
                let rel = (an - fd).abs() / fd.abs().max(1.0);
                assert!(rel < 1e-6, "param {pi}[{k}]: analytic {an}, fd {fd}");
            }
        }
    }
}

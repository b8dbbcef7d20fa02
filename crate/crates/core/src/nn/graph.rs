//! Reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Graph`] records every op eagerly; `backward` walks the tape in
//! reverse. Parameters enter through [`Graph::param`] and their gradients are
//! collected into a [`Grads`] buffer afterwards.

use super::kernels;
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Clamp(Var, T, T),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<Vec<T>>,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<Option<usize>>,
    },
    RowNormalize(Var),
    Sum(Var),
    Dot(Var, Tensor<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (e.g. pixels for a sensitivity probe).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = kernels::matmul(self.value(a), self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// Adds a `1×n` bias row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let mut out = self.value(x).clone();
        kernels::add_row_bias(&mut out, self.value(bias));
        let ng = self.ng(&[x, bias]);
        self.push(out, Op::AddRow(x, bias), ng)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shapes");
        out.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shapes");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect();
        let out = Tensor {
            rows: va.rows,
            cols: va.cols,
            data,
        };
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (out, mean, rstd) =
            kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta));
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            ng,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::tanh);
        let ng = self.ng(&[x]);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        let ng = self.ng(&[x]);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        let ng = self.ng(&[x]);
        self.push(out, Op::Exp(x), ng)
    }

    /// Elementwise clamp; the gradient is zero where the input was clipped.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        let ng = self.ng(&[x]);
        self.push(out, Op::Clamp(x, lo, hi), ng)
    }

    /// Gathers rows of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        let ng = self.ng(&[table]);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (out, probs) =
            kernels::attention(self.value(q), self.value(k), self.value(v), heads, causal);
        let ng = self.ng(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols rows");
            for r in 0..rows {
                out.row_mut(r)[off..off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows cols");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        let ng = self.ng(parts);
        self.push(Tensor { rows, cols, data }, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        let ng = self.ng(&[x]);
        self.push(out, Op::SliceRows(x, start), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.rows, len, |r, c| t.at(r, start + c));
        let ng = self.ng(&[x]);
        self.push(out, Op::SliceCols(x, start), ng)
    }

    /// Row-major reinterpretation with the same element count.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), rows * cols, "reshape size");
        let out = Tensor {
            rows,
            cols,
            data: t.data.clone(),
        };
        let ng = self.ng(&[x]);
        self.push(out, Op::Reshape(x), ng)
    }

    /// Summed cross-entropy over rows with a target; `None` rows are masked.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len(), "one target per row");
        let mut total = T::zero();
        let mut probs = Vec::with_capacity(targets.len());
        for (r, t) in targets.iter().enumerate() {
            match t {
                Some(t) => {
                    let row = l.row(r);
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let z: T = row.iter().map(|&v| (v - max).exp()).sum();
                    let lse = max + z.ln();
                    total = total + lse - row[*t];
                    probs.push(row.iter().map(|&v| (v - lse).exp()).collect());
                }
                None => probs.push(Vec::new()),
            }
        }
        let ng = self.ng(&[logits]);
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Column-wise max over the rows assigned to each group. Empty groups are zero.
    pub fn segment_max(&mut self, x: Var, groups: &[usize], n_groups: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.rows, groups.len(), "one group per row");
        let mut out = Tensor::zeros(n_groups, t.cols);
        let mut argmax: Vec<Option<usize>> = vec![None; n_groups * t.cols];
        for (r, &g) in groups.iter().enumerate() {
            for c in 0..t.cols {
                let slot = g * t.cols + c;
                let v = t.at(r, c);
                match argmax[slot] {
                    Some(_) if v <= out.data[slot] => {}
                    _ => {
                        out.data[slot] = v;
                        argmax[slot] = Some(r);
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::SegmentMax { x, argmax }, ng)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = t.clone();
        for r in 0..t.rows {
            let n = t.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
            out.row_mut(r).iter_mut().for_each(|v| *v = *v / n);
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::RowNormalize(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(out, Op::Sum(x), ng)
    }

    /// `Σ x ⊙ w` for a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, w: Tensor<T>) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape(), w.shape(), "dot_const shapes");
        let s: T = t.data.iter().zip(&w.data).map(|(&a, &b)| a * b).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Dot(x, w), ng)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Backpropagates from a `1×1` output.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        self.backward_with(vec![(loss, Tensor::scalar(T::one()))]);
    }

    /// Backpropagates from arbitrary outputs with given upstream gradients.
    pub fn backward_with(&mut self, seeds: Vec<(Var, Tensor<T>)>) {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed shape");
            accumulate(&mut grads[v.0], g);
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    /// Adds parameter gradients from the last backward pass into `out`.
    pub fn accumulate_param_grads(&self, out: &mut Grads<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, self.grads.get(i).and_then(|g| g.as_ref())) {
                out.get_mut(*id).add_assign(g);
            }
        }
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], to: Var, g: Tensor<T>) {
        if self.nodes[to.0].needs_grad {
            accumulate(&mut grads[to.0], g);
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    // dA = G·Bᵀ
                    let mut da = Tensor::zeros(va.rows, va.cols);
                    T::gemm(
                        g.rows,
                        g.cols,
                        vb.rows,
                        &g.data,
                        (g.cols as isize, 1),
                        &vb.data,
                        (1, vb.cols as isize),
                        &mut da.data,
                        va.cols,
                        false,
                    );
                    self.send(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ·G
                    let mut db = Tensor::zeros(vb.rows, vb.cols);
                    T::gemm(
                        va.cols,
                        va.rows,
                        g.cols,
                        &va.data,
                        (1, va.cols as isize),
                        &g.data,
                        (g.cols as isize, 1),
                        &mut db.data,
                        vb.cols,
                        false,
                    );
                    self.send(grads, *b, db);
                }
            }
            Op::AddRow(x, b) => {
                self.send(grads, *x, g.clone());
                if self.nodes[b.0].needs_grad {
                    let mut db = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (acc, &v) in db.data.iter_mut().zip(g.row(r)) {
                            *acc = *acc + v;
                        }
                    }
                    self.send(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let zip = |o: &Tensor<T>| Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(&o.data).map(|(&x, &y)| x * y).collect(),
                };
                if self.nodes[a.0].needs_grad {
                    self.send(grads, *a, zip(vb));
                }
                if self.nodes[b.0].needs_grad {
                    self.send(grads, *b, zip(va));
                }
            }
            Op::Scale(x, s) => self.send(grads, *x, g.map(|v| v * *s)),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let vx = self.value(*x);
                let vg = self.value(*gamma);
                let n = T::from_usize_lossy(vx.cols);
                let mut dx = Tensor::zeros(vx.rows, vx.cols);
                let mut dgamma = Tensor::zeros(1, vx.cols);
                let mut dbeta = Tensor::zeros(1, vx.cols);
                let mut xhat = vec![T::zero(); vx.cols];
                let mut dxhat = vec![T::zero(); vx.cols];
                for r in 0..vx.rows {
                    let (row, grow) = (vx.row(r), g.row(r));
                    for c in 0..vx.cols {
                        xhat[c] = (row[c] - mean[r]) * rstd[r];
                        dxhat[c] = grow[c] * vg.data[c];
                        dgamma.data[c] = dgamma.data[c] + grow[c] * xhat[c];
                        dbeta.data[c] = dbeta.data[c] + grow[c];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() / n;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
                        *out = rstd[r] * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
                self.send(grads, *x, dx);
                self.send(grads, *gamma, dgamma);
                self.send(grads, *beta, dbeta);
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let data = g
                    .data
                    .iter()
                    .zip(&vx.data)
                    .map(|(&gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                self.send(grads, *x, Tensor { data, ..g.clone() });
            }
            Op::Tanh(x) => {
                let data = g.data.iter().zip(&y.data).map(|(&gv, &t)| gv * (T::one() - t * t)).collect();
                self.send(grads, *x, Tensor { data, ..g.clone() });
            }
            Op::Sigmoid(x) => {
                let data = g.data.iter().zip(&y.data).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                self.send(grads, *x, Tensor { data, ..g.clone() });
            }
            Op::Exp(x) => {
                let data = g.data.iter().zip(&y.data).map(|(&gv, &e)| gv * e).collect();
                self.send(grads, *x, Tensor { data, ..g.clone() });
            }
            Op::Clamp(x, lo, hi) => {
                let vx = self.value(*x);
                let data = g
                    .data
                    .iter()
                    .zip(&vx.data)
                    .map(|(&gv, &xv)| if xv < *lo || xv > *hi { T::zero() } else { gv })
                    .collect();
                self.send(grads, *x, Tensor { data, ..g.clone() });
            }
            Op::Embedding { table, ids } => {
                let vt = self.value(*table);
                let mut dt = Tensor::zeros(vt.rows, vt.cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, &v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *acc = *acc + v;
                    }
                }
                self.send(grads, *table, dt);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    *heads,
                    g,
                );
                self.send(grads, *q, dq);
                self.send(grads, *k, dk);
                self.send(grads, *v, dv);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    if self.nodes[p.0].needs_grad {
                        let dp = Tensor::from_fn(g.rows, cols, |r, c| g.at(r, off + c));
                        self.send(grads, p, dp);
                    }
                    off += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    if self.nodes[p.0].needs_grad {
                        self.send(grads, p, g.slice_rows(off, rows));
                    }
                    off += rows;
                }
            }
            Op::SliceRows(x, start) => {
                let vx = self.value(*x);
                let mut dx = Tensor::zeros(vx.rows, vx.cols);
                dx.data[start * vx.cols..(start + g.rows) * vx.cols].copy_from_slice(&g.data);
                self.send(grads, *x, dx);
            }
            Op::SliceCols(x, start) => {
                let vx = self.value(*x);
                let mut dx = Tensor::zeros(vx.rows, vx.cols);
                for r in 0..g.rows {
                    dx.row_mut(r)[*start..start + g.cols].copy_from_slice(g.row(r));
                }
                self.send(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let vx = self.value(*x);
                self.send(
                    grads,
                    *x,
                    Tensor {
                        rows: vx.rows,
                        cols: vx.cols,
                        data: g.data.clone(),
                    },
                );
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vl = self.value(*logits);
                let gs = g.item();
                let mut dl = Tensor::zeros(vl.rows, vl.cols);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for (out, &p) in dl.row_mut(r).iter_mut().zip(&probs[r]) {
                            *out = gs * p;
                        }
                        *dl.at_mut(r, *t) = dl.at(r, *t) - gs;
                    }
                }
                self.send(grads, *logits, dl);
            }
            Op::SegmentMax { x, argmax } => {
                let vx = self.value(*x);
                let mut dx = Tensor::zeros(vx.rows, vx.cols);
                for (slot, src) in argmax.iter().enumerate() {
                    if let Some(r) = src {
                        let c = slot % vx.cols;
                        *dx.at_mut(*r, c) = dx.at(*r, c) + g.data[slot];
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::RowNormalize(x) => {
                let vx = self.value(*x);
                let mut dx = Tensor::zeros(vx.rows, vx.cols);
                for r in 0..vx.rows {
                    let n = vx.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let d: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
                        *out = (gr[c] - yr[c] * d) / n;
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::Sum(x) => {
                let vx = self.value(*x);
                self.send(grads, *x, Tensor::filled(vx.rows, vx.cols, g.item()));
            }
            Op::Dot(x, w) => {
                let gs = g.item();
                self.send(grads, *x, w.map(|v| v * gs));
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

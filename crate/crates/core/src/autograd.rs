//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes that do not
//! depend on a trainable leaf are marked as not needing gradients and are
//! skipped during the backward sweep, so frozen components never receive a
//! gradient computation.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    SoftmaxRows(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        probs: Vec<Tensor<T>>,
    },
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    BceLogits {
        logits: Var,
        target: Tensor<T>,
        valid: Option<Vec<bool>>,
        count: usize,
    },
    Dice {
        logits: Var,
        target: Tensor<T>,
        valid: Option<Vec<bool>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    param_of: HashMap<Var, ParamId>,
    grad_enabled: bool,
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
            params: HashMap::new(),
            param_of: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph in which no node ever needs a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (used for inputs under test).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter; frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = store.trainable(id);
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.params.insert(id, v);
        self.param_of.insert(v, id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), g)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::MatMulNt(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), g)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, c), "add_row shapes");
        let mut value = self.value(a).clone();
        let b = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, &y) in value.row_mut(i).iter_mut().zip(&b) {
                *x += y;
            }
        }
        let g = self.any_grad(&[a, row]);
        self.push(value, Op::AddRow(a, row), g)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, s), g)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| gelu(x).0);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Gelu(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), g)
    }

    /// Row-wise layer normalization with `1 x n` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = T::lit(1e-5);
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let n = T::lit(c as f64);
        let mut xhat = Tensor::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut value = xhat.clone();
        for i in 0..r {
            for ((o, &g), &b) in value.row_mut(i).iter_mut().zip(&gv).zip(&bv) {
                *o = *o * g + b;
            }
        }
        let g = self.any_grad(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            g,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        let g = self.any_grad(&[a]);
        self.push(value, Op::SoftmaxRows(a), g)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norms: Vec<T> = (0..xv.rows())
            .map(|i| xv.row(i).iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let value = xv.l2_normalize_rows();
        let g = self.any_grad(&[x]);
        self.push(value, Op::L2NormalizeRows { x, norms }, g)
    }

    /// `out.flat[i] = x.flat[idx[i]]`, reshaped to `rows x cols`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather output size");
        let src = self.value(x).data();
        let data: Vec<T> = idx.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_vec(rows, cols, data).expect("gather shape");
        let g = self.any_grad(&[x]);
        self.push(value, Op::Gather { x, idx }, g)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let cols = self.value(x).cols();
        let idx = rows
            .iter()
            .flat_map(|&r| (r * cols)..(r + 1) * cols)
            .collect();
        self.gather(x, idx, rows.len(), cols)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let rows: Vec<usize> = (start..start + len).collect();
        self.select_rows(x, &rows)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.value(x).shape();
        let idx = (0..r)
            .flat_map(|i| (start..start + len).map(move |j| i * c + j))
            .collect();
        self.gather(x, idx, r, len)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).shape();
        let idx = (0..c)
            .flat_map(|j| (0..r).map(move |i| i * c + j))
            .collect();
        self.gather(x, idx, c, r)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors).expect("concat_rows column mismatch");
        let g = self.any_grad(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), g)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `allowed`, when given, is a row-major `q_rows x k_rows` mask; disallowed
    /// pairs get exactly zero weight. Every query row must allow at least one key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        allowed: Option<&[bool]>,
    ) -> Var {
        let (lq, dm) = self.value(q).shape();
        let (lk, dk) = self.value(k).shape();
        let (lv, dv) = self.value(v).shape();
        assert_eq!(dm, dk, "attention q/k width");
        assert_eq!(lk, lv, "attention k/v length");
        assert!(heads > 0 && dm % heads == 0 && dv % heads == 0, "attention heads");
        if let Some(mask) = allowed {
            assert_eq!(mask.len(), lq * lk, "attention mask size");
        }
        let hd = dm / heads;
        let hv = dv / heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut out = Tensor::zeros(lq, dv);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = head_cols(self.value(q), h * hd, hd);
            let kh = head_cols(self.value(k), h * hd, hd);
            let vh = head_cols(self.value(v), h * hv, hv);
            let mut s = qh.matmul_nt(&kh);
            for (i, x) in s.data_mut().iter_mut().enumerate() {
                *x *= scale;
                if let Some(mask) = allowed {
                    if !mask[i] {
                        *x = T::neg_infinity();
                    }
                }
            }
            let p = s.softmax_rows();
            let oh = p.matmul(&vh);
            for i in 0..lq {
                out.row_mut(i)[h * hv..(h + 1) * hv].copy_from_slice(oh.row(i));
            }
            probs.push(p);
        }
        let g = self.any_grad(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
            g,
        )
    }

    /// Attention probabilities of an attention node, one matrix per head.
    pub fn attention_probs(&self, node: Var) -> Option<&[Tensor<T>]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let g = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / T::lit(t.len().max(1) as f64));
        let g = self.any_grad(&[a]);
        self.push(value, Op::Mean(a), g)
    }

    /// Frobenius norm as a `1 x 1` scalar; its gradient at zero is taken as zero.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sq_norm().sqrt());
        let g = self.any_grad(&[a]);
        self.push(value, Op::L2Norm(a), g)
    }

    /// Sum of several scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut iter = terms.iter().copied();
        let first = iter.next().expect("add_all of nothing");
        iter.fold(first, |acc, t| self.add(acc, t))
    }

    /// Mean binary cross-entropy with logits over the valid entries.
    ///
    /// `valid` masks columns (pixels) and applies to every row.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        target: Tensor<T>,
        valid: Option<Vec<bool>>,
    ) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), target.shape(), "bce target shape");
        let cols = lv.cols();
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, (&x, &y)) in lv.data().iter().zip(target.data()).enumerate() {
            if valid.as_ref().is_some_and(|m| !m[i % cols]) {
                continue;
            }
            total += bce_logit(x, y);
            count += 1;
        }
        let value = if count == 0 {
            T::zero()
        } else {
            total / T::lit(count as f64)
        };
        let g = self.any_grad(&[logits]);
        self.push(
            Tensor::scalar(value),
            Op::BceLogits {
                logits,
                target,
                valid,
                count,
            },
            g,
        )
    }

    /// Mean over rows of `1 - (2 sum(p y) + 1) / (sum(p) + sum(y) + 1)`, `p = sigmoid(logits)`.
    pub fn dice(&mut self, logits: Var, target: Tensor<T>, valid: Option<Vec<bool>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), target.shape(), "dice target shape");
        let rows = lv.rows();
        let mut total = T::zero();
        for r in 0..rows {
            let (num, den) = dice_terms(lv.row(r), target.row(r), valid.as_deref());
            total += T::one() - num / den;
        }
        let value = if rows == 0 {
            T::zero()
        } else {
            total / T::lit(rows as f64)
        };
        let g = self.any_grad(&[logits]);
        self.push(
            Tensor::scalar(value),
            Op::Dice {
                logits,
                target,
                valid,
            },
            g,
        )
    }

    /// Weighted-mean softmax cross-entropy over rows with a target.
    ///
    /// Returns `sum_i w_i ce_i / sum_i w_i`, or zero when the total weight is zero.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<Option<usize>>,
        weights: Vec<T>,
    ) -> Var {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.rows(), "cross_entropy targets");
        assert_eq!(weights.len(), lv.rows(), "cross_entropy weights");
        let mut total = T::zero();
        let mut wsum = T::zero();
        for (r, (t, &w)) in targets.iter().zip(&weights).enumerate() {
            if let Some(t) = *t {
                let row = lv.row(r);
                total += w * (log_sum_exp(row) - row[t]);
                wsum += w;
            }
        }
        let value = if wsum > T::zero() {
            total / wsum
        } else {
            T::zero()
        };
        let g = self.any_grad(&[logits]);
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            },
            g,
        )
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients {
            grads,
            param_of: self.param_of.clone(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, gout.matmul_nt(self.value(*b)));
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(gout));
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a b^T: da = gout b, db = gout^T a
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, gout.matmul(self.value(*b)));
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, gout.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, gout.zip_map(self.value(*b), |g, y| g * y));
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, gout.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, gout.clone());
                if self.needs_grad(*row) {
                    let mut gr = Tensor::zeros(1, gout.cols());
                    for i in 0..gout.rows() {
                        for (o, &g) in gr.data_mut().iter_mut().zip(gout.row(i)) {
                            *o += g;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, gout.scale(s));
            }
            Op::Gelu(a) => {
                let g = gout.zip_map(self.value(*a), |g, x| g * gelu(x).1);
                self.accumulate(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let g = gout.zip_map(&node.value, |g, y| g * y * (T::one() - y));
                self.accumulate(grads, *a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = xhat.shape();
                let gam = self.value(*gamma).data();
                if self.needs_grad(*x) {
                    let n = T::lit(c as f64);
                    let mut dx = Tensor::zeros(r, c);
                    for i in 0..r {
                        let go = gout.row(i);
                        let xh = xhat.row(i);
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let d = go[j] * gam[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let out = dx.row_mut(i);
                        for j in 0..c {
                            let d = go[j] * gam[j];
                            out[j] = inv_std[i] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs_grad(*gamma) || self.needs_grad(*beta) {
                    let mut dg = Tensor::zeros(1, c);
                    let mut db = Tensor::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            let g = gout.get(i, j);
                            dg.data_mut()[j] += g * xhat.get(i, j);
                            db.data_mut()[j] += g;
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = gout.row(i);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    if norms[i] == T::zero() {
                        continue;
                    }
                    let yr = y.row(i);
                    let gr = gout.row(i);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * dot) / norms[i];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gather { x, idx } => {
                let (r, c) = self.value(*x).shape();
                let mut dx = Tensor::zeros(r, c);
                let d = dx.data_mut();
                for (&src, &g) in idx.iter().zip(gout.data()) {
                    d[src] += g;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs_grad(p) {
                        self.accumulate(grads, p, gout.slice_rows(offset, rows));
                    }
                    offset += rows;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            } => {
                let (lq, dm) = self.value(*q).shape();
                let (lk, _) = self.value(*k).shape();
                let dv = self.value(*v).cols();
                let hd = dm / heads;
                let hv = dv / heads;
                let mut dq = Tensor::zeros(lq, dm);
                let mut dk = Tensor::zeros(lk, dm);
                let mut dvv = Tensor::zeros(lk, dv);
                for (h, p) in probs.iter().enumerate() {
                    let qh = head_cols(self.value(*q), h * hd, hd);
                    let kh = head_cols(self.value(*k), h * hd, hd);
                    let vh = head_cols(self.value(*v), h * hv, hv);
                    let goh = head_cols(gout, h * hv, hv);
                    let dp = goh.matmul_nt(&vh);
                    let dvh = p.matmul_tn(&goh);
                    let mut ds = Tensor::zeros(lq, lk);
                    for i in 0..lq {
                        let pr = p.row(i);
                        let dr = dp.row(i);
                        let dot: T = pr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for ((o, &pv), &dv) in ds.row_mut(i).iter_mut().zip(pr).zip(dr) {
                            *o = pv * (dv - dot) * *scale;
                        }
                    }
                    let dqh = ds.matmul(&kh);
                    let dkh = ds.matmul_tn(&qh);
                    scatter_cols(&mut dq, &dqh, h * hd);
                    scatter_cols(&mut dk, &dkh, h * hd);
                    scatter_cols(&mut dvv, &dvh, h * hv);
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dvv);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::filled(r, c, gout.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                let g = gout.item() / T::lit((r * c).max(1) as f64);
                self.accumulate(grads, *a, Tensor::filled(r, c, g));
            }
            Op::L2Norm(a) => {
                let n = node.value.item();
                let g = gout.item();
                let d = if n == T::zero() {
                    self.value(*a).map(|_| T::zero())
                } else {
                    self.value(*a).map(|x| g * x / n)
                };
                self.accumulate(grads, *a, d);
            }
            Op::BceLogits {
                logits,
                target,
                valid,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let lv = self.value(*logits);
                let cols = lv.cols();
                let scale = gout.item() / T::lit(*count as f64);
                let mut d = Tensor::zeros(lv.rows(), cols);
                for (i, ((o, &x), &y)) in d
                    .data_mut()
                    .iter_mut()
                    .zip(lv.data())
                    .zip(target.data())
                    .enumerate()
                {
                    if valid.as_ref().is_some_and(|m| !m[i % cols]) {
                        continue;
                    }
                    *o = (sigmoid(x) - y) * scale;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::Dice {
                logits,
                target,
                valid,
            } => {
                let lv = self.value(*logits);
                let (rows, cols) = lv.shape();
                if rows == 0 {
                    return;
                }
                let scale = gout.item() / T::lit(rows as f64);
                let two = T::lit(2.0);
                let mut d = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let (num, den) = dice_terms(lv.row(r), target.row(r), valid.as_deref());
                    let out = d.row_mut(r);
                    for j in 0..cols {
                        if valid.as_ref().is_some_and(|m| !m[j]) {
                            continue;
                        }
                        let p = sigmoid(lv.get(r, j));
                        let y = target.get(r, j);
                        let dl_dp = -(two * y * den - num) / (den * den);
                        out[j] = scale * dl_dp * p * (T::one() - p);
                    }
                }
                self.accumulate(grads, *logits, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let lv = self.value(*logits);
                let wsum: T = targets
                    .iter()
                    .zip(weights)
                    .filter(|(t, _)| t.is_some())
                    .map(|(_, &w)| w)
                    .sum();
                if wsum <= T::zero() {
                    return;
                }
                let mut d = Tensor::zeros(lv.rows(), lv.cols());
                for (r, (t, &w)) in targets.iter().zip(weights).enumerate() {
                    let Some(t) = *t else { continue };
                    let mut p = lv.row(r).to_vec();
                    tensor::softmax_in_place(&mut p);
                    p[t] -= T::one();
                    let s = gout.item() * w / wsum;
                    for (o, pv) in d.row_mut(r).iter_mut().zip(p) {
                        *o = pv * s;
                    }
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_of: HashMap<Var, ParamId>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable parameter reached by the sweep.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out: Vec<(ParamId, &Tensor<T>)> = self
            .param_of
            .iter()
            .filter_map(|(v, &id)| self.wrt(*v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn head_cols<T: Scalar>(t: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    if start == 0 && len == t.cols() {
        return t.clone();
    }
    let mut out = Tensor::zeros(t.rows(), len);
    for i in 0..t.rows() {
        out.row_mut(i).copy_from_slice(&t.row(i)[start..start + len]);
    }
    out
}

fn scatter_cols<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, start: usize) {
    for i in 0..src.rows() {
        for (o, &v) in dst.row_mut(i)[start..start + src.cols()]
            .iter_mut()
            .zip(src.row(i))
        {
            *o += v;
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Tanh-approximated GELU and its derivative.
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (y, dy)
}

fn bce_logit<T: Scalar>(x: T, y: T) -> T {
    x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln()
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

fn dice_terms<T: Scalar>(logits: &[T], target: &[T], valid: Option<&[bool]>) -> (T, T) {
    let mut inter = T::zero();
    let mut psum = T::zero();
    let mut ysum = T::zero();
    for (j, (&x, &y)) in logits.iter().zip(target).enumerate() {
        if valid.is_some_and(|m| !m[j]) {
            continue;
        }
        let p = sigmoid(x);
        inter += p * y;
        psum += p;
        ysum += y;
    }
    (T::lit(2.0) * inter + T::one(), psum + ysum + T::one())
}

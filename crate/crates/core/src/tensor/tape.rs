use super::kernels::{axis_split, gemm_nn, gemm_nt, gemm_tn};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        // per row: normalized input and reciprocal std
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    KlSoftTargets {
        student: Var,
        tau: T,
        student_probs: Vec<T>,
        teacher_probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations in execution order; node order is therefore a
/// topological order of the computation.
///
/// A tape and the values on it belong to one thread. Independent tapes on
/// different threads share nothing.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of length `len` when nothing flowed to it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<T> {
        self.get(var)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); len])
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [m, n] => Ok((m, n)),
        _ => Err(Error::shape(op, shape, &[0, 0])),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: Tensor {
                grad: None,
                ..tensor
            },
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul", self.shape(a))?;
        let (k2, n) = rank2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rank2("transpose", self.shape(x))?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `x + bias` with `bias` broadcast over every row of `x`'s last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let out = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::Scale(x, c), &[x]))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::Gelu(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                op: "softmax",
                index: axis,
                len: shape.len(),
            });
        }
        let mut out = self.value(x).data().to_vec();
        let (outer, extent, inner) = axis_split(&shape, axis);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * extent * inner + j * inner + i;
                let max = (0..extent)
                    .map(|j| out[at(j)])
                    .fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..extent {
                    let e = (out[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..extent {
                    out[at(j)] /= sum;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes every row over the last axis (population variance, `eps`
    /// inside the square root), then applies `gamma`/`beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::param("layernorm on a scalar"))?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("layernorm", &shape, self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = self.value(x).numel() / d;
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        let dn = T::from_usize(d);
        for (r, row) in self.value(x).data().chunks(d).enumerate() {
            // Constant rows take the exact mean so they normalize to zeros.
            let mean = if row.iter().all(|&v| v == row[0]) {
                row[0]
            } else {
                row.iter().copied().sum::<T>() / dn
            };
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                op: "mean",
                index: axis,
                len: shape.len(),
            });
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let inv = T::one() / T::from_usize(extent);
        for o in 0..outer {
            for j in 0..extent {
                for i in 0..inner {
                    out[o * inner + i] += src[o * extent * inner + j * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut new_shape = shape;
        new_shape.remove(axis);
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::Mean { x, axis }, &[x]))
    }

    /// Selects rows `idx` (strictly increasing) of a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = rank2("gather_rows", self.shape(x))?;
        if idx.is_empty() {
            return Err(Error::param("gather_rows with no indices"));
        }
        for (pos, &i) in idx.iter().enumerate() {
            if i >= m {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    len: m,
                });
            }
            if pos > 0 && idx[pos - 1] >= i {
                return Err(Error::param("gather_rows indices must be strictly increasing"));
            }
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(vec![idx.len(), n], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = rank2("slice_cols", self.shape(x))?;
        if len == 0 || start + len > n {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let value = Tensor::new(vec![m, len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::param("concat of nothing"))?;
        let (m, _) = rank2("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = rank2("concat_cols", self.shape(p))?;
            if pm != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::param("concat of nothing"))?;
        let (_, n) = rank2("concat_rows", self.shape(first))?;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = rank2("concat_rows", self.shape(p))?;
            if pn != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pm;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, n], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = rank2("cross_entropy", self.shape(logits))?;
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                len: c,
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for (r, row) in z.chunks(c).enumerate() {
            let lse = log_sum_exp(row);
            loss += lse - row[labels[r]];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        loss /= T::from_usize(b);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// `τ² · mean_b KL(softmax(teacher/τ) ‖ softmax(student/τ))`.
    ///
    /// `teacher` is read as a constant: no gradient ever flows into it.
    pub fn kl_soft_targets(&mut self, student: Var, teacher: Var, tau: T) -> Result<Var> {
        if !(tau > T::zero()) {
            return Err(Error::param("temperature must be positive"));
        }
        if self.shape(student) != self.shape(teacher) {
            return Err(Error::shape("kl_soft_targets", self.shape(student), self.shape(teacher)));
        }
        let (b, c) = rank2("kl_soft_targets", self.shape(student))?;
        let zs = self.value(student).data();
        let zt = self.value(teacher).data();
        let mut ps = vec![T::zero(); b * c];
        let mut pt = vec![T::zero(); b * c];
        let mut loss = T::zero();
        let mut s_row = vec![T::zero(); c];
        let mut t_row = vec![T::zero(); c];
        for r in 0..b {
            for j in 0..c {
                s_row[j] = zs[r * c + j] / tau;
                t_row[j] = zt[r * c + j] / tau;
            }
            let s_lse = log_sum_exp(&s_row);
            let t_lse = log_sum_exp(&t_row);
            for j in 0..c {
                let log_ps = s_row[j] - s_lse;
                let log_pt = t_row[j] - t_lse;
                let p_t = log_pt.exp();
                ps[r * c + j] = log_ps.exp();
                pt[r * c + j] = p_t;
                loss += p_t * (log_pt - log_ps);
            }
        }
        loss = loss * tau * tau / T::from_usize(b);
        let op = Op::KlSoftTargets {
            student,
            tau,
            student_probs: ps,
            teacher_probs: pt,
        };
        // only the student input participates in gradient tracking
        Ok(self.push(Tensor::scalar(loss), op, &[student]))
    }

    /// Reverse pass from a one-element `loss`. Every node is visited once,
    /// last to first; gradients accumulate additively across fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.apply_rule(id, &g, &mut grads)?;
        }
        // Only leaf gradients are of interest to callers; interior buffers
        // were consumed above.
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(slot);
    }

    fn apply_rule(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rank2("matmul", self.shape(*a))?;
                let (_, n) = rank2("matmul", self.shape(*b))?;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                self.accumulate(grads, *a, |ga| gemm_nt(g, bv, ga, m, n, k));
                self.accumulate(grads, *b, |gb| gemm_tn(av, g, gb, m, k, n));
            }
            Op::Transpose(x) => {
                let (m, n) = rank2("transpose", self.shape(*x))?;
                self.accumulate(grads, *x, |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).numel();
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, |gx| {
                    for (d, &u) in gx.iter_mut().zip(g) {
                        *d += u * c;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((d, &u), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += u * gelu_grad(v);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, extent, inner) = axis_split(node.value.shape(), *axis);
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * extent * inner + j * inner + i;
                            let dot: T = (0..extent).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..extent {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let gv = self.value(*gamma).data();
                let dn = T::from_usize(d);
                self.accumulate(grads, *gamma, |gg| {
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * xrow[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for (r, (grow, xrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dy = T::zero();
                        let mut mean_dy_xhat = T::zero();
                        for j in 0..d {
                            let dy = grow[j] * gv[j];
                            mean_dy += dy;
                            mean_dy_xhat += dy * xrow[j];
                        }
                        mean_dy /= dn;
                        mean_dy_xhat /= dn;
                        for j in 0..d {
                            let dy = grow[j] * gv[j];
                            gx[r * d + j] += rstd[r] * (dy - mean_dy - xrow[j] * mean_dy_xhat);
                        }
                    }
                });
            }
            Op::Mean { x, axis } => {
                let shape = self.shape(*x);
                let (outer, extent, inner) = axis_split(shape, *axis);
                let inv = T::one() / T::from_usize(extent);
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for j in 0..extent {
                            for i in 0..inner {
                                gx[o * extent * inner + j * inner + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let n = self.shape(*x)[1];
                self.accumulate(grads, *x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (m, n) = rank2("slice_cols", self.shape(*x))?;
                let len = node.value.shape()[1];
                self.accumulate(grads, *x, |gx| {
                    for i in 0..m {
                        add_into(
                            &mut gx[i * n + start..i * n + start + len],
                            &g[i * len..(i + 1) * len],
                        );
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = rank2("concat_cols", node.value.shape())?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.accumulate(grads, p, |gp| {
                        for i in 0..m {
                            add_into(
                                &mut gp[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / T::from_usize(labels.len());
                self.accumulate(grads, *logits, |gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::KlSoftTargets {
                student,
                tau,
                student_probs,
                teacher_probs,
            } => {
                let b = self.shape(*student)[0];
                // d/dz_s of τ²·KL = τ·(p_s − p_t), averaged over the batch
                let scale = g[0] * *tau / T::from_usize(b);
                self.accumulate(grads, *student, |gs| {
                    for ((d, &ps), &pt) in gs.iter_mut().zip(student_probs).zip(teacher_probs) {
                        *d += scale * (ps - pt);
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

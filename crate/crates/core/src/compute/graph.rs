use rand::Rng;

use super::{ComputeError, Scalar, Tensor};

/// Handle to a node recorded on a [`Graph`].
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
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Dropout(Var, Vec<T>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Whether stochastic operations are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Records a forward computation and replays it in reverse to produce
/// gradients for every tracked leaf.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward pass is a single reverse sweep.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    mode: Mode,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new(Mode::Eval)
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> ComputeError {
    ComputeError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn matrix_dims(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize), ComputeError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(ComputeError::Rank {
            op,
            expected: 2,
            shape: other.to_vec(),
        }),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a tracked leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.leaf_grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.clear();
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", av)?;
        let (k2, n) = matrix_dims("matmul", bv)?;
        if k != k2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            av.data(),
            (k as isize, 1),
            bv.data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, ComputeError> {
        let av = self.value(a);
        let (m, n) = matrix_dims("transpose", av)?;
        let src = av.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let out: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Add(a, b), tracked))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let out: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let av = self.value(a);
        let out: Vec<T> = av.data().iter().map(|&x| x * f).collect();
        let t = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        let tracked = self.tracked(a);
        self.push(t, Op::Scale(a, f), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<T> = av
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let t = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        let tracked = self.tracked(a);
        self.push(t, Op::Relu(a), tracked)
    }

    /// Inverted dropout. Returns `a` untouched in [`Mode::Eval`] or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        rng: &mut R,
    ) -> Result<Var, ComputeError> {
        if !(0.0..1.0).contains(&p) {
            return Err(ComputeError::Invalid {
                op: "dropout",
                msg: format!("rate {p} outside [0, 1)"),
            });
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let av = self.value(a);
        let mask: Vec<T> = (0..av.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let tracked = self.tracked(a);
        Ok(self.push(t, Op::Dropout(a, mask), tracked))
    }

    /// Selects rows of `table` (an embedding lookup).
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, ComputeError> {
        let tv = self.value(table);
        let (rows, d) = matrix_dims("embedding_gather", tv)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(ComputeError::Invalid {
                    op: "embedding_gather",
                    msg: format!("id {id} out of range for table with {rows} rows"),
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::matrix(ids.len(), d, out)?;
        let tracked = self.tracked(table);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    /// Row-wise softmax over the last axis, stabilised by max subtraction.
    ///
    /// `-inf` entries are allowed (they encode masking) as long as every row
    /// keeps at least one finite entry.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var, ComputeError> {
        let av = self.value(a);
        let cols = av.cols();
        if cols == 0 {
            return Err(ComputeError::Invalid {
                op: "softmax",
                msg: "empty last dimension".into(),
            });
        }
        let mut out = vec![T::zero(); av.numel()];
        for (src, dst) in av.data().chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(src, dst).ok_or(ComputeError::NonFinite { op: "softmax" })?;
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let tracked = self.tracked(a);
        Ok(self.push(t, Op::Softmax(a), tracked))
    }

    /// Normalises each row to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, ComputeError> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.numel() != d || bv.numel() != d {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let rows = xv.rows();
        let mut normed = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let n = (row[c] - mean) * is;
                normed[r * d + c] = n;
                out[r * d + c] = n * gv.data()[c] + bv.data()[c];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            tracked,
        ))
    }

    /// Mean of `-log softmax(row)[label]` over the rows that carry a label.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        labels: &[Option<usize>],
    ) -> Result<Var, ComputeError> {
        let lv = self.value(logits);
        let classes = lv.cols();
        if labels.len() != lv.rows() {
            return Err(shape_err("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let mut probs = vec![T::zero(); lv.numel()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, label) in labels.iter().enumerate() {
            let Some(label) = *label else { continue };
            if label >= classes {
                return Err(ComputeError::InvalidLabel { label, classes });
            }
            let row = lv.row(r);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(ComputeError::NonFinite { op: "cross_entropy" });
            }
            let dst = &mut probs[r * classes..(r + 1) * classes];
            softmax_row(row, dst).ok_or(ComputeError::NonFinite { op: "cross_entropy" })?;
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse = max
                + row
                    .iter()
                    .map(|v| (v.as_f64() - max).exp())
                    .sum::<f64>()
                    .ln();
            total += lse - row[label].as_f64();
            count += 1;
        }
        if count == 0 {
            return Err(ComputeError::NoLabels);
        }
        let t = Tensor::scalar(T::of(total / count as f64));
        let tracked = self.tracked(logits);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
            tracked,
        ))
    }

    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var, ComputeError> {
        let first = parts.first().ok_or(ComputeError::Invalid {
            op: "concat_lastdim",
            msg: "no inputs".into(),
        })?;
        let rows = matrix_dims("concat_lastdim", self.value(*first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat_lastdim", self.value(p))?;
            if r != rows {
                return Err(shape_err(
                    "concat_lastdim",
                    self.value(*first).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, out)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, ComputeError> {
        let xv = self.value(x);
        let (rows, cols) = matrix_dims("slice_cols", xv)?;
        if start >= end || end > cols {
            return Err(ComputeError::Invalid {
                op: "slice_cols",
                msg: format!("range {start}..{end} invalid for {cols} columns"),
            });
        }
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        let t = Tensor::matrix(rows, end - start, out)?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::SliceCols { x, start }, tracked))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, ComputeError> {
        let first = parts.first().ok_or(ComputeError::Invalid {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let cols = matrix_dims("concat_rows", self.value(*first))?.1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = matrix_dims("concat_rows", self.value(p))?;
            if c != cols {
                return Err(shape_err(
                    "concat_rows",
                    self.value(*first).shape(),
                    self.value(p).shape(),
                ));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(rows, cols, out)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), tracked))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, ComputeError> {
        let xv = self.value(x);
        let (rows, cols) = matrix_dims("slice_rows", xv)?;
        if start >= end || end > rows {
            return Err(ComputeError::Invalid {
                op: "slice_rows",
                msg: format!("range {start}..{end} invalid for {rows} rows"),
            });
        }
        let out = xv.data()[start * cols..end * cols].to_vec();
        let t = Tensor::matrix(end - start, cols, out)?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::SliceRows { x, start }, tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients are added to any
    /// gradients left by earlier calls; call [`Graph::zero_grads`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<(), ComputeError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(ComputeError::NotScalar(lv.shape().to_vec()));
        }
        let Self {
            nodes, leaf_grads, ..
        } = self;
        leaf_grads.resize(nodes.len(), None);
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.tracked {
                continue;
            }
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
                if !nodes[v.0].tracked {
                    return;
                }
                let slot =
                    grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {
                    let slot = leaf_grads[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
                    for (s, &x) in slot.iter_mut().zip(&g) {
                        *s += x;
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    acc(*a, &mut |ga| {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g,
                            (n as isize, 1),
                            bv.data(),
                            (1, n as isize),
                            T::one(),
                            ga,
                        )
                    });
                    acc(*b, &mut |gb| {
                        T::gemm(
                            k,
                            m,
                            n,
                            av.data(),
                            (1, k as isize),
                            &g,
                            (n as isize, 1),
                            T::one(),
                            gb,
                        )
                    });
                }
                Op::Transpose(a) => {
                    let (m, n) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    acc(*a, &mut |ga| {
                        for r in 0..m {
                            for c in 0..n {
                                ga[r * n + c] += g[c * m + r];
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        acc(v, &mut |ga| {
                            for (s, &x) in ga.iter_mut().zip(&g) {
                                *s += x;
                            }
                        });
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(*a, &mut |ga| {
                        for ((s, &x), &y) in ga.iter_mut().zip(&g).zip(bv.data()) {
                            *s += x * y;
                        }
                    });
                    acc(*b, &mut |gb| {
                        for ((s, &x), &y) in gb.iter_mut().zip(&g).zip(av.data()) {
                            *s += x * y;
                        }
                    });
                }
                Op::Scale(a, f) => {
                    acc(*a, &mut |ga| {
                        for (s, &x) in ga.iter_mut().zip(&g) {
                            *s += x * *f;
                        }
                    });
                }
                Op::Relu(a) => {
                    let av = &nodes[a.0].value;
                    acc(*a, &mut |ga| {
                        for ((s, &x), &inp) in ga.iter_mut().zip(&g).zip(av.data()) {
                            if inp > T::zero() {
                                *s += x;
                            }
                        }
                    });
                }
                Op::Dropout(a, mask) => {
                    acc(*a, &mut |ga| {
                        for ((s, &x), &m) in ga.iter_mut().zip(&g).zip(mask) {
                            *s += x * m;
                        }
                    });
                }
                Op::Gather { table, ids } => {
                    let d = nodes[table.0].value.cols();
                    acc(*table, &mut |gt| {
                        for (r, &id) in ids.iter().enumerate() {
                            for c in 0..d {
                                gt[id * d + c] += g[r * d + c];
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let cols = y.cols();
                    acc(*a, &mut |ga| {
                        for ((gr, yr), dst) in g
                            .chunks(cols)
                            .zip(y.data().chunks(cols))
                            .zip(ga.chunks_mut(cols))
                        {
                            let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                            for ((s, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                                *s += yi * (gi - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let d = nodes[x.0].value.cols();
                    let rows = inv_std.len();
                    let gv = nodes[gain.0].value.data();
                    acc(*gain, &mut |gg| {
                        for r in 0..rows {
                            for c in 0..d {
                                gg[c] += g[r * d + c] * normed[r * d + c];
                            }
                        }
                    });
                    acc(*bias, &mut |gb| {
                        for r in 0..rows {
                            for c in 0..d {
                                gb[c] += g[r * d + c];
                            }
                        }
                    });
                    let dn = T::of(d as f64);
                    acc(*x, &mut |gx| {
                        let mut dxhat = vec![T::zero(); d];
                        for r in 0..rows {
                            let mut mean_d = T::zero();
                            let mut mean_dx = T::zero();
                            for c in 0..d {
                                let v = g[r * d + c] * gv[c];
                                dxhat[c] = v;
                                mean_d += v;
                                mean_dx += v * normed[r * d + c];
                            }
                            mean_d /= dn;
                            mean_dx /= dn;
                            for c in 0..d {
                                gx[r * d + c] += inv_std[r]
                                    * (dxhat[c] - mean_d - normed[r * d + c] * mean_dx);
                            }
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                    count,
                } => {
                    let classes = nodes[logits.0].value.cols();
                    let scale = g[0] / T::of(*count as f64);
                    acc(*logits, &mut |gl| {
                        for (r, label) in labels.iter().enumerate() {
                            let Some(label) = *label else { continue };
                            for c in 0..classes {
                                let onehot = if c == label { T::one() } else { T::zero() };
                                gl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                            }
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let rows = node.value.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.cols();
                        acc(p, &mut |gp| {
                            for r in 0..rows {
                                for c in 0..w {
                                    gp[r * w + c] += g[r * total + offset + c];
                                }
                            }
                        });
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let src_cols = nodes[x.0].value.cols();
                    let w = node.value.cols();
                    let rows = node.value.rows();
                    acc(*x, &mut |gx| {
                        for r in 0..rows {
                            for c in 0..w {
                                gx[r * src_cols + start + c] += g[r * w + c];
                            }
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p.0].value.numel();
                        acc(p, &mut |gp| {
                            for (s, &x) in gp.iter_mut().zip(&g[offset..offset + n]) {
                                *s += x;
                            }
                        });
                        offset += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let cols = node.value.cols();
                    let base = start * cols;
                    acc(*x, &mut |gx| {
                        for (s, &x) in gx[base..base + g.len()].iter_mut().zip(&g) {
                            *s += x;
                        }
                    });
                }
                Op::Sum(x) => {
                    acc(*x, &mut |gx| {
                        for s in gx.iter_mut() {
                            *s += g[0];
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

/// Writes `softmax(src)` into `dst`; `None` when the row is not normalisable
/// (NaN, `+inf`, or every entry `-inf`).
fn softmax_row<T: Scalar>(src: &[T], dst: &mut [T]) -> Option<()> {
    if src.iter().any(|v| v.is_nan() || *v == T::infinity()) {
        return None;
    }
    let max = src.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return None;
    }
    let mut sum = T::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
    Some(())
}

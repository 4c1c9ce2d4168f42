//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already a topological order and backward is a single reverse sweep.

use std::borrow::Cow;

use super::{KernelError, ParamGrads, ParamId, ParamStore, Real, Result, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Gather {
        src: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        terms: Vec<(usize, usize, T)>,
    },
    SquaredError {
        pred: Var,
        target: Vec<T>,
    },
    BceLogits {
        score: Var,
        label: T,
    },
    Sum(Var),
    SumSquares(Var),
    AddN(Vec<Var>),
}

#[derive(Debug)]
struct Node<'p, T: Clone> {
    value: Cow<'p, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner tape of tensor operations.
///
/// Parameters are borrowed from a [`ParamStore`] without copying, so the
/// store cannot be mutated while a graph built on it is alive.
#[derive(Debug)]
pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
    params: Option<&'p ParamStore<T>>,
    param_nodes: Vec<Option<Var>>,
}

fn dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        _ => Err(KernelError::ShapeMismatch {
            op,
            shapes: vec![shape.to_vec()],
        }),
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params),
            param_nodes: vec![None; params.len()],
        }
    }

    /// Graph with no parameter store; leaves come from [`Graph::input`].
    pub fn standalone() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("node shapes are validated on creation")
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn push(
        &mut self,
        value: Cow<'p, [T]>,
        shape: Vec<usize>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let t = store.get(id);
        let v = self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Param(id),
            true,
        );
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.tensor(v);
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims("matmul", self.shape(a))?;
        let (k2, n) = dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(self.mismatch("matmul", &[a, b]));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims("matmul_bt", self.shape(a))?;
        let (n, k2) = dims("matmul_bt", self.shape(b))?;
        if k != k2 {
            return Err(self.mismatch("matmul_bt", &[a, b]));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                out[i * n + j] = acc;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", &[a, b]));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), shape, Op::Add(a, b), rg))
    }

    /// Adds a row vector `b: [n]` (or `[1, n]`) to every row of `a: [m, n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = dims("add_row", self.shape(a))?;
        let (br, bn) = dims("add_row", self.shape(b))?;
        if br != 1 || bn != n {
            return Err(self.mismatch("add_row", &[a, b]));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = av.to_vec();
        for i in 0..m {
            for (o, &y) in out[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *o += y;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), shape, Op::AddRow(a, b), rg))
    }

    /// `x · w + b` with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out: Vec<T> = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), shape, Op::Scale(a, c), rg)
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.value(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), shape, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with affine `gain` and `bias` of length n.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (m, n) = dims("layer_norm", self.shape(x))?;
        let (_, gn) = dims("layer_norm", self.shape(gain))?;
        let (_, bn) = dims("layer_norm", self.shape(bias))?;
        if gn != n || bn != n || self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(self.mismatch("layer_norm", &[x, gain, bias]));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let nf = T::from_f64(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Softmax along the last axis. Columns whose `key_valid` flag is false
    /// receive probability exactly zero.
    pub fn softmax_rows(&mut self, a: Var, key_valid: Option<&[bool]>) -> Result<Var> {
        let (m, n) = dims("softmax_rows", self.shape(a))?;
        if let Some(mask) = key_valid {
            if mask.len() != n {
                return Err(KernelError::ShapeMismatch {
                    op: "softmax_rows",
                    shapes: vec![self.shape(a).to_vec(), vec![mask.len()]],
                });
            }
        }
        let av = self.value(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let valid = |j: usize| key_valid.map_or(true, |k| k[j]);
            let mut max = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if valid(j) && x > max {
                    max = x;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            let mut total = T::zero();
            for j in 0..n {
                if valid(j) {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Cow::Owned(out), shape, Op::Softmax(a), rg))
    }

    /// Selects rows of a 2-D node, e.g. embedding lookup or picking masked positions.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = dims("gather_rows", self.shape(src))?;
        if rows.is_empty() {
            return Err(KernelError::Empty("gather_rows"));
        }
        let sv = self.value(src);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(KernelError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    extent: m,
                });
            }
            out.extend_from_slice(&sv[r * n..(r + 1) * n]);
        }
        let rg = self.rg(src);
        Ok(self.push(
            Cow::Owned(out),
            vec![rows.len(), n],
            Op::Gather {
                src,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(KernelError::Empty("concat_rows"))?;
        let (_, n) = dims("concat_rows", self.shape(first))?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = dims("concat_rows", self.shape(p))?;
            if c != n {
                return Err(self.mismatch("concat_rows", parts));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Cow::Owned(out),
            vec![rows, n],
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims("slice_cols", self.shape(src))?;
        if len == 0 || start + len > n {
            return Err(KernelError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: n,
            });
        }
        let sv = self.value(src);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&sv[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(src);
        Ok(self.push(
            Cow::Owned(out),
            vec![m, len],
            Op::SliceCols { src, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(KernelError::Empty("concat_cols"))?;
        let (m, _) = dims("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims("concat_cols", self.shape(p))?;
            if r != m {
                return Err(self.mismatch("concat_cols", parts));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Cow::Owned(out),
            vec![m, n],
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Weighted sum of row cross-entropies: `Σ w · (logsumexp(row) − row[target])`
    /// over `(row, target, weight)` terms.
    pub fn cross_entropy(&mut self, logits: Var, terms: &[(usize, usize, T)]) -> Result<Var> {
        let (m, n) = dims("cross_entropy", self.shape(logits))?;
        let lv = self.value(logits);
        let mut lse_cache: Vec<Option<T>> = vec![None; m];
        let mut total = T::zero();
        for &(r, t, w) in terms {
            if r >= m || t >= n {
                return Err(KernelError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: if r >= m { r } else { t },
                    extent: if r >= m { m } else { n },
                });
            }
            let row = &lv[r * n..(r + 1) * n];
            let lse = *lse_cache[r].get_or_insert_with(|| log_sum_exp(row));
            total += w * (lse - row[t]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Cow::Owned(vec![total]),
            vec![1],
            Op::CrossEntropy {
                logits,
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of the squared L2 distance to a constant target.
    pub fn squared_error(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let (m, _) = dims("squared_error", self.shape(pred))?;
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(KernelError::ShapeMismatch {
                op: "squared_error",
                shapes: vec![self.shape(pred).to_vec(), vec![target.len()]],
            });
        }
        let sum: T = pv
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let loss = sum / T::from_f64(m as f64);
        let rg = self.rg(pred);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            vec![1],
            Op::SquaredError {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Binary cross-entropy of `logistic(score)` against `label`, computed
    /// stably from the logit.
    pub fn bce_with_logits(&mut self, score: Var, label: T) -> Result<Var> {
        if self.value(score).len() != 1 {
            return Err(self.mismatch("bce_with_logits", &[score]));
        }
        let s = self.value(score)[0];
        let loss = s.max(T::zero()) - s * label + (-s.abs()).exp().ln_1p();
        let rg = self.rg(score);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            vec![1],
            Op::BceLogits { score, label },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().map(|&x| x * x).sum();
        let rg = self.rg(a);
        self.push(Cow::Owned(vec![s]), vec![1], Op::SumSquares(a), rg)
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(KernelError::Empty("add_n"))?;
        let shape = self.shape(first).to_vec();
        if parts.iter().any(|&p| self.shape(p) != shape.as_slice()) {
            return Err(self.mismatch("add_n", parts));
        }
        let mut out = self.value(first).to_vec();
        for &p in &parts[1..] {
            for (o, &x) in out.iter_mut().zip(self.value(p)) {
                *o += x;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Cow::Owned(out), shape, Op::AddN(parts.to_vec()), rg))
    }

    fn mismatch(&self, op: &'static str, vars: &[Var]) -> KernelError {
        KernelError::ShapeMismatch {
            op,
            shapes: vars.iter().map(|&v| self.shape(v).to_vec()).collect(),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Backward<T>> {
        if self.value(loss).len() != 1 {
            return Err(KernelError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        let param_of_node = self
            .nodes
            .iter()
            .map(|n| match n.op {
                Op::Param(id) => Some(id),
                _ => None,
            })
            .collect();
        Ok(Backward {
            grads,
            param_of_node,
            num_params: self.param_nodes.len(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }

    fn propagate(&self, node: &Node<'p, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims("matmul", self.shape(*a)).unwrap();
                let n = node.shape[1];
                if let Some(da) = self.slot(grads, *a) {
                    let bv = self.value(*b);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let mut acc = T::zero();
                            for (&x, &y) in grow.iter().zip(brow) {
                                acc += x * y;
                            }
                            da[i * k + p] += acc;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    let av = self.value(*a);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            for (d, &y) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * y;
                            }
                        }
                    }
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = dims("matmul_bt", self.shape(*a)).unwrap();
                let n = node.shape[1];
                if let Some(da) = self.slot(grads, *a) {
                    let bv = self.value(*b);
                    for i in 0..m {
                        for j in 0..n {
                            let x = g[i * n + j];
                            for (d, &y) in da[i * k..(i + 1) * k]
                                .iter_mut()
                                .zip(&bv[j * k..(j + 1) * k])
                            {
                                *d += x * y;
                            }
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    let av = self.value(*a);
                    for i in 0..m {
                        for j in 0..n {
                            let x = g[i * n + j];
                            for (d, &y) in db[j * k..(j + 1) * k]
                                .iter_mut()
                                .zip(&av[i * k..(i + 1) * k])
                            {
                                *d += x * y;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        for (d, &x) in d.iter_mut().zip(g) {
                            *d += x;
                        }
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    for (d, &x) in da.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.slot(grads, *a) {
                    for (d, &x) in d.iter_mut().zip(g) {
                        *d += x * *c;
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, &x), &gy) in d.iter_mut().zip(xv).zip(g) {
                        *d += gy * gelu_grad(x);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = *node.shape.last().unwrap();
                let m = g.len() / n;
                let gv = self.value(*gain);
                if let Some(dg) = self.slot(grads, *gain) {
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for row in g.chunks(n) {
                        for (d, &y) in db.iter_mut().zip(row) {
                            *d += y;
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let nf = T::from_f64(n as f64);
                    let mut dxhat = vec![T::zero(); n];
                    for i in 0..m {
                        let h = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxhat[j] = g[i * n + j] * gv[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / nf;
                        let mean_dh = dxhat.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for j in 0..n {
                            dx[i * n + j] += inv_std[i] * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(d) = self.slot(grads, *a) {
                    let n = *node.shape.last().unwrap();
                    let p = &node.value;
                    for (i, grow) in g.chunks(n).enumerate() {
                        let prow = &p[i * n..(i + 1) * n];
                        let dot: T = grow.iter().zip(prow).map(|(&x, &y)| x * y).sum();
                        for j in 0..n {
                            d[i * n + j] += prow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Gather { src, rows } => {
                if let Some(d) = self.slot(grads, *src) {
                    let n = *node.shape.last().unwrap();
                    for (k, &r) in rows.iter().enumerate() {
                        for (dd, &x) in d[r * n..(r + 1) * n].iter_mut().zip(&g[k * n..(k + 1) * n])
                        {
                            *dd += x;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(d) = self.slot(grads, p) {
                        for (dd, &x) in d.iter_mut().zip(&g[offset..offset + len]) {
                            *dd += x;
                        }
                    }
                    offset += len;
                }
            }
            Op::SliceCols { src, start } => {
                if let Some(d) = self.slot(grads, *src) {
                    let len = node.shape[1];
                    let n = *self.shape(*src).last().unwrap();
                    for (i, row) in g.chunks(len).enumerate() {
                        for (dd, &x) in d[i * n + start..i * n + start + len].iter_mut().zip(row) {
                            *dd += x;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    if let Some(d) = self.slot(grads, p) {
                        for (i, row) in g.chunks(n).enumerate() {
                            for (dd, &x) in d[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&row[offset..offset + w])
                            {
                                *dd += x;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::CrossEntropy { logits, terms } => {
                let up = g[0];
                let lv = self.value(*logits);
                let n = *self.shape(*logits).last().unwrap();
                if let Some(d) = self.slot(grads, *logits) {
                    for &(r, t, w) in terms {
                        let row = &lv[r * n..(r + 1) * n];
                        let lse = log_sum_exp(row);
                        let drow = &mut d[r * n..(r + 1) * n];
                        for (dd, &x) in drow.iter_mut().zip(row) {
                            *dd += up * w * (x - lse).exp();
                        }
                        drow[t] -= up * w;
                    }
                }
            }
            Op::SquaredError { pred, target } => {
                let up = g[0];
                let rows = dims("squared_error", self.shape(*pred)).unwrap().0;
                let c = T::from_f64(2.0 / rows as f64) * up;
                let pv = self.value(*pred);
                if let Some(d) = self.slot(grads, *pred) {
                    for ((dd, &p), &t) in d.iter_mut().zip(pv).zip(target) {
                        *dd += c * (p - t);
                    }
                }
            }
            Op::BceLogits { score, label } => {
                let s = self.value(*score)[0];
                if let Some(d) = self.slot(grads, *score) {
                    d[0] += g[0] * (sigmoid(s) - *label);
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.slot(grads, *a) {
                    for dd in d.iter_mut() {
                        *dd += g[0];
                    }
                }
            }
            Op::SumSquares(a) => {
                let av = self.value(*a);
                if let Some(d) = self.slot(grads, *a) {
                    let two = T::from_f64(2.0);
                    for (dd, &x) in d.iter_mut().zip(av) {
                        *dd += two * x * g[0];
                    }
                }
            }
            Op::AddN(parts) => {
                for &p in parts {
                    if let Some(d) = self.slot(grads, p) {
                        for (dd, &x) in d.iter_mut().zip(g) {
                            *dd += x;
                        }
                    }
                }
            }
        }
    }
}

/// Result of [`Graph::backward`]: gradients of every leaf that requires them.
#[derive(Debug)]
pub struct Backward<T> {
    grads: Vec<Option<Vec<T>>>,
    param_of_node: Vec<Option<ParamId>>,
    num_params: usize,
}

impl<T: Real> Backward<T> {
    /// Gradient of a leaf node, `None` if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Dense per-parameter gradients; untouched parameters get zeros.
    pub fn param_grads(&self, store: &ParamStore<T>) -> ParamGrads<T> {
        assert_eq!(store.len(), self.num_params, "gradient/store mismatch");
        let mut out = ParamGrads::zeros_like(store);
        for (node, pid) in self.param_of_node.iter().enumerate() {
            if let (Some(pid), Some(g)) = (pid, &self.grads[node]) {
                for (d, &x) in out.get_mut(*pid).iter_mut().zip(g) {
                    *d += x;
                }
            }
        }
        out
    }

    pub fn into_param_grads(self, store: &ParamStore<T>) -> ParamGrads<T> {
        self.param_grads(store)
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn std_normal_cdf<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu<T: Real>(x: T) -> T {
    x * std_normal_cdf(x)
}

fn gelu_grad<T: Real>(x: T) -> T {
    let pdf = (-(x * x) * T::from_f64(0.5)).exp()
        * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    std_normal_cdf(x) + x * pdf
}

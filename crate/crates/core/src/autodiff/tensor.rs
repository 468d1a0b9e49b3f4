//! Reverse-mode automatic differentiation over dense row-major `f64` arrays.
//!
//! A [`Tensor`] is a reference-counted node of a computation graph. Leaves are
//! created with [`Tensor::param`] (trainable) or [`Tensor::constant`]; every
//! operation returns a fresh node that keeps its operands alive as parents.
//! [`Tensor::backward`] walks the graph in reverse topological order and
//! accumulates `∂loss/∂node` into each node's gradient buffer.
//!
//! Nodes whose ancestry contains no gradient-requiring leaf are never visited
//! by `backward`, so frozen parameters keep an all-zero gradient.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use super::AutodiffError;

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// How the right-hand operand of an elementwise op maps onto the output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Bcast {
    Same,
    /// Operand has a single element.
    Scalar,
    /// Operand is `[1, cols]` against `[rows, cols]`.
    Row { cols: usize },
    /// Operand is `[rows, 1]` against `[rows, cols]`.
    Col { cols: usize },
}

impl Bcast {
    #[inline]
    fn index(self, k: usize) -> usize {
        match self {
            Bcast::Same => k,
            Bcast::Scalar => 0,
            Bcast::Row { cols } => k % cols,
            Bcast::Col { cols } => k / cols,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Bcast),
    Sub(Bcast),
    Mul(Bcast),
    MatMul { m: usize, k: usize, n: usize },
    Relu,
    Sigmoid,
    Tanh,
    SumAxis { outer: usize, axis: usize, inner: usize },
    Concat { outer: usize, inners: Vec<usize> },
    SoftmaxRows { cols: usize },
    AbsPairwiseDiff,
    Scale(f64),
    BceWithLogits { targets: Vec<f64> },
    CeWithLogits { labels: Vec<usize>, classes: usize },
    Gather { index: Vec<usize> },
    ScatterAdd { pairs: Vec<(usize, usize)> },
    Reshape,
    StraightThrough,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(_) => "add",
            Op::Sub(_) => "sub",
            Op::Mul(_) => "mul",
            Op::MatMul { .. } => "matmul",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::SumAxis { .. } => "sum_axis",
            Op::Concat { .. } => "concat",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::AbsPairwiseDiff => "abs_pairwise_diff",
            Op::Scale(_) => "scale",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::CeWithLogits { .. } => "ce_with_logits",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Reshape => "reshape",
            Op::StraightThrough => "straight_through",
        }
    }
}

pub(crate) struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Vec<f64>>,
    op: Op,
    parents: Vec<Tensor>,
    requires_grad: Cell<bool>,
}

/// A node of the computation graph: shaped data, accumulated gradient and
/// links to the operands that produced it.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.0.op.name())
            .field("shape", &self.0.shape)
            .field("data", &self.0.data.borrow())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op, parents: Vec<Tensor>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let len = data.len();
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(vec![0.0; len]),
            op,
            parents,
            requires_grad: Cell::new(requires_grad),
        }))
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                len: data.len(),
            });
        }
        let t = Tensor::from_op(shape, data, Op::Leaf, Vec::new());
        t.0.requires_grad.set(requires_grad);
        Ok(t)
    }

    /// A gradient-requiring leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::leaf(shape.to_vec(), data, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::leaf(shape.to_vec(), data, false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_op(shape.to_vec(), vec![0.0; numel(shape)], Op::Leaf, Vec::new())
    }

    /// Shape-`[1]` constant.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_op(vec![1], vec![value], Op::Leaf, Vec::new())
    }

    /// Constant vector of shape `[n]`.
    pub fn vector(values: Vec<f64>) -> Tensor {
        let n = values.len();
        Tensor::from_op(vec![n], values, Op::Leaf, Vec::new())
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values. Only meaningful on leaves; mutating an
    /// interior node does not recompute its consumers.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn grad(&self) -> Ref<'_, Vec<f64>> {
        self.0.grad.borrow()
    }

    pub fn grad_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.grad.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// First element; convenient for shape-`[1]` losses.
    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Toggles gradient tracking on a leaf. Has no effect on graphs already
    /// built from this leaf.
    pub fn set_requires_grad(&self, on: bool) {
        self.0.requires_grad.set(on);
    }

    pub fn zero_grad(&self) {
        self.0.grad.borrow_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op.name()
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// A new constant leaf holding a copy of this node's values.
    pub fn detach(&self) -> Tensor {
        Tensor::from_op(self.0.shape.clone(), self.to_vec(), Op::Leaf, Vec::new())
    }

    // ----- elementwise binary -------------------------------------------------

    fn bcast(&self, rhs: &Tensor, op: &'static str) -> Result<Bcast> {
        let (a, b) = (self.shape(), rhs.shape());
        if a == b {
            return Ok(Bcast::Same);
        }
        if rhs.len() == 1 {
            return Ok(Bcast::Scalar);
        }
        if a.len() == 2 && b.len() == 2 {
            if b[0] == 1 && b[1] == a[1] {
                return Ok(Bcast::Row { cols: a[1] });
            }
            if b[1] == 1 && b[0] == a[0] {
                return Ok(Bcast::Col { cols: a[1] });
            }
        }
        Err(AutodiffError::shape(op, a, b))
    }

    fn binary(&self, rhs: &Tensor, name: &'static str, f: fn(f64, f64) -> f64) -> Result<(Vec<f64>, Bcast)> {
        let bc = self.bcast(rhs, name)?;
        let a = self.data();
        let b = rhs.data();
        let out = match bc {
            Bcast::Same => a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect(),
            _ => a.iter().enumerate().map(|(k, &x)| f(x, b[bc.index(k)])).collect(),
        };
        Ok((out, bc))
    }

    /// Elementwise sum. `rhs` may be same-shape, a single element, a `[1, C]`
    /// row or an `[R, 1]` column broadcast against `[R, C]`.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let (out, bc) = self.binary(rhs, "add", |x, y| x + y)?;
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Add(bc), vec![self.clone(), rhs.clone()]))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let (out, bc) = self.binary(rhs, "sub", |x, y| x - y)?;
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Sub(bc), vec![self.clone(), rhs.clone()]))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (out, bc) = self.binary(rhs, "mul", |x, y| x * y)?;
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Mul(bc), vec![self.clone(), rhs.clone()]))
    }

    // ----- linear algebra -----------------------------------------------------

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(AutodiffError::shape("matmul", a, b));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let out = matmul_raw(&self.data(), &rhs.data(), m, k, n);
        Ok(Tensor::from_op(vec![m, n], out, Op::MatMul { m, k, n }, vec![self.clone(), rhs.clone()]))
    }

    // ----- unary --------------------------------------------------------------

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let out = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(self.shape().to_vec(), out, op, vec![self.clone()])
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(c), |x| c * x)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    // ----- reductions ---------------------------------------------------------

    fn axis_split(&self, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(AutodiffError::Axis {
                op,
                axis,
                shape: s.to_vec(),
            });
        }
        Ok((s[..axis].iter().product(), s[axis], s[axis + 1..].iter().product()))
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = self.axis_split(axis, "sum_axis")?;
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        Ok(Tensor::from_op(
            shape,
            out,
            Op::SumAxis {
                outer,
                axis: len,
                inner,
            },
            vec![self.clone()],
        ))
    }

    /// Mean along `axis`, keeping it with size 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let (_, len, _) = self.axis_split(axis, "mean_axis")?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len.max(1) as f64))
    }

    /// Sum of all elements as a shape-`[1]` tensor.
    pub fn sum(&self) -> Tensor {
        let flat = self.reshape(&[self.len()]).expect("flatten preserves length");
        flat.sum_axis(0).expect("axis 0 exists")
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    // ----- structural ---------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(AutodiffError::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape, vec![self.clone()]))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(AutodiffError::Empty("concat"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(AutodiffError::Axis {
                op: "concat",
                axis,
                shape: first.shape().to_vec(),
            });
        }
        for p in &parts[1..] {
            let ok = p.shape().len() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(AutodiffError::shape("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inners: Vec<usize> = parts.iter().map(|p| p.shape()[axis..].iter().product()).collect();
        let total_inner: usize = inners.iter().sum();
        let mut out = Vec::with_capacity(outer * total_inner);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (d, &inner) in datas.iter().zip(&inners) {
                out.extend_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        drop(datas);
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Ok(Tensor::from_op(shape, out, Op::Concat { outer, inners }, parts.to_vec()))
    }

    /// `out[k] = self.flat[index[k]]`, reshaped to `shape`.
    pub fn gather(&self, index: &[usize], shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != index.len() {
            return Err(AutodiffError::shape("gather", &[index.len()], shape));
        }
        let x = self.data();
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(AutodiffError::Index {
                op: "gather",
                index: bad,
                len: x.len(),
            });
        }
        let out = index.iter().map(|&i| x[i]).collect();
        drop(x);
        Ok(Tensor::from_op(
            shape.to_vec(),
            out,
            Op::Gather {
                index: index.to_vec(),
            },
            vec![self.clone()],
        ))
    }

    /// Selects whole rows of a 2-D tensor.
    pub fn rows(&self, rows: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(AutodiffError::Rank {
                op: "rows",
                expected: 2,
                shape: s.to_vec(),
            });
        }
        let cols = s[1];
        let index: Vec<usize> = rows.iter().flat_map(|&r| (r * cols)..(r * cols + cols)).collect();
        self.gather(&index, &[rows.len(), cols])
    }

    /// Element `k` of the flattened tensor as a shape-`[1]` tensor.
    pub fn at(&self, k: usize) -> Result<Tensor> {
        self.gather(&[k], &[1])
    }

    /// `out.flat[dst] += self.flat[src]` for every `(src, dst)` pair.
    pub fn scatter_add(&self, pairs: &[(usize, usize)], shape: &[usize]) -> Result<Tensor> {
        let n_out = numel(shape);
        let x = self.data();
        let mut out = vec![0.0; n_out];
        for &(s, d) in pairs {
            if s >= x.len() || d >= n_out {
                return Err(AutodiffError::Index {
                    op: "scatter_add",
                    index: s.max(d),
                    len: if s >= x.len() { x.len() } else { n_out },
                });
            }
            out[d] += x[s];
        }
        drop(x);
        Ok(Tensor::from_op(
            shape.to_vec(),
            out,
            Op::ScatterAdd {
                pairs: pairs.to_vec(),
            },
            vec![self.clone()],
        ))
    }

    /// Forward value `forward`, backward identity onto `self`.
    pub fn straight_through(&self, forward: Vec<f64>) -> Result<Tensor> {
        if forward.len() != self.len() {
            return Err(AutodiffError::shape("straight_through", self.shape(), &[forward.len()]));
        }
        Ok(Tensor::from_op(self.shape().to_vec(), forward, Op::StraightThrough, vec![self.clone()]))
    }

    // ----- relaxation primitives ----------------------------------------------

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(AutodiffError::Rank {
                op: "softmax_rows",
                expected: 2,
                shape: s.to_vec(),
            });
        }
        let cols = s[1];
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = (xi - max).exp();
                z += *oi;
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        drop(x);
        Ok(Tensor::from_op(s.to_vec(), out, Op::SoftmaxRows { cols }, vec![self.clone()]))
    }

    /// For a vector `v` of length `n`, the `n × n` matrix `|v_i − v_j|`.
    pub fn abs_pairwise_diff(&self) -> Tensor {
        let n = self.len();
        let v = self.data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (v[i] - v[j]).abs();
            }
        }
        drop(v);
        Tensor::from_op(vec![n, n], out, Op::AbsPairwiseDiff, vec![self.clone()])
    }

    // ----- losses -------------------------------------------------------------

    /// Mean binary cross-entropy of logits against `targets` in `[0, 1]`.
    pub fn bce_with_logits(&self, targets: &[f64]) -> Result<Tensor> {
        if targets.len() != self.len() {
            return Err(AutodiffError::shape("bce_with_logits", self.shape(), &[targets.len()]));
        }
        let x = self.data();
        let n = x.len().max(1) as f64;
        let total: f64 = x
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        drop(x);
        Ok(Tensor::from_op(
            vec![1],
            vec![total / n],
            Op::BceWithLogits {
                targets: targets.to_vec(),
            },
            vec![self.clone()],
        ))
    }

    /// Mean cross-entropy of `[rows, classes]` logits against integer labels.
    pub fn ce_with_logits(&self, labels: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(AutodiffError::shape("ce_with_logits", s, &[labels.len()]));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(AutodiffError::Index {
                op: "ce_with_logits",
                index: bad,
                len: classes,
            });
        }
        let x = self.data();
        let mut total = 0.0;
        for (row, &label) in x.chunks(classes).zip(labels) {
            total += log_sum_exp(row) - row[label];
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![1],
            vec![total / labels.len().max(1) as f64],
            Op::CeWithLogits {
                labels: labels.to_vec(),
                classes,
            },
            vec![self.clone()],
        ))
    }

    // ----- backward -----------------------------------------------------------

    /// Accumulates `∂self/∂node` into every gradient-requiring node reachable
    /// from `self`. `self` must hold exactly one element.
    ///
    /// Calling this twice on the same graph accumulates twice.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        self.0.grad.borrow_mut()[0] += 1.0;
        for node in order.iter().rev() {
            node.propagate();
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        // (node, parents pushed?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(Rc::as_ptr(&node.0)) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.0.parents {
                if p.requires_grad() && !seen.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    fn propagate(&self) {
        let node = &*self.0;
        if node.parents.is_empty() {
            return;
        }
        let g = node.grad.borrow();
        let p = &node.parents;
        match &node.op {
            Op::Leaf => {}
            Op::Add(bc) => {
                accumulate(&p[0], |pg| pg.iter_mut().zip(g.iter()).for_each(|(a, b)| *a += b));
                accumulate(&p[1], |pg| reduce_bcast(pg, &g, *bc, |gk, _| gk));
            }
            Op::Sub(bc) => {
                accumulate(&p[0], |pg| pg.iter_mut().zip(g.iter()).for_each(|(a, b)| *a += b));
                accumulate(&p[1], |pg| reduce_bcast(pg, &g, *bc, |gk, _| -gk));
            }
            Op::Mul(bc) => {
                let a = p[0].data();
                let b = p[1].data();
                accumulate(&p[0], |pg| {
                    for (k, v) in pg.iter_mut().enumerate() {
                        *v += g[k] * b[bc.index(k)];
                    }
                });
                accumulate(&p[1], |pg| reduce_bcast(pg, &g, *bc, |gk, k| gk * a[k]));
            }
            Op::MatMul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let a = p[0].data();
                let b = p[1].data();
                // dA = dC · Bᵀ
                accumulate(&p[0], |pg| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for t in 0..k {
                            let bt = &b[t * n..(t + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gi[j] * bt[j];
                            }
                            pg[i * k + t] += s;
                        }
                    }
                });
                // dB = Aᵀ · dC
                accumulate(&p[1], |pg| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for t in 0..k {
                            let av = a[i * k + t];
                            if av == 0.0 {
                                continue;
                            }
                            let row = &mut pg[t * n..(t + 1) * n];
                            for j in 0..n {
                                row[j] += av * gi[j];
                            }
                        }
                    }
                });
            }
            Op::Relu => {
                let x = p[0].data();
                accumulate(&p[0], |pg| {
                    for k in 0..pg.len() {
                        if x[k] > 0.0 {
                            pg[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid => {
                let y = node.data.borrow();
                accumulate(&p[0], |pg| {
                    for k in 0..pg.len() {
                        pg[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Tanh => {
                let y = node.data.borrow();
                accumulate(&p[0], |pg| {
                    for k in 0..pg.len() {
                        pg[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                });
            }
            Op::Scale(c) => {
                accumulate(&p[0], |pg| pg.iter_mut().zip(g.iter()).for_each(|(a, b)| *a += c * b));
            }
            Op::SumAxis { outer, axis, inner } => {
                let (outer, len, inner) = (*outer, *axis, *inner);
                accumulate(&p[0], |pg| {
                    for o in 0..outer {
                        for a in 0..len {
                            let base = (o * len + a) * inner;
                            for i in 0..inner {
                                pg[base + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Concat { outer, inners } => {
                let total: usize = inners.iter().sum();
                let mut offset = 0;
                for (part, &inner) in p.iter().zip(inners) {
                    accumulate(part, |pg| {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + inner];
                            pg[o * inner..(o + 1) * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                    offset += inner;
                }
            }
            Op::SoftmaxRows { cols } => {
                let y = node.data.borrow();
                accumulate(&p[0], |pg| {
                    for r in 0..y.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..*cols {
                            pg[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::AbsPairwiseDiff => {
                let v = p[0].data();
                let n = v.len();
                accumulate(&p[0], |pg| {
                    for i in 0..n {
                        let mut s = 0.0;
                        for j in 0..n {
                            let sign = sign(v[i] - v[j]);
                            s += (g[i * n + j] + g[j * n + i]) * sign;
                        }
                        pg[i] += s;
                    }
                });
            }
            Op::BceWithLogits { targets } => {
                let x = p[0].data();
                let scale = g[0] / x.len().max(1) as f64;
                accumulate(&p[0], |pg| {
                    for k in 0..pg.len() {
                        pg[k] += scale * (sigmoid(x[k]) - targets[k]);
                    }
                });
            }
            Op::CeWithLogits { labels, classes } => {
                let x = p[0].data();
                let scale = g[0] / labels.len().max(1) as f64;
                accumulate(&p[0], |pg| {
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &x[r * classes..(r + 1) * classes];
                        let lse = log_sum_exp(row);
                        for c in 0..*classes {
                            let prob = (row[c] - lse).exp();
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            pg[r * classes + c] += scale * (prob - onehot);
                        }
                    }
                });
            }
            Op::Gather { index } => {
                accumulate(&p[0], |pg| {
                    for (k, &i) in index.iter().enumerate() {
                        pg[i] += g[k];
                    }
                });
            }
            Op::ScatterAdd { pairs } => {
                accumulate(&p[0], |pg| {
                    for &(s, d) in pairs {
                        pg[s] += g[d];
                    }
                });
            }
            Op::Reshape | Op::StraightThrough => {
                accumulate(&p[0], |pg| pg.iter_mut().zip(g.iter()).for_each(|(a, b)| *a += b));
            }
        }
    }
}

fn accumulate(parent: &Tensor, f: impl FnOnce(&mut [f64])) {
    if parent.requires_grad() {
        f(&mut parent.0.grad.borrow_mut());
    }
}

/// Sums the output gradient back onto a (possibly broadcast) right operand.
fn reduce_bcast(pg: &mut [f64], g: &[f64], bc: Bcast, term: impl Fn(f64, usize) -> f64) {
    match bc {
        Bcast::Same => {
            for k in 0..g.len() {
                pg[k] += term(g[k], k);
            }
        }
        _ => {
            for k in 0..g.len() {
                pg[bc.index(k)] += term(g[k], k);
            }
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let bt = &b[t * n..(t + 1) * n];
            for j in 0..n {
                row[j] += av * bt[j];
            }
        }
    }
    out
}

use super::tensor::{matmul_at_kernel, matmul_bt_kernel, matmul_kernel, norm, Real, Tensor};
use super::NumericsError;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations understood by [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Hadamard,
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    NarrowCols { input: Var, start: usize },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    MaxOverTime { input: Var, argmax: Vec<usize> },
    MaskedStepMax { steps: Vec<Var>, argmax: Vec<usize> },
    GatherRows { table: Var, ids: Vec<usize> },
    Cosine { u: Var, v: Var, cos: f64 },
    NormalizeRows { input: Var, norms: Vec<f64> },
    Pick { input: Var, flat: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op,
    requires_grad: bool,
}

/// Tape of forward operations, replayed in reverse by [`Graph::backward`].
///
/// Nodes are appended in execution order, which is already a topological
/// order, so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient for `var`. Nodes that were not on the path to the loss get
    /// an all-zero tensor.
    pub fn get(&self, var: Var) -> Tensor<F> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor<F> {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(mismatch("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = matmul_kernel(av.data(), bv.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(NumericsError::InvalidShape(av.shape().to_vec()));
        }
        let (r, c) = (av.rows(), av.cols());
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av.data()[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (shape, data) = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            (av.shape().to_vec(), data)
        } else if bv.is_scalar() {
            let y = bv.data()[0];
            (av.shape().to_vec(), av.data().iter().map(|&x| f(x, y)).collect())
        } else if av.is_scalar() {
            let x = av.data()[0];
            (bv.shape().to_vec(), bv.data().iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(mismatch(name, av.shape(), bv.shape()));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("hadamard", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(F::zero()), Op::Relu(a))
    }

    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var, NumericsError> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Hadamard => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(NumericsError::Arity {
                op: "elementwise",
                expected: arity,
                got: inputs.len(),
            });
        }
        match op {
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Sub => self.sub(inputs[0], inputs[1]),
            Elementwise::Hadamard => self.mul(inputs[0], inputs[1]),
            Elementwise::Tanh => Ok(self.tanh(inputs[0])),
            Elementwise::Sigmoid => Ok(self.sigmoid(inputs[0])),
            Elementwise::Relu => Ok(self.relu(inputs[0])),
        }
    }

    /// Multiplies by a constant that takes no gradient.
    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let c = self.constant(Tensor::scalar(factor));
        self.mul(a, c).expect("scalar broadcast always applies")
    }

    /// Adds a constant that takes no gradient.
    pub fn shift(&mut self, a: Var, offset: F) -> Var {
        let c = self.constant(Tensor::scalar(offset));
        self.add(a, c).expect("scalar broadcast always applies")
    }

    /// Columns `[start, start + len)` of a matrix (or elements of a vector).
    pub fn narrow_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        if len == 0 || start + len > c {
            return Err(NumericsError::OutOfRange {
                op: "narrow_cols",
                index: start + len,
                bound: c,
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av.data()[i * c + start..i * c + start + len]);
        }
        let shape = if av.shape().len() == 2 { vec![r, len] } else { vec![len] };
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::NarrowCols { input: a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::EmptyInput("concat_cols"))?;
        let rank = self.value(*first).shape().len();
        let rows = self.value(*first).rows();
        for p in parts {
            let pv = self.value(*p);
            if pv.shape().len() != rank || pv.rows() != rows {
                return Err(mismatch("concat_cols", self.value(*first).shape(), pv.shape()));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(i));
            }
        }
        let shape = if rank == 2 { vec![rows, total] } else { vec![total] };
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks single-row inputs into a `T×d` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var, NumericsError> {
        let first = rows.first().ok_or(NumericsError::EmptyInput("stack_rows"))?;
        let d = self.value(*first).cols();
        let mut out = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let rv = self.value(*r);
            if rv.rows() != 1 || rv.cols() != d {
                return Err(mismatch("stack_rows", self.value(*first).shape(), rv.shape()));
            }
            out.extend_from_slice(rv.data());
        }
        let rg = rows.iter().any(|r| self.rg(*r));
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), d], out),
            Op::StackRows(rows.to_vec()),
            rg,
        ))
    }

    /// Column-wise max over the time axis of a `T×d` matrix, giving a `[d]`
    /// vector. Ties resolve to the lowest time index.
    pub fn max_over_time(&mut self, h: Var) -> Result<Var, NumericsError> {
        let hv = self.value(h);
        if hv.shape().len() != 2 {
            return Err(NumericsError::InvalidShape(hv.shape().to_vec()));
        }
        let (t_len, d) = (hv.rows(), hv.cols());
        let mut out = hv.row(0).to_vec();
        let mut argmax = vec![0usize; d];
        for t in 1..t_len {
            for (j, &x) in hv.row(t).iter().enumerate() {
                if x > out[j] {
                    out[j] = x;
                    argmax[j] = t;
                }
            }
        }
        let rg = self.rg(h);
        Ok(self.push(
            Tensor::from_parts(vec![d], out),
            Op::MaxOverTime { input: h, argmax },
            rg,
        ))
    }

    /// Batched max-pool over per-step `B×d` matrices. Row `b` only sees
    /// steps `0..lengths[b]`; later steps are padding and treated as `-∞`.
    pub fn masked_step_max(&mut self, steps: &[Var], lengths: &[usize]) -> Result<Var, NumericsError> {
        let first = steps.first().ok_or(NumericsError::EmptyTimeAxis)?;
        let shape = self.value(*first).shape().to_vec();
        let (b, d) = (self.value(*first).rows(), self.value(*first).cols());
        if lengths.len() != b {
            return Err(mismatch("masked_step_max", &shape, &[lengths.len()]));
        }
        for s in steps {
            if self.value(*s).shape() != shape.as_slice() {
                return Err(mismatch("masked_step_max", &shape, self.value(*s).shape()));
            }
        }
        if lengths.contains(&0) {
            return Err(NumericsError::EmptyTimeAxis);
        }
        if let Some(&l) = lengths.iter().find(|&&l| l > steps.len()) {
            return Err(NumericsError::OutOfRange {
                op: "masked_step_max",
                index: l,
                bound: steps.len(),
            });
        }
        let mut out = vec![F::neg_infinity(); b * d];
        let mut argmax = vec![0usize; b * d];
        for (t, s) in steps.iter().enumerate() {
            let sv = self.value(*s).data();
            for row in 0..b {
                if t >= lengths[row] {
                    continue;
                }
                for j in 0..d {
                    let x = sv[row * d + j];
                    if x > out[row * d + j] {
                        out[row * d + j] = x;
                        argmax[row * d + j] = t;
                    }
                }
            }
        }
        let rg = steps.iter().any(|s| self.rg(*s));
        Ok(self.push(
            Tensor::from_parts(vec![b, d], out),
            Op::MaskedStepMax {
                steps: steps.to_vec(),
                argmax,
            },
            rg,
        ))
    }

    /// Row lookup into a `V×E` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(NumericsError::InvalidShape(tv.shape().to_vec()));
        }
        if ids.is_empty() {
            return Err(NumericsError::EmptyInput("gather_rows"));
        }
        let (v, e) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::OutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), e], out),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Cosine similarity of two equally shaped tensors, as a scalar.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var, NumericsError> {
        let (uv, vv) = (self.value(u), self.value(v));
        if uv.shape() != vv.shape() {
            return Err(mismatch("cosine", uv.shape(), vv.shape()));
        }
        let (nu, nv) = (norm(uv.data()), norm(vv.data()));
        if nu == F::zero() || nv == F::zero() {
            return Err(NumericsError::ZeroNorm);
        }
        let raw = super::tensor::dot(uv.data(), vv.data()) / (nu * nv);
        let clamped = raw.max(-F::one()).min(F::one());
        let rg = self.rg(u) || self.rg(v);
        Ok(self.push(
            Tensor::scalar(clamped),
            Op::Cosine {
                u,
                v,
                cos: raw.as_f64(),
            },
            rg,
        ))
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(r * c);
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = av.row(i);
            let n = norm(row);
            if n == F::zero() {
                return Err(NumericsError::ZeroNorm);
            }
            norms.push(n.as_f64());
            out.extend(row.iter().map(|&x| x / n));
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::NormalizeRows { input: a, norms },
            rg,
        ))
    }

    /// Gathers matrix entries `(row, col)` into a vector.
    pub fn pick(&mut self, a: Var, cells: &[(usize, usize)]) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if cells.is_empty() {
            return Err(NumericsError::EmptyInput("pick"));
        }
        let (r, c) = (av.rows(), av.cols());
        let mut flat = Vec::with_capacity(cells.len());
        for &(i, j) in cells {
            if i >= r || j >= c {
                return Err(NumericsError::OutOfRange {
                    op: "pick",
                    index: i * c + j,
                    bound: r * c,
                });
            }
            flat.push(i * c + j);
        }
        let out = flat.iter().map(|&k| av.data()[k]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![cells.len()], out),
            Op::Pick { input: a, flat },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s: F = av.data().iter().copied().sum();
        let m = s / F::from_f64(av.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, NumericsError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), F::one()));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], target: Var, contribution: Tensor<F>) {
        if !self.rg(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Reduces a gradient to the shape of a possibly scalar-broadcast operand.
    fn unbroadcast(&self, operand: Var, g: Tensor<F>) -> Tensor<F> {
        let ov = self.value(operand);
        if ov.shape() == g.shape() {
            g
        } else {
            Tensor::filled(ov.shape(), g.data().iter().copied().sum())
        }
    }

    fn propagate(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let da = matmul_bt_kernel(g.data(), bv.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.rg(*b) {
                    let db = matmul_at_kernel(av.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (g.rows(), g.cols());
                let mut d = vec![F::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(vec![c, r], d));
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    let ga = self.unbroadcast(*a, g.clone());
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.unbroadcast(*b, g.clone());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let ga = self.unbroadcast(*a, g.clone());
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.unbroadcast(*b, g.map(|x| -x));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let other_at = |t: &Tensor<F>, i: usize| {
                    if t.is_scalar() {
                        t.data()[0]
                    } else {
                        t.data()[i]
                    }
                };
                if self.rg(*a) {
                    let d: Vec<F> = g.data().iter().enumerate().map(|(i, &x)| x * other_at(bv, i)).collect();
                    let ga = self.unbroadcast(*a, Tensor::from_parts(g.shape().to_vec(), d));
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let d: Vec<F> = g.data().iter().enumerate().map(|(i, &x)| x * other_at(av, i)).collect();
                    let gb = self.unbroadcast(*b, Tensor::from_parts(g.shape().to_vec(), d));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Tanh(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gi, &y)| gi * (F::one() - y * y))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Sigmoid(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gi, &y)| gi * y * (F::one() - y))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Relu(a) => {
                // Subgradient 0 at the kink.
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&gi, &x)| if x > F::zero() { gi } else { F::zero() })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::NarrowCols { input, start } => {
                let iv = self.value(*input);
                let (r, c) = (iv.rows(), iv.cols());
                let len = g.cols();
                let mut d = vec![F::zero(); r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *input, Tensor::from_parts(iv.shape().to_vec(), d));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let c = pv.cols();
                    if self.rg(*p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            d.extend_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        self.accumulate(grads, *p, Tensor::from_parts(pv.shape().to_vec(), d));
                    }
                    offset += c;
                }
            }
            Op::StackRows(rows) => {
                for (t, r) in rows.iter().enumerate() {
                    if self.rg(*r) {
                        let shape = self.value(*r).shape().to_vec();
                        self.accumulate(grads, *r, Tensor::from_parts(shape, g.row(t).to_vec()));
                    }
                }
            }
            Op::MaxOverTime { input, argmax } => {
                let iv = self.value(*input);
                let d_cols = iv.cols();
                let mut d = vec![F::zero(); iv.len()];
                for (j, &t) in argmax.iter().enumerate() {
                    d[t * d_cols + j] = g.data()[j];
                }
                self.accumulate(grads, *input, Tensor::from_parts(iv.shape().to_vec(), d));
            }
            Op::MaskedStepMax { steps, argmax } => {
                let shape = self.value(steps[0]).shape().to_vec();
                let size = g.len();
                let mut per_step: Vec<Option<Vec<F>>> = vec![None; steps.len()];
                for k in 0..size {
                    let t = argmax[k];
                    per_step[t].get_or_insert_with(|| vec![F::zero(); size])[k] = g.data()[k];
                }
                for (t, d) in per_step.into_iter().enumerate() {
                    if let Some(d) = d {
                        self.accumulate(grads, steps[t], Tensor::from_parts(shape.clone(), d));
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let tv = self.value(*table);
                let e = tv.cols();
                let mut d = vec![F::zero(); tv.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for (dst, &src) in d[id * e..(id + 1) * e].iter_mut().zip(g.row(row)) {
                        *dst = *dst + src;
                    }
                }
                self.accumulate(grads, *table, Tensor::from_parts(tv.shape().to_vec(), d));
            }
            Op::Cosine { u, v, cos } => {
                let (uv, vv) = (self.value(*u), self.value(*v));
                let (nu, nv) = (norm(uv.data()), norm(vv.data()));
                let c = F::from_f64(*cos);
                let gs = g.data()[0];
                let grad_for = |x: &Tensor<F>, y: &Tensor<F>, nx: F, ny: F| {
                    let d = x
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&xi, &yi)| gs * (yi / (nx * ny) - c * xi / (nx * nx)))
                        .collect();
                    Tensor::from_parts(x.shape().to_vec(), d)
                };
                if self.rg(*u) {
                    let gu = grad_for(uv, vv, nu, nv);
                    self.accumulate(grads, *u, gu);
                }
                if self.rg(*v) {
                    let gv = grad_for(vv, uv, nv, nu);
                    self.accumulate(grads, *v, gv);
                }
            }
            Op::NormalizeRows { input, norms } => {
                let c = out.cols();
                let mut d = Vec::with_capacity(out.len());
                for (i, &n) in norms.iter().enumerate() {
                    let y = out.row(i);
                    let gr = g.row(i);
                    let proj = super::tensor::dot(gr, y);
                    let n = F::from_f64(n);
                    d.extend((0..c).map(|j| (gr[j] - y[j] * proj) / n));
                }
                self.accumulate(grads, *input, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::Pick { input, flat } => {
                let iv = self.value(*input);
                let mut d = vec![F::zero(); iv.len()];
                for (k, &pos) in flat.iter().enumerate() {
                    d[pos] = d[pos] + g.data()[k];
                }
                self.accumulate(grads, *input, Tensor::from_parts(iv.shape().to_vec(), d));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::filled(&shape, g.data()[0]));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let share = g.data()[0] / F::from_f64(av.len() as f64);
                self.accumulate(grads, *a, Tensor::filled(av.shape(), share));
            }
        }
    }
}

//! Reverse-mode automatic differentiation over dense 2-D `f32` buffers.
//!
//! A [`Tape`] records operations in topological order. Every node holds a
//! row-major `rows x cols` value buffer. Calling [`Tape::backward`] on a
//! scalar node (or [`Tape::backward_seeded`] with explicit adjoints) walks the
//! tape in reverse and returns the adjoints of parameters and of input
//! leaves.
//!
//! Parameters live in a [`ParamStore`] that the tape borrows immutably, so
//! several tapes (one per worker lane) can share the same store. Each lane
//! returns its own [`Gradients`]; merging is done by the caller in a fixed
//! order.
//!
//! Only first-order derivatives are supported.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("backward root must be a scalar, found shape {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("{} values for shape {rows}x{cols}", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named trainable buffer with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Parameter {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, values: Vec<f32>) -> ParamId {
        assert_eq!(values.len(), rows * cols, "parameter value length");
        self.params.push(Parameter {
            name: name.into(),
            rows,
            cols,
            grad: vec![0.0; values.len()],
            values,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }
}

/// Per-lane parameter gradients; buffers are allocated on first touch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn new(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
        }
    }

    fn slot(&mut self, id: ParamId, len: usize) -> &mut Vec<f32> {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Gradient of one parameter, `None` when it was never touched.
    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds `other` into `self` (element-wise, in parameter order).
    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                let dst = self.slot(ParamId(i), g.len());
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += *s;
                }
            }
        }
    }

    /// Accumulates into the parameter gradient buffers of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                let p = store.get_mut(ParamId(i));
                for (d, s) in p.grad.iter_mut().zip(g) {
                    *d += *s;
                }
            }
        }
    }

    pub fn scale(&mut self, k: f32) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Neg,
    Relu,
    Softplus(f32),
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Abs,
    Square,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Atan2,
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    MatMul(Var, Var),
    Clamp(Var, f32, f32),
    StopGradient,
    Sum(Var),
    SumCols(Var),
    SumRows(Var),
    SegmentSum(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Normalize3(Var, f32),
    DotRows(Var, Var),
    WeightedGather(WeightedGather),
    NeusWeights(NeusWeightsOp),
}

#[derive(Debug)]
struct WeightedGather {
    param: ParamId,
    per_row: usize,
    blocks: Vec<u16>,
    rows_idx: Vec<u32>,
    weights: Vec<f32>,
}

#[derive(Debug)]
struct NeusWeightsOp {
    sdf: Var,
    sharpness: Var,
    offsets: Vec<usize>,
    /// Per-sample clamped alpha.
    alpha: Vec<f32>,
    /// Per-sample `sigma(s_{i+1}) / sigma(s_i)` (1 for the terminal sample).
    ratio: Vec<f32>,
    /// Per-sample transmittance before the sample.
    trans: Vec<f32>,
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct GradResult {
    pub params: Gradients,
    leaf_adjoints: Vec<Option<Vec<f32>>>,
}

impl GradResult {
    /// Adjoint of an input leaf (zeros if nothing flowed into it).
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.leaf_adjoints.get(v.0).and_then(|a| a.as_deref())
    }
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))`, stable for large `|x|`.
fn log_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn softplus(x: f32, beta: f32) -> f32 {
    let bx = beta * x;
    if bx > 20.0 {
        x
    } else if bx < -20.0 {
        // ln(1 + e) == e to f32 precision.
        bx.exp() / beta
    } else {
        bx.exp().ln_1p() / beta
    }
}

/// Broadcast index helper for a binary op on shapes `a` and `b`.
/// Dot product with eight independent partial sums (fixed order, so the
/// result is deterministic and the loop vectorizes).
fn dot_lanes(x: &[f32], y: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let n8 = x.len() / 8 * 8;
    for (cx, cy) in x[..n8].chunks_exact(8).zip(y[..n8].chunks_exact(8)) {
        for l in 0..8 {
            lanes[l] += cx[l] * cy[l];
        }
    }
    let mut s = lanes.iter().sum::<f32>();
    for i in n8..x.len() {
        s += x[i] * y[i];
    }
    s
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(TensorError::Shape { op, lhs: a, rhs: b }),
    }
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f32>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            rows: n.rows,
            cols: n.cols,
            data: n.value.clone(),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.rows, t.cols, t.data, Op::Constant, false)
    }

    /// A leaf whose adjoint is reported by [`GradResult::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t.rows, t.cols, t.data, Op::Input, true)
    }

    /// A dense parameter leaf (value is copied from the store).
    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.store.get(id);
        let (rows, cols, value) = (p.rows, p.cols, p.values.clone());
        self.push(rows, cols, value, Op::Param(id), true)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let x = &self.nodes[a.0].value;
        let value: Vec<f32> = match kind {
            Unary::Neg => x.iter().map(|v| -v).collect(),
            Unary::Relu => x.iter().map(|v| v.max(0.0)).collect(),
            Unary::Softplus(beta) => x.iter().map(|&v| softplus(v, beta)).collect(),
            Unary::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Exp => x.iter().map(|v| v.exp()).collect(),
            Unary::Log => x.iter().map(|v| v.ln()).collect(),
            Unary::Sqrt => x.iter().map(|v| v.sqrt()).collect(),
            Unary::Sin => x.iter().map(|v| v.sin()).collect(),
            Unary::Cos => x.iter().map(|v| v.cos()).collect(),
            Unary::Abs => x.iter().map(|v| v.abs()).collect(),
            Unary::Square => x.iter().map(|v| v * v).collect(),
        };
        let rg = self.rg(a);
        self.push(rows, cols, value, Op::Unary(kind, a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    /// `ln(1 + exp(beta x)) / beta`.
    pub fn softplus(&mut self, a: Var, beta: f32) -> Var {
        self.unary(Unary::Softplus(beta), a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Unary::Sin, a)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(Unary::Cos, a)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (rows, cols) = broadcast_shape(name, sa, sb)?;
        let f = |x: f32, y: f32| -> f32 {
            match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
                Binary::Atan2 => x.atan2(y),
            }
        };
        let xa = &self.nodes[a.0].value;
        let xb = &self.nodes[b.0].value;
        let value: Vec<f32> = if sa == sb {
            xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect()
        } else if sa == (rows, cols) && sb.0 == 1 && sb.1 == cols {
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                out.extend(xa[r * cols..(r + 1) * cols].iter().zip(xb).map(|(&x, &y)| f(x, y)));
            }
            out
        } else {
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    let ia = (if sa.0 == 1 { 0 } else { r }) * sa.1 + if sa.1 == 1 { 0 } else { c };
                    let ib = (if sb.0 == 1 { 0 } else { r }) * sb.1 + if sb.1 == 1 { 0 } else { c };
                    out.push(f(xa[ia], xb[ib]));
                }
            }
            out
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(rows, cols, value, Op::Binary(kind, a, b), rg))
    }

    /// Element-wise sum with row/column/scalar broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, "div", a, b)
    }
    /// Element-wise `atan2(a, b)`.
    pub fn atan2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Atan2, "atan2", a, b)
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let (rows, cols) = self.shape(a);
        let value = self.nodes[a.0].value.iter().map(|v| v * k).collect();
        let rg = self.rg(a);
        self.push(rows, cols, value, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f32) -> Var {
        let (rows, cols) = self.shape(a);
        let value = self.nodes[a.0].value.iter().map(|v| v + k).collect();
        let rg = self.rg(a);
        self.push(rows, cols, value, Op::AddScalar(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: (n, k),
                rhs: (k2, m),
            });
        }
        let xa = &self.nodes[a.0].value;
        let xb = &self.nodes[b.0].value;
        let mut out = vec![0.0f32; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            let arow = &xa[i * k..(i + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &xb[p * m..(p + 1) * m];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(n, m, out, Op::MatMul(a, b), rg))
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let (rows, cols) = self.shape(a);
        let value = self.nodes[a.0].value.iter().map(|v| v.clamp(lo, hi)).collect();
        let rg = self.rg(a);
        self.push(rows, cols, value, Op::Clamp(a, lo, hi), rg)
    }

    /// Passes values through and blocks adjoint flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let value = self.nodes[a.0].value.clone();
        self.push(rows, cols, value, Op::StopGradient, false)
    }

    /// Sum of all entries (accumulated in `f64`), shape `1x1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().map(|&v| v as f64).sum();
        let rg = self.rg(a);
        self.push(1, 1, vec![s as f32], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f32)
    }

    /// Per-row sums, shape `rows x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let x = &self.nodes[a.0].value;
        let value = (0..rows)
            .map(|r| x[r * cols..(r + 1) * cols].iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        let rg = self.rg(a);
        self.push(rows, 1, value, Op::SumCols(a), rg)
    }

    /// Per-column sums, shape `1 x cols`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let x = &self.nodes[a.0].value;
        let mut acc = vec![0.0f64; cols];
        for r in 0..rows {
            for (s, &v) in acc.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
                *s += v as f64;
            }
        }
        let rg = self.rg(a);
        self.push(1, cols, acc.into_iter().map(|v| v as f32).collect(), Op::SumRows(a), rg)
    }

    /// Sums contiguous row segments. `offsets` has one more entry than the
    /// number of segments; segment `s` covers rows `offsets[s]..offsets[s+1]`.
    pub fn segment_sum(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        check_offsets("segment_sum", offsets, rows)?;
        let nseg = offsets.len() - 1;
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0f32; nseg * cols];
        for s in 0..nseg {
            let mut acc = vec![0.0f64; cols];
            for r in offsets[s]..offsets[s + 1] {
                for (o, &v) in acc.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
                    *o += v as f64;
                }
            }
            for (o, v) in out[s * cols..(s + 1) * cols].iter_mut().zip(acc) {
                *o = v as f32;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(nseg, cols, out, Op::SegmentSum(a, offsets.to_vec()), rg))
    }

    /// Selects rows by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of range {rows}"),
            });
        }
        let x = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(a);
        Ok(self.push(idx.len(), cols, out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start + len > rows {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("{start}+{len} exceeds {rows} rows"),
            });
        }
        let value = self.nodes[a.0].value[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(a);
        Ok(self.push(len, cols, value, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start + len > cols {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("{start}+{len} exceeds {cols} columns"),
            });
        }
        let x = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(rows * len);
        for r in 0..rows {
            value.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(rows, len, value, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: (rows, cols),
                    rhs: s,
                });
            }
            cols += s.1;
        }
        let mut value = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let n = &self.nodes[p.0];
                value.extend_from_slice(&n.value[r * n.cols..(r + 1) * n.cols]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(rows, cols, value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.shape(p).1).unwrap_or(0);
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: (rows, cols),
                    rhs: s,
                });
            }
            rows += s.0;
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(rows, cols, value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Normalizes each 3-vector row. Rows with norm below `eps` map to zero
    /// and pass no gradient.
    pub fn normalize3(&mut self, a: Var, eps: f32) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if cols != 3 {
            return Err(TensorError::Shape {
                op: "normalize3",
                lhs: (rows, cols),
                rhs: (rows, 3),
            });
        }
        let x = &self.nodes[a.0].value;
        let mut value = vec![0.0f32; rows * 3];
        for r in 0..rows {
            let v = &x[3 * r..3 * r + 3];
            let n = ((v[0] as f64).powi(2) + (v[1] as f64).powi(2) + (v[2] as f64).powi(2)).sqrt();
            if n >= eps as f64 {
                for k in 0..3 {
                    value[3 * r + k] = (v[k] as f64 / n) as f32;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(rows, 3, value, Op::Normalize3(a, eps), rg))
    }

    /// Row-wise dot product of equally shaped inputs, shape `rows x 1`.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(TensorError::Shape {
                op: "dot_rows",
                lhs: sa,
                rhs: sb,
            });
        }
        let (rows, cols) = sa;
        let xa = &self.nodes[a.0].value;
        let xb = &self.nodes[b.0].value;
        let value = (0..rows)
            .map(|r| {
                xa[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&xb[r * cols..(r + 1) * cols])
                    .map(|(&x, &y)| x as f64 * y as f64)
                    .sum::<f64>() as f32
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(rows, 1, value, Op::DotRows(a, b), rg))
    }

    /// Sparse weighted row gather from a parameter table.
    ///
    /// Output row `n` has `blocks.iter().max() + 1` column blocks of width
    /// `table.cols`. Entry `e` of row `n` adds `weights[n*k + e]` times table
    /// row `rows_idx[n*k + e]` into block `blocks[e]`, with
    /// `k = blocks.len()`. Backward scatter-adds into the table gradient.
    pub fn weighted_gather(
        &mut self,
        param: ParamId,
        n_blocks: usize,
        blocks: Vec<u16>,
        rows_idx: Vec<u32>,
        weights: Vec<f32>,
    ) -> Result<Var> {
        let p = self.store.get(param);
        let per_row = blocks.len();
        let width = p.cols;
        if rows_idx.len() != weights.len() || (per_row > 0 && rows_idx.len() % per_row != 0) {
            return Err(TensorError::Invalid {
                op: "weighted_gather",
                msg: "index/weight length mismatch".into(),
            });
        }
        if blocks.iter().any(|&b| b as usize >= n_blocks) {
            return Err(TensorError::Invalid {
                op: "weighted_gather",
                msg: "block index out of range".into(),
            });
        }
        if let Some(&bad) = rows_idx.iter().find(|&&r| r as usize >= p.rows) {
            return Err(TensorError::Invalid {
                op: "weighted_gather",
                msg: format!("table row {bad} out of range {}", p.rows),
            });
        }
        let n = if per_row == 0 { 0 } else { rows_idx.len() / per_row };
        let out_cols = n_blocks * width;
        let mut out = vec![0.0f32; n * out_cols];
        for r in 0..n {
            let orow = &mut out[r * out_cols..(r + 1) * out_cols];
            for e in 0..per_row {
                let w = weights[r * per_row + e];
                let t = rows_idx[r * per_row + e] as usize;
                let b = blocks[e] as usize * width;
                for f in 0..width {
                    orow[b + f] += w * p.values[t * width + f];
                }
            }
        }
        Ok(self.push(
            n,
            out_cols,
            out,
            Op::WeightedGather(WeightedGather {
                param,
                per_row,
                blocks,
                rows_idx,
                weights,
            }),
            true,
        ))
    }

    /// Unbiased SDF-to-weight conversion for rays laid out as contiguous
    /// row segments of `sdf` (`n x 1`). `sharpness` is a `1x1` node.
    ///
    /// With `Phi(x) = sigmoid(k x)`: `alpha_i = max((Phi(s_i) - Phi(s_{i+1})) /
    /// Phi(s_i), 0)`, the last sample of each ray reuses its own SDF, and
    /// `w_i = alpha_i * prod_{j<i} (1 - alpha_j)`.
    pub fn neus_weights(&mut self, sdf: Var, sharpness: Var, offsets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(sdf);
        if cols != 1 {
            return Err(TensorError::Shape {
                op: "neus_weights",
                lhs: (rows, cols),
                rhs: (rows, 1),
            });
        }
        if self.shape(sharpness) != (1, 1) {
            return Err(TensorError::Shape {
                op: "neus_weights",
                lhs: self.shape(sharpness),
                rhs: (1, 1),
            });
        }
        check_offsets("neus_weights", offsets, rows)?;
        let k = self.nodes[sharpness.0].value[0];
        let s = &self.nodes[sdf.0].value;
        let mut alpha = vec![0.0f32; rows];
        let mut ratio = vec![1.0f32; rows];
        let mut trans = vec![1.0f32; rows];
        let mut w = vec![0.0f32; rows];
        for seg in offsets.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let mut t = 1.0f64;
            for i in a..b {
                let next = if i + 1 < b { s[i + 1] } else { s[i] };
                let r = (log_sigmoid(k * next) - log_sigmoid(k * s[i])).exp();
                ratio[i] = r;
                let al = (1.0 - r).max(0.0);
                alpha[i] = al;
                trans[i] = t as f32;
                w[i] = (t * al as f64) as f32;
                t *= 1.0 - al as f64;
            }
        }
        let rg = self.rg(sdf) || self.rg(sharpness);
        Ok(self.push(
            rows,
            1,
            w,
            Op::NeusWeights(NeusWeightsOp {
                sdf,
                sharpness,
                offsets: offsets.to_vec(),
                alpha,
                ratio,
                trans,
            }),
            rg,
        ))
    }

    /// Backward pass from a scalar root with unit seed.
    pub fn backward(&self, root: Var) -> Result<GradResult> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(TensorError::NonScalarRoot(shape));
        }
        self.backward_seeded(&[(root, vec![1.0])])
    }

    /// Backward pass with explicit adjoint seeds (vector-Jacobian product).
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f32>)]) -> Result<GradResult> {
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        for (v, seed) in seeds {
            let node = &self.nodes[v.0];
            if seed.len() != node.value.len() {
                return Err(TensorError::Shape {
                    op: "backward_seeded",
                    lhs: (node.rows, node.cols),
                    rhs: (seed.len(), 1),
                });
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; seed.len()]);
            for (d, s) in slot.iter_mut().zip(seed) {
                *d += *s;
            }
        }
        let mut grads = Gradients::new(self.store.len());
        let mut leaf: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, g, &mut adj, &mut grads, &mut leaf, i);
        }
        Ok(GradResult {
            params: grads,
            leaf_adjoints: leaf,
        })
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: Vec<f32>,
        adj: &mut [Option<Vec<f32>>],
        grads: &mut Gradients,
        leaf: &mut [Option<Vec<f32>>],
        index: usize,
    ) {
        let nodes = &self.nodes;
        // Adds into the adjoint of `v` if it needs a gradient.
        fn acc<'n>(nodes: &[Node], adj: &'n mut [Option<Vec<f32>>], v: Var) -> Option<&'n mut Vec<f32>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]))
        }
        match &node.op {
            Op::Constant | Op::StopGradient => {}
            Op::Input => leaf[index] = Some(g),
            Op::Param(id) => {
                let dst = grads.slot(*id, g.len());
                for (d, s) in dst.iter_mut().zip(&g) {
                    *d += *s;
                }
            }
            Op::Unary(kind, a) => {
                let x = &nodes[a.0].value;
                let y = &node.value;
                if let Some(da) = acc(nodes, adj, *a) {
                    let it = da.iter_mut().zip(&g);
                    match *kind {
                        Unary::Neg => it.for_each(|(d, g)| *d -= g),
                        Unary::Relu => it.zip(x).for_each(|((d, g), &x)| {
                            if x > 0.0 {
                                *d += g
                            }
                        }),
                        Unary::Softplus(beta) => it.zip(x).for_each(|((d, g), &x)| *d += g * sigmoid(beta * x)),
                        Unary::Sigmoid => it.zip(y).for_each(|((d, g), &y)| *d += g * y * (1.0 - y)),
                        Unary::Exp => it.zip(y).for_each(|((d, g), &y)| *d += g * y),
                        Unary::Log => it.zip(x).for_each(|((d, g), &x)| *d += g / x),
                        Unary::Sqrt => it.zip(y).for_each(|((d, g), &y)| {
                            if y > 0.0 {
                                *d += g * 0.5 / y
                            }
                        }),
                        Unary::Sin => it.zip(x).for_each(|((d, g), &x)| *d += g * x.cos()),
                        Unary::Cos => it.zip(x).for_each(|((d, g), &x)| *d -= g * x.sin()),
                        Unary::Abs => it.zip(x).for_each(|((d, g), &x)| {
                            if x > 0.0 {
                                *d += g
                            } else if x < 0.0 {
                                *d -= g
                            }
                        }),
                        Unary::Square => it.zip(x).for_each(|((d, g), &x)| *d += g * 2.0 * x),
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let sa = (nodes[a.0].rows, nodes[a.0].cols);
                let sb = (nodes[b.0].rows, nodes[b.0].cols);
                let (rows, cols) = (node.rows, node.cols);
                let xa = &nodes[a.0].value;
                let xb = &nodes[b.0].value;
                let ia = |r: usize, c: usize| (if sa.0 == 1 { 0 } else { r }) * sa.1 + if sa.1 == 1 { 0 } else { c };
                let ib = |r: usize, c: usize| (if sb.0 == 1 { 0 } else { r }) * sb.1 + if sb.1 == 1 { 0 } else { c };
                let partials = |x: f32, y: f32| -> (f32, f32) {
                    match kind {
                        Binary::Add => (1.0, 1.0),
                        Binary::Sub => (1.0, -1.0),
                        Binary::Mul => (y, x),
                        Binary::Div => (1.0 / y, -x / (y * y)),
                        Binary::Atan2 => {
                            let d = x * x + y * y;
                            if d > 0.0 {
                                (y / d, -x / d)
                            } else {
                                (0.0, 0.0)
                            }
                        }
                    }
                };
                let need_a = nodes[a.0].requires_grad;
                let need_b = nodes[b.0].requires_grad;
                if sa == sb {
                    if need_a {
                        let dst = acc(nodes, adj, *a).expect("requires grad");
                        for i in 0..g.len() {
                            dst[i] += g[i] * partials(xa[i], xb[i]).0;
                        }
                    }
                    if need_b {
                        let dst = acc(nodes, adj, *b).expect("requires grad");
                        for i in 0..g.len() {
                            dst[i] += g[i] * partials(xa[i], xb[i]).1;
                        }
                    }
                    return;
                }
                if sa == (rows, cols) && sb == (1, cols) {
                    if need_a {
                        let dst = acc(nodes, adj, *a).expect("requires grad");
                        for r in 0..rows {
                            for c in 0..cols {
                                let i = r * cols + c;
                                dst[i] += g[i] * partials(xa[i], xb[c]).0;
                            }
                        }
                    }
                    if need_b {
                        let mut db = vec![0.0f64; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                let i = r * cols + c;
                                db[c] += (g[i] * partials(xa[i], xb[c]).1) as f64;
                            }
                        }
                        let dst = acc(nodes, adj, *b).expect("requires grad");
                        for (d, s) in dst.iter_mut().zip(db) {
                            *d += s as f32;
                        }
                    }
                    return;
                }
                if need_a {
                    let mut da = vec![0.0f64; xa.len()];
                    for r in 0..rows {
                        for c in 0..cols {
                            let (i, j) = (ia(r, c), ib(r, c));
                            da[i] += (g[r * cols + c] * partials(xa[i], xb[j]).0) as f64;
                        }
                    }
                    let dst = acc(nodes, adj, *a).expect("requires grad");
                    for (d, s) in dst.iter_mut().zip(da) {
                        *d += s as f32;
                    }
                }
                if need_b {
                    let mut db = vec![0.0f64; xb.len()];
                    for r in 0..rows {
                        for c in 0..cols {
                            let (i, j) = (ia(r, c), ib(r, c));
                            db[j] += (g[r * cols + c] * partials(xa[i], xb[j]).1) as f64;
                        }
                    }
                    let dst = acc(nodes, adj, *b).expect("requires grad");
                    for (d, s) in dst.iter_mut().zip(db) {
                        *d += s as f32;
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(da) = acc(nodes, adj, *a) {
                    for (d, s) in da.iter_mut().zip(&g) {
                        *d += s * k;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(da) = acc(nodes, adj, *a) {
                    for (d, s) in da.iter_mut().zip(&g) {
                        *d += s;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = (nodes[a.0].rows, nodes[a.0].cols);
                let m = nodes[b.0].cols;
                let xa = &nodes[a.0].value;
                let xb = &nodes[b.0].value;
                if nodes[a.0].requires_grad {
                    let da = acc(nodes, adj, *a).expect("requires grad");
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            da[i * k + p] += dot_lanes(grow, &xb[p * m..(p + 1) * m]);
                        }
                    }
                }
                if nodes[b.0].requires_grad {
                    let db = acc(nodes, adj, *b).expect("requires grad");
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = xa[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * m..(p + 1) * m];
                            for (d, &x) in drow.iter_mut().zip(grow) {
                                *d += av * x;
                            }
                        }
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = &nodes[a.0].value;
                if let Some(da) = acc(nodes, adj, *a) {
                    for i in 0..g.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            da[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = acc(nodes, adj, *a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::SumCols(a) => {
                let cols = nodes[a.0].cols;
                if let Some(da) = acc(nodes, adj, *a) {
                    for (r, &gr) in g.iter().enumerate() {
                        for d in &mut da[r * cols..(r + 1) * cols] {
                            *d += gr;
                        }
                    }
                }
            }
            Op::SumRows(a) => {
                let cols = nodes[a.0].cols;
                if let Some(da) = acc(nodes, adj, *a) {
                    for row in da.chunks_mut(cols) {
                        for (d, s) in row.iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SegmentSum(a, offsets) => {
                let cols = nodes[a.0].cols;
                if let Some(da) = acc(nodes, adj, *a) {
                    for s in 0..offsets.len() - 1 {
                        let gs = &g[s * cols..(s + 1) * cols];
                        for r in offsets[s]..offsets[s + 1] {
                            for (d, x) in da[r * cols..(r + 1) * cols].iter_mut().zip(gs) {
                                *d += x;
                            }
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let cols = nodes[a.0].cols;
                if let Some(da) = acc(nodes, adj, *a) {
                    for (o, &i) in idx.iter().enumerate() {
                        for (d, x) in da[i * cols..(i + 1) * cols].iter_mut().zip(&g[o * cols..(o + 1) * cols]) {
                            *d += x;
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let cols = nodes[a.0].cols;
                if let Some(da) = acc(nodes, adj, *a) {
                    for (d, x) in da[start * cols..start * cols + g.len()].iter_mut().zip(&g) {
                        *d += x;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let cols = nodes[a.0].cols;
                let len = node.cols;
                if let Some(da) = acc(nodes, adj, *a) {
                    for r in 0..node.rows {
                        for c in 0..len {
                            da[r * cols + start + c] += g[r * len + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = nodes[p.0].cols;
                    if let Some(dp) = acc(nodes, adj, p) {
                        for r in 0..node.rows {
                            for c in 0..pc {
                                dp[r * pc + c] += g[r * node.cols + off + c];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(dp) = acc(nodes, adj, p) {
                        for (d, x) in dp.iter_mut().zip(&g[off..off + len]) {
                            *d += x;
                        }
                    }
                    off += len;
                }
            }
            Op::Normalize3(a, eps) => {
                let x = &nodes[a.0].value;
                let y = &node.value;
                if let Some(da) = acc(nodes, adj, *a) {
                    for r in 0..node.rows {
                        let v = &x[3 * r..3 * r + 3];
                        let n = ((v[0] as f64).powi(2) + (v[1] as f64).powi(2) + (v[2] as f64).powi(2)).sqrt();
                        if n < *eps as f64 {
                            continue;
                        }
                        let u = &y[3 * r..3 * r + 3];
                        let gr = &g[3 * r..3 * r + 3];
                        let proj = (gr[0] * u[0] + gr[1] * u[1] + gr[2] * u[2]) as f64;
                        for k in 0..3 {
                            da[3 * r + k] += ((gr[k] as f64 - proj * u[k] as f64) / n) as f32;
                        }
                    }
                }
            }
            Op::DotRows(a, b) => {
                let cols = nodes[a.0].cols;
                let xa = &nodes[a.0].value;
                let xb = &nodes[b.0].value;
                if let Some(da) = acc(nodes, adj, *a) {
                    for r in 0..node.rows {
                        for c in 0..cols {
                            da[r * cols + c] += g[r] * xb[r * cols + c];
                        }
                    }
                }
                if let Some(db) = acc(nodes, adj, *b) {
                    for r in 0..node.rows {
                        for c in 0..cols {
                            db[r * cols + c] += g[r] * xa[r * cols + c];
                        }
                    }
                }
            }
            Op::WeightedGather(wg) => {
                let p = self.store.get(wg.param);
                let width = p.cols;
                let dst = grads.slot(wg.param, p.values.len());
                let per_row = wg.per_row;
                for r in 0..node.rows {
                    let grow = &g[r * node.cols..(r + 1) * node.cols];
                    for e in 0..per_row {
                        let w = wg.weights[r * per_row + e];
                        if w == 0.0 {
                            continue;
                        }
                        let t = wg.rows_idx[r * per_row + e] as usize;
                        let b = wg.blocks[e] as usize * width;
                        for f in 0..width {
                            dst[t * width + f] += w * grow[b + f];
                        }
                    }
                }
            }
            Op::NeusWeights(op) => {
                let s = &nodes[op.sdf.0].value;
                let k = nodes[op.sharpness.0].value[0];
                let mut ds = vec![0.0f64; s.len()];
                let mut dk = 0.0f64;
                for seg in op.offsets.windows(2) {
                    let (a, b) = (seg[0], seg[1]);
                    // R_j = sum_{i>j} g_i alpha_i prod_{j<l<i} (1 - alpha_l)
                    let mut r_next = 0.0f64;
                    for j in (a..b).rev() {
                        let r_j = r_next;
                        let d_alpha = op.trans[j] as f64 * (g[j] as f64 - r_j);
                        r_next = g[j] as f64 * op.alpha[j] as f64 + (1.0 - op.alpha[j] as f64) * r_j;
                        if op.alpha[j] <= 0.0 || j + 1 >= b {
                            continue;
                        }
                        // alpha = 1 - exp(ls(k s_{j+1}) - ls(k s_j)), ls' = sigmoid(-x)
                        let r = op.ratio[j] as f64;
                        let x0 = k * s[j];
                        let x1 = k * s[j + 1];
                        let d_x0 = d_alpha * r * sigmoid(-x0) as f64;
                        let d_x1 = -d_alpha * r * sigmoid(-x1) as f64;
                        ds[j] += d_x0 * k as f64;
                        ds[j + 1] += d_x1 * k as f64;
                        dk += d_x0 * s[j] as f64 + d_x1 * s[j + 1] as f64;
                    }
                }
                if let Some(d) = acc(nodes, adj, op.sdf) {
                    for (x, y) in d.iter_mut().zip(ds) {
                        *x += y as f32;
                    }
                }
                if let Some(d) = acc(nodes, adj, op.sharpness) {
                    d[0] += dk as f32;
                }
            }
        }
    }
}

fn check_offsets(op: &'static str, offsets: &[usize], rows: usize) -> Result<()> {
    if offsets.is_empty() || offsets[0] != 0 || *offsets.last().unwrap() != rows || offsets.windows(2).any(|w| w[1] < w[0]) {
        return Err(TensorError::Invalid {
            op,
            msg: format!("offsets must rise from 0 to {rows}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: usize, cols: usize, data: &[f32]) -> Tensor {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn square_derivative() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn stop_gradient_blocks_one_factor() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::scalar(3.0));
        let sx = tape.stop_gradient(x);
        let y = tape.mul(sx, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[3.0]);
    }

    #[test]
    fn sum_of_params_gives_ones() {
        let mut store = ParamStore::new();
        let a = store.add("a", 2, 3, vec![0.5; 6]);
        let b = store.add("b", 1, 4, vec![1.0; 4]);
        let mut tape = Tape::new(&store);
        let va = tape.param(a);
        let s = tape.sum(va);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.params.get(a).unwrap(), &[1.0; 6]);
        assert!(g.params.get(b).is_none());
        let mut store2 = store.clone();
        g.params.accumulate_into(&mut store2);
        assert_eq!(store2.get(b).grad, vec![0.0; 4]);
        // Accumulation across two backward calls.
        g.params.accumulate_into(&mut store2);
        assert_eq!(store2.get(a).grad, vec![2.0; 6]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::zeros(2, 1));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarRoot((2, 1)))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(Tensor::zeros(2, 3));
        let b = tape.input(Tensor::zeros(3, 2));
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.matmul(a, b).is_ok());
        assert!(tape.dot_rows(a, b).is_err());
        assert!(tape.normalize3(b, 1e-8).is_err());
    }

    #[test]
    fn scatter_add_sums_contributions() {
        let mut store = ParamStore::new();
        let table = store.add("table", 4, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        let mut tape = Tape::new(&store);
        // Two samples, each with 2 entries into a single block; both hit row 2.
        let out = tape
            .weighted_gather(table, 1, vec![0, 0], vec![2, 0, 2, 3], vec![0.25, 0.75, 0.6, 0.4])
            .unwrap();
        assert_eq!(tape.shape(out), (2, 2));
        let coef = tape.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let prod = tape.mul(out, coef).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        let gt = g.params.get(table).unwrap();
        // Row 2: sample 0 weight 0.25 * coef row 0, plus sample 1 weight 0.6 * coef row 1.
        let expect = [0.25 * 1.0 + 0.6 * 3.0, 0.25 * 2.0 + 0.6 * 4.0];
        assert!((gt[4] - expect[0]).abs() < 1e-6 && (gt[5] - expect[1]).abs() < 1e-6);
        assert!((gt[0] - 0.75).abs() < 1e-6 && (gt[1] - 1.5).abs() < 1e-6);
        assert!((gt[6] - 1.2).abs() < 1e-6 && (gt[7] - 1.6).abs() < 1e-6);
        assert_eq!(&gt[2..4], &[0.0, 0.0]);
    }

    /// Directional finite-difference check of an input-to-scalar function.
    fn check_inputs(
        inputs: &[Tensor],
        f: impl Fn(&mut Tape, &[Var]) -> Var,
        tol: f64,
        seed: u64,
    ) {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grads: Vec<Vec<f32>> = {
            let mut tape = Tape::new(&store);
            let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
            let out = f(&mut tape, &vars);
            let g = tape.backward(out).unwrap();
            vars.iter()
                .zip(inputs)
                .map(|(&v, x)| g.wrt(v).map(|s| s.to_vec()).unwrap_or(vec![0.0; x.data.len()]))
                .collect()
        };
        let eval = |xs: &[Tensor]| -> f64 {
            let mut tape = Tape::new(&store);
            let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let out = f(&mut tape, &vars);
            tape.scalar(out) as f64
        };
        for _ in 0..5 {
            let dirs: Vec<Vec<f32>> = inputs
                .iter()
                .map(|x| x.data.iter().map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                .collect();
            let analytic: f64 = grads
                .iter()
                .zip(&dirs)
                .map(|(g, d)| g.iter().zip(d).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>())
                .sum();
            let h = 1e-3f32;
            let shifted = |sign: f32| -> Vec<Tensor> {
                inputs
                    .iter()
                    .zip(&dirs)
                    .map(|(x, d)| Tensor {
                        rows: x.rows,
                        cols: x.cols,
                        data: x.data.iter().zip(d).map(|(&a, &b)| a + sign * h * b).collect(),
                    })
                    .collect()
            };
            let fd = (eval(&shifted(1.0)) - eval(&shifted(-1.0))) / (2.0 * h as f64);
            let denom = analytic.abs().max(fd.abs()).max(1e-2);
            assert!(
                (fd - analytic).abs() / denom < tol,
                "fd {fd} vs analytic {analytic}"
            );
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f32, hi: f32) -> Tensor {
        Tensor {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect(),
        }
    }

    #[test]
    fn unary_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&mut rng, 3, 4, 0.2, 2.0);
        let y = rand_tensor(&mut rng, 3, 4, -1.0, 1.0);
        type F = fn(&mut Tape, Var) -> Var;
        let ops: Vec<F> = vec![
            |t, v| t.exp(v),
            |t, v| t.log(v),
            |t, v| t.sqrt(v),
            |t, v| t.sin(v),
            |t, v| t.cos(v),
            |t, v| t.square(v),
            |t, v| t.sigmoid(v),
            |t, v| t.softplus(v, 3.0),
            |t, v| t.neg(v),
            |t, v| t.abs(v),
            |t, v| t.relu(v),
            |t, v| t.clamp(v, 0.5, 1.5),
        ];
        for (i, op) in ops.iter().enumerate() {
            check_inputs(
                &[x.clone(), y.clone()],
                |t, v| {
                    let a = op(t, v[0]);
                    let b = t.mul(a, v[1]).unwrap();
                    t.sum(b)
                },
                1e-2,
                100 + i as u64,
            );
        }
    }

    #[test]
    fn binary_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&mut rng, 4, 3, 0.5, 1.5);
        let b = rand_tensor(&mut rng, 1, 3, 0.5, 1.5);
        let c = rand_tensor(&mut rng, 4, 1, 0.5, 1.5);
        check_inputs(
            &[a.clone(), b.clone(), c.clone()],
            |t, v| {
                let x = t.add(v[0], v[1]).unwrap();
                let y = t.mul(x, v[2]).unwrap();
                let z = t.div(y, v[1]).unwrap();
                let w = t.sub(z, v[2]).unwrap();
                let q = t.atan2(w, v[0]).unwrap();
                let n = t.normalize3(q, 1e-8).unwrap();
                let d = t.dot_rows(n, v[0]).unwrap();
                let g = t.gather_rows(d, &[0, 2, 2, 3]).unwrap();
                let s = t.slice_rows(g, 1, 3).unwrap();
                let sq = t.square(s);
                t.sum(sq)
            },
            1e-2,
            12,
        );
        check_inputs(
            &[a.clone(), b.clone()],
            |t, v| {
                let bt = t.slice_cols(v[0], 0, 3).unwrap();
                let kc = t_const(t);
                let m = t.matmul(bt, kc).unwrap();
                let cc = t.concat_cols(&[m, v[0]]).unwrap();
                let cr = t.concat_rows(&[cc, cc]).unwrap();
                let seg = t.segment_sum(cr, &[0, 3, 8]).unwrap();
                let sc = t.sum_cols(seg);
                let sr = t.sum_rows(cr);
                let q = t.square(sc);
                let a1 = t.sum(q);
                let a2 = t.sum(sr);
                let a3 = t.add(a1, a2).unwrap();
                let k = t.mean(v[1]);
                let m2 = t.mul(a3, k).unwrap();
                t.add_scalar(m2, 0.3)
            },
            1e-2,
            13,
        );
        fn t_const(t: &mut Tape) -> Var {
            t.constant(Tensor::new(3, 2, vec![0.3, -0.2, 0.1, 0.5, -0.4, 0.2]).unwrap())
        }
    }

    /// Two-layer network with 64 hidden units: f32 tape gradients against
    /// central differences of an independent f64 forward pass.
    #[test]
    fn two_layer_network_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", 5, 64, (0..320).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let b1 = store.add("b1", 1, 64, (0..64).map(|_| rng.gen_range(-0.1..0.1)).collect());
        let w2 = store.add("w2", 64, 2, (0..128).map(|_| rng.gen_range(-0.3..0.3)).collect());
        let x = rand_tensor(&mut rng, 8, 5, -1.0, 1.0);
        let g = {
            let mut tape = Tape::new(&store);
            let xi = tape.constant(x.clone());
            let (a, b, c) = (tape.param(w1), tape.param(b1), tape.param(w2));
            let h = tape.matmul(xi, a).unwrap();
            let h = tape.add(h, b).unwrap();
            let h = tape.softplus(h, 10.0);
            let o = tape.matmul(h, c).unwrap();
            let o = tape.sigmoid(o);
            let l = tape.mean(o);
            tape.backward(l).unwrap()
        };
        let flat = |id: ParamId| store.get(id).values.iter().map(|&v| v as f64).collect::<Vec<f64>>();
        let (p1, p2, p3) = (flat(w1), flat(b1), flat(w2));
        let forward = |a: &[f64], b: &[f64], c: &[f64]| -> f64 {
            let mut total = 0.0;
            for r in 0..8 {
                let mut out = [0.0f64; 2];
                for j in 0..64 {
                    let mut z = b[j];
                    for i in 0..5 {
                        z += x.data[r * 5 + i] as f64 * a[i * 64 + j];
                    }
                    let h = (10.0 * z).exp().ln_1p() / 10.0;
                    out[0] += h * c[j * 2];
                    out[1] += h * c[j * 2 + 1];
                }
                total += out.iter().map(|&o| 1.0 / (1.0 + (-o).exp())).sum::<f64>();
            }
            total / 16.0
        };
        let mut max_rel = 0.0f64;
        for _ in 0..20 {
            let dirs: Vec<Vec<f64>> = [&p1, &p2, &p3]
                .iter()
                .map(|p| p.iter().map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let analytic: f64 = [w1, b1, w2]
                .iter()
                .zip(&dirs)
                .map(|(&id, d)| {
                    g.params.get(id).unwrap().iter().zip(d).map(|(&a, &b)| a as f64 * b).sum::<f64>()
                })
                .sum();
            let h = 1e-4;
            let shift = |p: &[f64], d: &[f64], s: f64| p.iter().zip(d).map(|(a, b)| a + s * h * b).collect::<Vec<f64>>();
            let fp = forward(&shift(&p1, &dirs[0], 1.0), &shift(&p2, &dirs[1], 1.0), &shift(&p3, &dirs[2], 1.0));
            let fm = forward(&shift(&p1, &dirs[0], -1.0), &shift(&p2, &dirs[1], -1.0), &shift(&p3, &dirs[2], -1.0));
            let fd = (fp - fm) / (2.0 * h);
            max_rel = max_rel.max((fd - analytic).abs() / fd.abs().max(1e-6));
        }
        assert!(max_rel < 1e-3, "max relative error {max_rel}");
    }

    #[test]
    fn neus_weights_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let sdf = Tensor {
            rows: 9,
            cols: 1,
            data: vec![0.5, 0.3, 0.12, -0.05, -0.2, 0.4, 0.1, -0.1, -0.3],
        };
        let coef = rand_tensor(&mut rng, 9, 1, -1.0, 1.0);
        check_inputs(
            &[sdf, Tensor::scalar(8.0), coef],
            |t, v| {
                let w = t.neus_weights(v[0], v[1], &[0, 5, 9]).unwrap();
                let p = t.mul(w, v[2]).unwrap();
                t.sum(p)
            },
            1e-2,
            16,
        );
    }

    #[test]
    fn neus_weights_values() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        // Monotone increasing positive SDF: nothing is hit.
        let s = tape.constant(t(4, 1, &[0.1, 0.2, 0.3, 0.4]));
        let k = tape.constant(Tensor::scalar(64.0));
        let w = tape.neus_weights(s, k, &[0, 4]).unwrap();
        assert!(tape.value(w).iter().all(|&x| x == 0.0));
        // One crossing with large sharpness.
        let s = tape.constant(t(2, 1, &[0.5, -0.5]));
        let k = tape.constant(Tensor::scalar(200.0));
        let w = tape.neus_weights(s, k, &[0, 2]).unwrap();
        assert!((tape.value(w)[0] - 1.0).abs() < 1e-6);
        assert_eq!(tape.value(w)[1], 0.0);
    }

    #[test]
    fn deterministic_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = rand_tensor(&mut rng, 50, 8, -1.0, 1.0);
        let run = || {
            let store = ParamStore::new();
            let mut tape = Tape::new(&store);
            let v = tape.input(x.clone());
            let s = tape.sin(v);
            let q = tape.sum(s);
            let g = tape.backward(q).unwrap();
            (tape.scalar(q).to_bits(), g.wrt(v).unwrap().iter().map(|f| f.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}

//! Minimal define-then-run reverse-mode automatic differentiation over dense
//! `f64` arrays of rank 0, 1 or 2.
//!
//! A [`Tape`] records primitive operations referencing named parameter
//! segments (slices of a flat [`ParamVector`]), named inputs and constants.
//! [`Tape::forward`] evaluates every node in recording order and
//! [`Tape::backward`] (or [`Tape::backward_from`] for vector-Jacobian
//! products) walks the record in reverse, accumulating adjoints into a flat
//! gradient aligned with the parameter vector.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Result, TvoError};

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct RealArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RealArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(TvoError::domain(format!("zero-sized dimension in shape {shape:?}")));
        }
        if expected != data.len() {
            return Err(TvoError::domain(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows when viewed as a matrix (rank-1 arrays are a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Stacks equally sized rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| TvoError::domain("cannot stack zero rows"))?;
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.as_ref().len() != cols {
                return Err(TvoError::domain("ragged rows"));
            }
            data.extend_from_slice(r.as_ref());
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }
}

/// Named slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Generative-model parameters live under `theta/`, inference-network
    /// parameters under `phi/`.
    pub fn role(&self) -> Role {
        if self.name.starts_with("phi/") {
            Role::Phi
        } else {
            Role::Theta
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Theta,
    Phi,
}

/// Disjoint, contiguous segments covering `[0, dim)` with unique names.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    index: HashMap<String, usize>,
    dim: usize,
}

impl ParamLayout {
    pub fn new<I, S>(specs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<usize>)>,
        S: Into<String>,
    {
        let mut segments = Vec::new();
        let mut index = HashMap::new();
        let mut offset = 0;
        for (name, shape) in specs {
            let name = name.into();
            if shape.contains(&0) {
                return Err(TvoError::domain(format!("segment `{name}` has an empty dimension")));
            }
            if index.insert(name.clone(), segments.len()).is_some() {
                return Err(TvoError::domain(format!("duplicate segment name `{name}`")));
            }
            let seg = Segment { name, offset, shape };
            offset += seg.len();
            segments.push(seg);
        }
        Ok(Self { segments, index, dim: offset })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Result<&Segment> {
        self.index
            .get(name)
            .map(|&i| &self.segments[i])
            .ok_or_else(|| TvoError::Unknown { kind: "parameter segment", name: name.to_string() })
    }

    /// Name of the segment containing flat coordinate `d`.
    pub fn segment_of(&self, d: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.range().contains(&d))
    }

    /// 1.0 for coordinates whose role is in `roles`, 0.0 elsewhere.
    pub fn role_mask(&self, roles: &[Role]) -> Vec<f64> {
        let mut mask = vec![0.0; self.dim];
        for seg in &self.segments {
            if roles.contains(&seg.role()) {
                mask[seg.range()].iter_mut().for_each(|m| *m = 1.0);
            }
        }
        mask
    }
}

/// Flat parameter values tied to a shared layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.dim()];
        Self { layout, values }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(TvoError::domain(format!(
                "parameter vector has {} values, layout needs {}",
                values.len(),
                layout.dim()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn segment(&self, name: &str) -> Result<&[f64]> {
        let seg = self.layout.segment(name)?;
        Ok(&self.values[seg.range()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let range = self.layout.segment(name)?.range();
        Ok(&mut self.values[range])
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::from_values(self.layout.clone(), values)
    }
}

/// Handle to a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param(String),
    Input(String),
    Const(RealArray),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize, f64),
    MatMul(usize, usize),
    Sum(usize),
    SumCols(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Tanh(usize),
    LogSigmoid(usize),
    Softplus(usize),
    LogSumExp(usize),
    BroadcastRows(usize, usize),
    Gather(usize, Vec<usize>),
    GatherRows(usize, Vec<usize>),
    SliceCols(usize, usize, usize),
    ConcatCols(usize, usize),
    Reshape(usize, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Sum(_) => "sum",
            Op::SumCols(_) => "sum_cols",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Softplus(_) => "softplus",
            Op::LogSumExp(_) => "log_sum_exp",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::Gather(..) => "gather",
            Op::GatherRows(..) => "gather_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(..) => "reshape",
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(p / (1 − p))`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `log Σ exp(v)`; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub type Inputs = HashMap<String, RealArray>;

/// Append-only record of primitive operations.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<RealArray>,
    layout: Option<Arc<ParamLayout>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        // recording invalidates previous evaluation
        self.values.clear();
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    pub fn param(&mut self, segment: &str) -> NodeId {
        self.push(Op::Param(segment.to_string()))
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_string()))
    }

    pub fn constant(&mut self, value: RealArray) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a.0, b.0))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a.0, c))
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Offset(a.0, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a.0, b.0))
    }

    /// Sum of all elements, giving a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a.0))
    }

    /// Row sums of a matrix, giving a vector of length `rows`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumCols(a.0))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a.0))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a.0))
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSigmoid(a.0))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softplus(a.0))
    }

    /// `log Σ exp` over all elements.
    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSumExp(a.0))
    }

    /// Repeats a vector (or 1×c matrix) as every row of a `rows`×c matrix.
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> NodeId {
        self.push(Op::BroadcastRows(a.0, rows))
    }

    /// Selects elements by flat index.
    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        self.push(Op::Gather(a.0, indices))
    }

    /// Selects rows of a matrix.
    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> NodeId {
        self.push(Op::GatherRows(a.0, rows))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceCols(a.0, start, len))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatCols(a.0, b.0))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(a.0, shape))
    }

    /// `x · W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: NodeId, weight: NodeId, bias: NodeId, rows: usize) -> NodeId {
        let xw = self.matmul(x, weight);
        let b = self.broadcast_rows(bias, rows);
        self.add(xw, b)
    }

    pub fn is_evaluated(&self) -> bool {
        !self.ops.is_empty() && self.values.len() == self.ops.len()
    }

    pub fn value(&self, node: NodeId) -> Result<&RealArray> {
        if !self.is_evaluated() {
            return Err(TvoError::Usage("tape has not been evaluated".into()));
        }
        self.values
            .get(node.0)
            .ok_or_else(|| TvoError::Usage(format!("node {} is not on this tape", node.0)))
    }

    /// Evaluates every node; returns the value of the last recorded node,
    /// which must be a scalar.
    pub fn forward(&mut self, params: &ParamVector, inputs: &Inputs) -> Result<f64> {
        self.evaluate(params, inputs)?;
        let last = self.ops.len() - 1;
        self.values[last].item().ok_or_else(|| TvoError::Shape {
            node: last,
            op: self.ops[last].name(),
            detail: format!("output must be a scalar, got shape {:?}", self.values[last].shape),
        })
    }

    /// Evaluates every node without requiring a scalar output.
    pub fn evaluate(&mut self, params: &ParamVector, inputs: &Inputs) -> Result<()> {
        if self.ops.is_empty() {
            return Err(TvoError::Usage("empty tape".into()));
        }
        self.values.clear();
        self.values.reserve(self.ops.len());
        for i in 0..self.ops.len() {
            let v = self.eval_node(i, params, inputs)?;
            self.values.push(v);
        }
        self.layout = Some(params.layout().clone());
        Ok(())
    }

    fn shape_err(&self, node: usize, detail: String) -> TvoError {
        TvoError::Shape { node, op: self.ops[node].name(), detail }
    }

    fn eval_node(&self, i: usize, params: &ParamVector, inputs: &Inputs) -> Result<RealArray> {
        let v = &self.values;
        let unary = |a: usize, f: &dyn Fn(f64) -> f64| RealArray {
            shape: v[a].shape.clone(),
            data: v[a].data.iter().map(|&x| f(x)).collect(),
        };
        let same = |a: usize, b: usize| -> Result<()> {
            if v[a].shape != v[b].shape {
                return Err(self.shape_err(
                    i,
                    format!("operands have shapes {:?} and {:?}", v[a].shape, v[b].shape),
                ));
            }
            Ok(())
        };
        let out = match &self.ops[i] {
            Op::Param(name) => {
                let seg = params.layout().segment(name)?;
                RealArray { shape: seg.shape.clone(), data: params.values()[seg.range()].to_vec() }
            }
            Op::Input(name) => inputs
                .get(name)
                .cloned()
                .ok_or_else(|| TvoError::Unknown { kind: "input", name: name.clone() })?,
            Op::Const(c) => c.clone(),
            &Op::Add(a, b) => {
                same(a, b)?;
                zip_with(&v[a], &v[b], |x, y| x + y)
            }
            &Op::Sub(a, b) => {
                same(a, b)?;
                zip_with(&v[a], &v[b], |x, y| x - y)
            }
            &Op::Mul(a, b) => {
                same(a, b)?;
                zip_with(&v[a], &v[b], |x, y| x * y)
            }
            &Op::Neg(a) => unary(a, &|x| -x),
            &Op::Scale(a, c) => unary(a, &|x| c * x),
            &Op::Offset(a, c) => unary(a, &|x| x + c),
            &Op::MatMul(a, b) => {
                let (x, w) = (&v[a], &v[b]);
                if x.shape.len() != 2 || w.shape.len() != 2 || x.shape[1] != w.shape[0] {
                    return Err(self.shape_err(
                        i,
                        format!("cannot multiply {:?} by {:?}", x.shape, w.shape),
                    ));
                }
                let (m, k, n) = (x.shape[0], x.shape[1], w.shape[1]);
                RealArray { shape: vec![m, n], data: matmul(&x.data, &w.data, m, k, n) }
            }
            &Op::Sum(a) => RealArray::scalar(v[a].data.iter().sum()),
            &Op::SumCols(a) => {
                if v[a].shape.len() != 2 {
                    return Err(self.shape_err(i, format!("expected a matrix, got {:?}", v[a].shape)));
                }
                let c = v[a].shape[1];
                RealArray::vector(v[a].data.chunks(c).map(|r| r.iter().sum()).collect())
            }
            &Op::Exp(a) => unary(a, &f64::exp),
            &Op::Log(a) => unary(a, &f64::ln),
            &Op::Sigmoid(a) => unary(a, &sigmoid),
            &Op::Tanh(a) => unary(a, &f64::tanh),
            &Op::LogSigmoid(a) => unary(a, &log_sigmoid),
            &Op::Softplus(a) => unary(a, &softplus),
            &Op::LogSumExp(a) => RealArray::scalar(log_sum_exp(&v[a].data)),
            &Op::BroadcastRows(a, rows) => {
                let src = &v[a];
                let ok = src.shape.len() == 1 || (src.shape.len() == 2 && src.shape[0] == 1);
                if !ok || rows == 0 {
                    return Err(self.shape_err(
                        i,
                        format!("cannot broadcast {:?} to {rows} rows", src.shape),
                    ));
                }
                let c = src.data.len();
                let mut data = Vec::with_capacity(rows * c);
                for _ in 0..rows {
                    data.extend_from_slice(&src.data);
                }
                RealArray { shape: vec![rows, c], data }
            }
            Op::Gather(a, idx) => {
                let src = &v[*a];
                if idx.is_empty() {
                    return Err(self.shape_err(i, "empty index list".into()));
                }
                if let Some(&bad) = idx.iter().find(|&&j| j >= src.data.len()) {
                    return Err(self.shape_err(
                        i,
                        format!("index {bad} out of range for {} elements", src.data.len()),
                    ));
                }
                RealArray::vector(idx.iter().map(|&j| src.data[j]).collect())
            }
            Op::GatherRows(a, rows) => {
                let src = &v[*a];
                if src.shape.len() != 2 || rows.is_empty() {
                    return Err(self.shape_err(i, format!("cannot gather rows of {:?}", src.shape)));
                }
                let (r, c) = (src.shape[0], src.shape[1]);
                if let Some(&bad) = rows.iter().find(|&&j| j >= r) {
                    return Err(self.shape_err(i, format!("row {bad} out of range for {r} rows")));
                }
                let mut data = Vec::with_capacity(rows.len() * c);
                for &j in rows {
                    data.extend_from_slice(&src.data[j * c..(j + 1) * c]);
                }
                RealArray { shape: vec![rows.len(), c], data }
            }
            &Op::SliceCols(a, start, len) => {
                let src = &v[a];
                if src.shape.len() != 2 || len == 0 || start + len > src.shape[1] {
                    return Err(self.shape_err(
                        i,
                        format!("cannot take columns {start}..{} of {:?}", start + len, src.shape),
                    ));
                }
                let c = src.shape[1];
                let data = src.data.chunks(c).flat_map(|r| r[start..start + len].iter().copied()).collect();
                RealArray { shape: vec![src.shape[0], len], data }
            }
            &Op::ConcatCols(a, b) => {
                let (x, y) = (&v[a], &v[b]);
                if x.shape.len() != 2 || y.shape.len() != 2 || x.shape[0] != y.shape[0] {
                    return Err(self.shape_err(
                        i,
                        format!("cannot concatenate {:?} and {:?}", x.shape, y.shape),
                    ));
                }
                let (cx, cy) = (x.shape[1], y.shape[1]);
                let mut data = Vec::with_capacity(x.data.len() + y.data.len());
                for r in 0..x.shape[0] {
                    data.extend_from_slice(&x.data[r * cx..(r + 1) * cx]);
                    data.extend_from_slice(&y.data[r * cy..(r + 1) * cy]);
                }
                RealArray { shape: vec![x.shape[0], cx + cy], data }
            }
            Op::Reshape(a, shape) => {
                let src = &v[*a];
                if shape.iter().product::<usize>() != src.data.len() {
                    return Err(self.shape_err(
                        i,
                        format!("cannot reshape {:?} to {:?}", src.shape, shape),
                    ));
                }
                RealArray { shape: shape.clone(), data: src.data.clone() }
            }
        };
        Ok(out)
    }

    /// Gradient of the (scalar) last node with respect to every parameter.
    pub fn backward(&self) -> Result<Vec<f64>> {
        if !self.is_evaluated() {
            return Err(TvoError::Usage("backward called before forward".into()));
        }
        let last = self.ops.len() - 1;
        if self.values[last].len() != 1 {
            return Err(self.shape_err(last, "backward needs a scalar output".into()));
        }
        self.backward_from(&[(NodeId(last), &[1.0])])
    }

    /// Vector-Jacobian product: the gradient of `Σ_i ⟨seed_i, value(node_i)⟩`.
    pub fn backward_from(&self, seeds: &[(NodeId, &[f64])]) -> Result<Vec<f64>> {
        if !self.is_evaluated() {
            return Err(TvoError::Usage("backward called before forward".into()));
        }
        let layout = self.layout.as_ref().expect("evaluated tape has a layout");
        let mut grad = vec![0.0; layout.dim()];
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.ops.len()];
        let mut start = 0;
        for &(node, seed) in seeds {
            let n = self.values.get(node.0).map(RealArray::len).ok_or_else(|| {
                TvoError::Usage(format!("node {} is not on this tape", node.0))
            })?;
            if seed.len() != n {
                return Err(self.shape_err(
                    node.0,
                    format!("seed has {} elements, node has {n}", seed.len()),
                ));
            }
            accumulate(&mut adj[node.0], seed);
            start = start.max(node.0);
        }

        for i in (0..=start).rev() {
            let Some(g) = adj[i].take() else { continue };
            let v = &self.values;
            match &self.ops[i] {
                Op::Param(name) => {
                    let seg = layout.segment(name)?;
                    for (dst, src) in grad[seg.range()].iter_mut().zip(&g) {
                        *dst += src;
                    }
                }
                Op::Input(_) | Op::Const(_) => {}
                &Op::Add(a, b) => {
                    accumulate(&mut adj[a], &g);
                    accumulate(&mut adj[b], &g);
                }
                &Op::Sub(a, b) => {
                    accumulate(&mut adj[a], &g);
                    accumulate_with(&mut adj[b], g.len(), |j| -g[j]);
                }
                &Op::Mul(a, b) => {
                    let (va, vb) = (&v[a].data, &v[b].data);
                    accumulate_with(&mut adj[a], g.len(), |j| g[j] * vb[j]);
                    accumulate_with(&mut adj[b], g.len(), |j| g[j] * va[j]);
                }
                &Op::Neg(a) => accumulate_with(&mut adj[a], g.len(), |j| -g[j]),
                &Op::Scale(a, c) => accumulate_with(&mut adj[a], g.len(), |j| c * g[j]),
                &Op::Offset(a, _) => accumulate(&mut adj[a], &g),
                &Op::MatMul(a, b) => {
                    let (x, w) = (&v[a], &v[b]);
                    let (m, k, n) = (x.shape[0], x.shape[1], w.shape[1]);
                    // dX = G W^T, dW = X^T G
                    let dx = matmul_bt(&g, &w.data, m, n, k);
                    let dw = matmul_at(&x.data, &g, m, k, n);
                    accumulate(&mut adj[a], &dx);
                    accumulate(&mut adj[b], &dw);
                }
                &Op::Sum(a) => {
                    let s = g[0];
                    accumulate_with(&mut adj[a], v[a].len(), |_| s);
                }
                &Op::SumCols(a) => {
                    let c = v[a].shape[1];
                    accumulate_with(&mut adj[a], v[a].len(), |j| g[j / c]);
                }
                &Op::Exp(a) => {
                    let y = &v[i].data;
                    accumulate_with(&mut adj[a], g.len(), |j| g[j] * y[j]);
                }
                &Op::Log(a) => {
                    let x = &v[a].data;
                    accumulate_with(&mut adj[a], g.len(), |j| g[j] / x[j]);
                }
                &Op::Sigmoid(a) => {
                    let y = &v[i].data;
                    accumulate_with(&mut adj[a], g.len(), |j| g[j] * y[j] * (1.0 - y[j]));
                }
                &Op::Tanh(a) => {
                    let y = &v[i].data;
                    accumulate_with(&mut adj[a], g.len(), |j| g[j] * (1.0 - y[j] * y[j]))
                }
                &Op::LogSigmoid(a) => {
                    let x = &v[a].data;
                    accumulate_with(&mut adj[a], g.len(), |j| g[j] * sigmoid(-x[j]));
                }
                &Op::Softplus(a) => {
                    let x = &v[a].data;
                    accumulate_with(&mut adj[a], g.len(), |j| g[j] * sigmoid(x[j]));
                }
                &Op::LogSumExp(a) => {
                    let x = &v[a].data;
                    let lse = v[i].data[0];
                    let s = g[0];
                    accumulate_with(&mut adj[a], x.len(), |j| {
                        if lse.is_finite() {
                            s * (x[j] - lse).exp()
                        } else {
                            0.0
                        }
                    });
                }
                &Op::BroadcastRows(a, rows) => {
                    let c = v[a].len();
                    let mut acc = vec![0.0; c];
                    for r in 0..rows {
                        for (dst, src) in acc.iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *dst += src;
                        }
                    }
                    accumulate(&mut adj[a], &acc);
                }
                Op::Gather(a, idx) => {
                    let mut acc = vec![0.0; v[*a].len()];
                    for (gj, &j) in g.iter().zip(idx) {
                        acc[j] += gj;
                    }
                    accumulate(&mut adj[*a], &acc);
                }
                Op::GatherRows(a, rows) => {
                    let c = v[*a].shape[1];
                    let mut acc = vec![0.0; v[*a].len()];
                    for (r, &j) in rows.iter().enumerate() {
                        for (dst, src) in acc[j * c..(j + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *dst += src;
                        }
                    }
                    accumulate(&mut adj[*a], &acc);
                }
                &Op::SliceCols(a, start_col, len) => {
                    let c = v[a].shape[1];
                    let mut acc = vec![0.0; v[a].len()];
                    for r in 0..v[a].shape[0] {
                        acc[r * c + start_col..r * c + start_col + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut adj[a], &acc);
                }
                &Op::ConcatCols(a, b) => {
                    let (cx, cy) = (v[a].shape[1], v[b].shape[1]);
                    let rows = v[a].shape[0];
                    let mut ga = Vec::with_capacity(rows * cx);
                    let mut gb = Vec::with_capacity(rows * cy);
                    for r in 0..rows {
                        let row = &g[r * (cx + cy)..(r + 1) * (cx + cy)];
                        ga.extend_from_slice(&row[..cx]);
                        gb.extend_from_slice(&row[cx..]);
                    }
                    accumulate(&mut adj[a], &ga);
                    accumulate(&mut adj[b], &gb);
                }
                Op::Reshape(a, _) => accumulate(&mut adj[*a], &g),
            }
        }
        Ok(grad)
    }
}

impl fmt::Display for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, op) in self.ops.iter().enumerate() {
            writeln!(f, "%{i} = {}", op.name())?;
        }
        Ok(())
    }
}

fn zip_with(a: &RealArray, b: &RealArray, f: impl Fn(f64, f64) -> f64) -> RealArray {
    RealArray {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_with(slot: &mut Option<Vec<f64>>, n: usize, f: impl Fn(usize) -> f64) {
    match slot {
        Some(acc) => acc.iter_mut().enumerate().for_each(|(j, a)| *a += f(j)),
        None => *slot = Some((0..n).map(f).collect()),
    }
}

/// `[m,k] × [k,n]`.
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bpj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bpj;
            }
        }
    }
    out
}

/// `G [m,n] × W^T` where `W` is `[k,n]`.
fn matmul_bt(g: &[f64], w: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = gi.iter().zip(&w[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `X^T [k,m] × G [m,n]` where `X` is `[m,k]`.
fn matmul_at(x: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for (p, &xip) in x[i * k..(i + 1) * k].iter().enumerate() {
            if xip == 0.0 {
                continue;
            }
            for (o, &gij) in out[p * n..(p + 1) * n].iter_mut().zip(gi) {
                *o += xip * gij;
            }
        }
    }
    out
}

/// Central differences `(f(λ + h e_d) − f(λ − h e_d)) / 2h` for every coordinate.
pub fn finite_difference_gradient<F>(mut eval: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(TvoError::domain(format!("finite-difference step must be positive, got {h}")));
    }
    let mut point = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for d in 0..params.len() {
        let orig = point[d];
        point[d] = orig + h;
        let plus = eval(&point)?;
        point[d] = orig - h;
        let minus = eval(&point)?;
        point[d] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TvoError::Numerical(format!(
                "non-finite evaluation while differencing coordinate {d}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `max_d |a_d − b_d| / max_d |b_d|`, the infinity-norm relative error of `a`
/// against the reference `b`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

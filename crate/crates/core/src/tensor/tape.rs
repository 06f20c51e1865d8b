use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{as_matrix, kernels, Elementwise, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Binary(Elementwise, usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Ln(usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulConst(usize, Vec<f64>),
    GatherRows(usize, Vec<usize>),
    SliceCols(usize, usize, usize),
    ConcatCols(usize, usize),
    StackRows(Vec<usize>),
    Reshape(usize),
    MaskedSoftmax(usize, Vec<bool>),
    SumRows(usize),
    SegmentSum(usize, Vec<Option<usize>>),
    Index(usize, usize),
    Sum(usize),
}

#[derive(Debug)]
struct Node<'p> {
    shape: Vec<usize>,
    data: Cow<'p, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation record.
///
/// Nodes are appended in evaluation order, so every input precedes its
/// consumer and a single reverse sweep visits each node once. Parameters
/// can be registered by reference with [`Tape::param`] to avoid copying
/// them into every per-example tape.
#[derive(Debug)]
pub struct Tape<'p> {
    id: u64,
    nodes: Vec<Node<'p>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Accumulated gradient of one leaf.
#[derive(Debug, Clone, PartialEq)]
pub enum GradBuf {
    Dense(Vec<f64>),
    /// Row-sparse gradient of a matrix leaf that was only read through
    /// row gathers (embedding lookups).
    Rows {
        cols: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl GradBuf {
    /// Adds this gradient into a dense buffer of the leaf's full size.
    pub fn add_to(&self, out: &mut [f64]) {
        match self {
            GradBuf::Dense(g) => {
                for (o, x) in out.iter_mut().zip(g) {
                    *o += x;
                }
            }
            GradBuf::Rows { cols, rows } => {
                for (&r, g) in rows {
                    for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
        }
    }

    fn add_dense(&mut self, g: &[f64]) {
        match self {
            GradBuf::Dense(acc) => {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            GradBuf::Rows { .. } => {
                let mut dense = vec![0.0; g.len()];
                self.add_to(&mut dense);
                for (a, x) in dense.iter_mut().zip(g) {
                    *a += x;
                }
                *self = GradBuf::Dense(dense);
            }
        }
    }

    fn add_row(&mut self, cols: usize, row: usize, g: &[f64]) {
        match self {
            GradBuf::Dense(acc) => {
                for (a, x) in acc[row * cols..(row + 1) * cols].iter_mut().zip(g) {
                    *a += x;
                }
            }
            GradBuf::Rows { rows, .. } => {
                let acc = rows.entry(row).or_insert_with(|| vec![0.0; cols]);
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
        }
    }
}

/// Gradients of every leaf that requires them, from one backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    leaves: BTreeMap<usize, (usize, GradBuf)>,
}

impl Gradients {
    /// Dense gradient of `var`, or `None` if it is not a differentiable leaf
    /// of the differentiated tape. Leaves unreachable from the output get
    /// an all-zero gradient.
    pub fn get(&self, var: Var) -> Option<Vec<f64>> {
        if var.tape != self.tape {
            return None;
        }
        self.leaves.get(&var.index).map(|(numel, buf)| {
            let mut out = vec![0.0; *numel];
            buf.add_to(&mut out);
            out
        })
    }

    pub fn buf(&self, var: Var) -> Option<&GradBuf> {
        if var.tape != self.tape {
            return None;
        }
        self.leaves.get(&var.index).map(|(_, b)| b)
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Cow<'p, [f64]>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn node(&self, var: Var) -> Result<&Node<'p>> {
        if var.tape != self.id {
            return Err(Error::Usage("variable belongs to a different tape".into()));
        }
        self.nodes
            .get(var.index)
            .ok_or_else(|| Error::Usage("variable has not been recorded".into()))
    }

    fn idx(&self, var: Var) -> Result<usize> {
        self.node(var).map(|_| var.index)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, Cow::Owned(tensor.into_data()), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor, false)
    }

    /// Records a borrowed leaf without copying its data.
    pub fn param(&mut self, tensor: &'p Tensor, requires_grad: bool) -> Var {
        self.push(
            tensor.shape().to_vec(),
            Cow::Borrowed(tensor.data()),
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[self.idx(var).expect("foreign variable")].shape
    }

    pub fn data(&self, var: Var) -> &[f64] {
        &self.nodes[self.idx(var).expect("foreign variable")].data
    }

    pub fn value(&self, var: Var) -> Tensor {
        let n = &self.nodes[self.idx(var).expect("foreign variable")];
        Tensor::new(n.shape.clone(), n.data.to_vec()).expect("recorded shapes are valid")
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.data(var)[0]
    }

    fn matrix(&self, op: &'static str, i: usize) -> Result<(usize, usize)> {
        as_matrix(op, &self.nodes[i].shape)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.matrix("matmul", ia)?;
        let (k2, n) = self.matrix("matmul", ib)?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.nodes[ia].shape, &self.nodes[ib].shape));
        }
        let out = kernels::matmul(&self.nodes[ia].data, &self.nodes[ib].data, m, k, n);
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(vec![m, n], out.into(), Op::MatMul(ia, ib), rg))
    }

    /// `a` [m×k] times the transpose of `b` [n×k].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.matrix("matmul_nt", ia)?;
        let (n, k2) = self.matrix("matmul_nt", ib)?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", &self.nodes[ia].shape, &self.nodes[ib].shape));
        }
        let out = kernels::matmul_nt(&self.nodes[ia].data, &self.nodes[ib].data, m, k, n);
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(vec![m, n], out.into(), Op::MatMulNt(ia, ib), rg))
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        if !op.is_binary() {
            return Err(Error::Usage(format!("{op:?} is not a binary operation")));
        }
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(Error::dim("elementwise", &self.nodes[ia].shape, &self.nodes[ib].shape));
        }
        let out = kernels::binary(op, &self.nodes[ia].data, &self.nodes[ib].data);
        let rg = self.rg(&[ia, ib]);
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(shape, out.into(), Op::Binary(op, ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    /// Pointwise maximum; on exact ties the gradient goes to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Max, a, b)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ia = self.idx(a)?;
        let out: Vec<f64> = self.nodes[ia].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[ia].shape.clone();
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(shape, out.into(), op(ia), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, super::sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Ln)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out: Vec<f64> = self.nodes[ia].data.iter().map(|&x| x * factor).collect();
        let shape = self.nodes[ia].shape.clone();
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(shape, out.into(), Op::Scale(ia, factor), rg))
    }

    /// Adds the vector `row` [c] to every row of `a` [r×c].
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, iv) = (self.idx(a)?, self.idx(row)?);
        let (r, c) = self.matrix("add_row", ia)?;
        if self.nodes[iv].data.len() != c {
            return Err(Error::dim("add_row", &self.nodes[ia].shape, &self.nodes[iv].shape));
        }
        let v = &self.nodes[iv].data;
        let out: Vec<f64> = self.nodes[ia]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + v[i % c])
            .collect();
        let rg = self.rg(&[ia, iv]);
        Ok(self.push(vec![r, c], out.into(), Op::AddRow(ia, iv), rg))
    }

    /// Pointwise product with a constant factor array.
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let ia = self.idx(a)?;
        if factors.len() != self.nodes[ia].data.len() {
            return Err(Error::dim("mul_const", &self.nodes[ia].shape, &[factors.len()]));
        }
        let out: Vec<f64> = self.nodes[ia]
            .data
            .iter()
            .zip(&factors)
            .map(|(x, f)| x * f)
            .collect();
        let shape = self.nodes[ia].shape.clone();
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(shape, out.into(), Op::MulConst(ia, factors), rg))
    }

    /// Selects rows `ids` of the matrix `table`, giving [ids.len() × c].
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let (r, c) = self.matrix("gather_rows", it)?;
        if ids.is_empty() {
            return Err(Error::Usage("gather_rows needs at least one index".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Index {
                    what: "row gather",
                    index: id,
                    len: r,
                });
            }
            out.extend_from_slice(&self.nodes[it].data[id * c..(id + 1) * c]);
        }
        let rg = self.nodes[it].requires_grad;
        Ok(self.push(vec![ids.len(), c], out.into(), Op::GatherRows(it, ids.to_vec()), rg))
    }

    /// Single row `i` of `a` as a [1×c] matrix.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.gather_rows(a, &[i])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let (r, c) = self.matrix("slice_cols", ia)?;
        if start >= end || end > c {
            return Err(Error::Index {
                what: "column slice end",
                index: end,
                len: c,
            });
        }
        let src = &self.nodes[ia].data;
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(vec![r, end - start], out.into(), Op::SliceCols(ia, start, end), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (r, c1) = self.matrix("concat_cols", ia)?;
        let (r2, c2) = self.matrix("concat_cols", ib)?;
        if r != r2 {
            return Err(Error::dim("concat_cols", &self.nodes[ia].shape, &self.nodes[ib].shape));
        }
        let (da, db) = (&self.nodes[ia].data, &self.nodes[ib].data);
        let mut out = Vec::with_capacity(r * (c1 + c2));
        for i in 0..r {
            out.extend_from_slice(&da[i * c1..(i + 1) * c1]);
            out.extend_from_slice(&db[i * c2..(i + 1) * c2]);
        }
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(vec![r, c1 + c2], out.into(), Op::ConcatCols(ia, ib), rg))
    }

    /// Stacks row vectors (each [1×c] or [c]) into an [n×c] matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let ids: Vec<usize> = rows.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let Some(&first) = ids.first() else {
            return Err(Error::Usage("stack_rows needs at least one row".into()));
        };
        let c = self.nodes[first].data.len();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in &ids {
            let n = &self.nodes[i];
            let is_row = matches!(n.shape.as_slice(), [1, _] | [_]);
            if !is_row || n.data.len() != c {
                return Err(Error::dim("stack_rows", &self.nodes[first].shape, &n.shape));
            }
            out.extend_from_slice(&n.data);
        }
        let rg = self.rg(&ids);
        Ok(self.push(vec![ids.len(), c], out.into(), Op::StackRows(ids), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.idx(a)?;
        if shape.iter().product::<usize>() != self.nodes[ia].data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.nodes[ia].shape, &shape));
        }
        let data = self.nodes[ia].data.to_vec();
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(shape, data.into(), Op::Reshape(ia), rg))
    }

    /// Softmax along the last axis over positions where `mask` is true.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let ia = self.idx(a)?;
        let c = *self.nodes[ia].shape.last().expect("non-empty shape");
        if mask.len() != c || self.nodes[ia].shape.len() > 2 {
            return Err(Error::dim("masked_softmax", &self.nodes[ia].shape, &[mask.len()]));
        }
        let src = &self.nodes[ia].data;
        let mut out = vec![0.0; src.len()];
        for (o, x) in out.chunks_mut(c).zip(src.chunks(c)) {
            kernels::masked_softmax_row(x, mask, o)?;
        }
        let shape = self.nodes[ia].shape.clone();
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(shape, out.into(), Op::MaskedSoftmax(ia, mask.to_vec()), rg))
    }

    /// Column sums of a matrix [r×c], giving a vector [c].
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (_, c) = self.matrix("sum_rows", ia)?;
        let mut out = vec![0.0; c];
        for row in self.nodes[ia].data.chunks(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(vec![c], out.into(), Op::SumRows(ia), rg))
    }

    /// Sums entries of `a` into `buckets` bins. Position `i` goes to
    /// `segments[i]`, or nowhere when `None`. Accumulation is strictly
    /// left to right.
    pub fn segment_sum(&mut self, a: Var, segments: &[Option<usize>], buckets: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let src = &self.nodes[ia].data;
        if segments.len() != src.len() {
            return Err(Error::dim("segment_sum", &self.nodes[ia].shape, &[segments.len()]));
        }
        if buckets == 0 {
            return Err(Error::Usage("segment_sum needs at least one bucket".into()));
        }
        let mut out = vec![0.0; buckets];
        for (x, s) in src.iter().zip(segments) {
            if let Some(s) = *s {
                if s >= buckets {
                    return Err(Error::Index {
                        what: "segment",
                        index: s,
                        len: buckets,
                    });
                }
                out[s] += x;
            }
        }
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(vec![buckets], out.into(), Op::SegmentSum(ia, segments.to_vec()), rg))
    }

    /// Flat element `i` of `a` as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let len = self.nodes[ia].data.len();
        let x = *self.nodes[ia].data.get(i).ok_or(Error::Index {
            what: "element",
            index: i,
            len,
        })?;
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(vec![1], vec![x].into(), Op::Index(ia, i), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let total: f64 = self.nodes[ia].data.iter().sum();
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(vec![1], vec![total].into(), Op::Sum(ia), rg))
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as the
    /// output). Returns gradients for every leaf recorded with
    /// `requires_grad`.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        let out = self.idx(output).map_err(|_| {
            Error::Usage("backward called on a value that was never recorded".into())
        })?;
        if self.nodes[out].shape != seed.shape() {
            return Err(Error::dim("backward seed", &self.nodes[out].shape, seed.shape()));
        }

        let mut leaves: BTreeMap<usize, (usize, GradBuf)> = BTreeMap::new();
        for (i, n) in self.nodes[..=out].iter().enumerate() {
            if matches!(n.op, Op::Leaf) && n.requires_grad {
                leaves.insert(i, (n.data.len(), GradBuf::Rows {
                    cols: *n.shape.last().unwrap(),
                    rows: BTreeMap::new(),
                }));
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out + 1];
        grads[out] = Some(seed.data().to_vec());

        for i in (0..=out).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                if let Some(g) = grads[i].take() {
                    leaves.get_mut(&i).expect("leaf registered").1.add_dense(&g);
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads, &mut leaves);
        }

        // Dense leaves that saw no gradient at all are reported as zeros.
        for (numel, buf) in leaves.values_mut() {
            if let GradBuf::Rows { rows, .. } = buf {
                if rows.is_empty() {
                    *buf = GradBuf::Dense(vec![0.0; *numel]);
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            leaves,
        })
    }

    fn backprop(
        &self,
        node: &Node<'p>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        leaves: &mut BTreeMap<usize, (usize, GradBuf)>,
    ) {
        let nodes = &self.nodes;
        let mut send = |j: usize, contrib: Vec<f64>| {
            if !nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(acc) => {
                    for (a, x) in acc.iter_mut().zip(&contrib) {
                        *a += x;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let y = &node.data;
        match &node.op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[1];
                if nodes[*a].requires_grad {
                    send(*a, kernels::matmul_nt(g, &nodes[*b].data, m, n, k));
                }
                if nodes[*b].requires_grad {
                    send(*b, kernels::matmul_tn(&nodes[*a].data, g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[0];
                if nodes[*a].requires_grad {
                    send(*a, kernels::matmul(g, &nodes[*b].data, m, n, k));
                }
                if nodes[*b].requires_grad {
                    send(*b, kernels::matmul_tn(g, &nodes[*a].data, m, n, k));
                }
            }
            Op::Binary(op, a, b) => {
                let (da, db) = (&nodes[*a].data, &nodes[*b].data);
                match op {
                    Elementwise::Add => {
                        send(*a, g.to_vec());
                        send(*b, g.to_vec());
                    }
                    Elementwise::Sub => {
                        send(*a, g.to_vec());
                        send(*b, g.iter().map(|x| -x).collect());
                    }
                    Elementwise::Mul => {
                        send(*a, g.iter().zip(db.iter()).map(|(g, y)| g * y).collect());
                        send(*b, g.iter().zip(da.iter()).map(|(g, x)| g * x).collect());
                    }
                    Elementwise::Max => {
                        let first: Vec<bool> = da.iter().zip(db.iter()).map(|(x, y)| x >= y).collect();
                        send(*a, g.iter().zip(&first).map(|(g, &f)| if f { *g } else { 0.0 }).collect());
                        send(*b, g.iter().zip(&first).map(|(g, &f)| if f { 0.0 } else { *g }).collect());
                    }
                    Elementwise::Sigmoid | Elementwise::Tanh => unreachable!(),
                }
            }
            Op::Sigmoid(a) => send(*a, g.iter().zip(y.iter()).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Tanh(a) => send(*a, g.iter().zip(y.iter()).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Ln(a) => send(*a, g.iter().zip(nodes[*a].data.iter()).map(|(g, x)| g / x).collect()),
            Op::Scale(a, f) => send(*a, g.iter().map(|g| g * f).collect()),
            Op::AddRow(a, v) => {
                let c = nodes[*v].data.len();
                send(*a, g.to_vec());
                if nodes[*v].requires_grad {
                    let mut dv = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, x) in dv.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    send(*v, dv);
                }
            }
            Op::MulConst(a, f) => send(*a, g.iter().zip(f).map(|(g, f)| g * f).collect()),
            Op::GatherRows(t, ids) => {
                let src = &nodes[*t];
                let c = src.shape[1];
                if matches!(src.op, Op::Leaf) {
                    let buf = &mut leaves.get_mut(t).expect("leaf registered").1;
                    for (row, gi) in ids.iter().zip(g.chunks(c)) {
                        buf.add_row(c, *row, gi);
                    }
                } else {
                    let mut dt = vec![0.0; src.data.len()];
                    for (row, gi) in ids.iter().zip(g.chunks(c)) {
                        for (d, x) in dt[row * c..(row + 1) * c].iter_mut().zip(gi) {
                            *d += x;
                        }
                    }
                    send(*t, dt);
                }
            }
            Op::SliceCols(a, start, end) => {
                let c = nodes[*a].shape[1];
                let w = end - start;
                let mut da = vec![0.0; nodes[*a].data.len()];
                for (i, gi) in g.chunks(w).enumerate() {
                    da[i * c + start..i * c + end].copy_from_slice(gi);
                }
                send(*a, da);
            }
            Op::ConcatCols(a, b) => {
                let c1 = nodes[*a].shape[1];
                let c2 = nodes[*b].shape[1];
                let mut da = Vec::with_capacity(nodes[*a].data.len());
                let mut db = Vec::with_capacity(nodes[*b].data.len());
                for row in g.chunks(c1 + c2) {
                    da.extend_from_slice(&row[..c1]);
                    db.extend_from_slice(&row[c1..]);
                }
                send(*a, da);
                send(*b, db);
            }
            Op::StackRows(ids) => {
                let c = node.shape[1];
                for (j, gi) in ids.iter().zip(g.chunks(c)) {
                    send(*j, gi.to_vec());
                }
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::MaskedSoftmax(a, mask) => {
                let c = mask.len();
                let mut da = vec![0.0; g.len()];
                for ((d, gi), yi) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: f64 = gi.iter().zip(yi).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        if mask[j] {
                            d[j] = yi[j] * (gi[j] - dot);
                        }
                    }
                }
                send(*a, da);
            }
            Op::SumRows(a) => {
                let r = nodes[*a].shape[0];
                send(*a, g.repeat(r));
            }
            Op::SegmentSum(a, segments) => {
                send(*a, segments.iter().map(|s| s.map_or(0.0, |s| g[s])).collect());
            }
            Op::Index(a, i) => {
                let mut da = vec![0.0; nodes[*a].data.len()];
                da[*i] = g[0];
                send(*a, da);
            }
            Op::Sum(a) => send(*a, vec![g[0]; nodes[*a].data.len()]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(x).unwrap(), vec![6.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.0, 0.1]).unwrap(), true);
        let s = tape.masked_softmax(x, &[true; 4]).unwrap();
        let total = tape.sum(s).unwrap();
        let g = tape.backward(total, &Tensor::scalar(1.0)).unwrap().get(x).unwrap();
        for gi in g {
            assert!(gi.abs() < 1e-16, "{gi}");
        }
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.tanh(x).unwrap();
        let g = tape.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(x).unwrap(), vec![1.0]);
    }

    #[test]
    fn max_tie_routes_to_first_operand() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![2.0, 1.0]).unwrap(), true);
        let b = tape.leaf(Tensor::vector(vec![2.0, 5.0]).unwrap(), true);
        let m = tape.maximum(a, b).unwrap();
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(a).unwrap(), vec![1.0, 0.0]);
        assert_eq!(g.get(b).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn backward_on_unrecorded_var_is_usage_error() {
        let mut other = Tape::new();
        let x = other.leaf(Tensor::scalar(1.0), true);
        let tape = Tape::new();
        assert!(matches!(
            tape.backward(x, &Tensor::scalar(1.0)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn seed_shape_must_match() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
        assert!(matches!(
            tape.backward(x, &Tensor::scalar(1.0)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn gathered_leaf_gets_sparse_rows() {
        let table = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let mut tape = Tape::new();
        let t = tape.param(&table, true);
        let rows = tape.gather_rows(t, &[2, 2]).unwrap();
        let s = tape.sum(rows).unwrap();
        let g = tape.backward(s, &Tensor::scalar(1.0)).unwrap();
        match g.buf(t).unwrap() {
            GradBuf::Rows { rows, .. } => {
                assert_eq!(rows.len(), 1);
                assert_eq!(rows[&2], vec![2.0, 2.0]);
            }
            other => panic!("expected sparse rows, got {other:?}"),
        }
        assert_eq!(g.get(t).unwrap(), vec![0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn record_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::from_rows(&[vec![0.1, -0.7], vec![0.4, 0.9]]).unwrap(), true);
            let b = tape.matmul_nt(a, a).unwrap();
            let c = tape.tanh(b).unwrap();
            let s = tape.masked_softmax(c, &[true, true]).unwrap();
            let l = tape.index(s, 1).unwrap();
            let out = tape.ln(l).unwrap();
            let g = tape.backward(out, &Tensor::scalar(1.0)).unwrap();
            (tape.scalar(out).to_bits(), g.get(a).unwrap().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    /// Builds a scalar loss exercising one op on random inputs, then compares
    /// analytic and finite-difference gradients.
    fn check_op(op: usize, r: usize, c: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_t = |rows: usize, cols: usize| {
            Tensor::new(
                vec![rows, cols],
                (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let params = vec![rand_t(r, c), rand_t(r, c), rand_t(c, r), rand_t(1, c)];
        let weights = rand_t(r, c).into_data();
        let mask: Vec<bool> = (0..c).map(|j| j % 3 != 2).collect();
        let loss = |p: &[Tensor]| -> crate::Result<(f64, Vec<Vec<f64>>)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.param(t, true)).collect();
            let (a, b, bt, v) = (vars[0], vars[1], vars[2], vars[3]);
            let y = match op {
                0 => tape.matmul(a, bt)?,
                1 => tape.matmul_nt(a, b)?,
                2 => tape.add(a, b)?,
                3 => tape.sub(a, b)?,
                4 => tape.mul(a, b)?,
                5 => tape.maximum(a, b)?,
                6 => tape.sigmoid(a)?,
                7 => tape.tanh(a)?,
                8 => tape.add_row(a, v)?,
                9 => tape.masked_softmax(a, &mask)?,
                10 => tape.concat_cols(a, b)?,
                11 => {
                    let s = tape.sum_rows(a)?;
                    tape.masked_softmax(s, &mask)?
                }
                12 => {
                    let rows: Vec<Var> = (0..r).rev().map(|i| tape.row(a, i)).collect::<crate::Result<_>>()?;
                    tape.stack_rows(&rows)?
                }
                13 => {
                    let e = tape.sigmoid(a)?;
                    let k = (r * c).min(3);
                    let segs: Vec<Option<usize>> = (0..r * c)
                        .map(|i| if i >= k && i % 4 == 3 { None } else { Some(i % k) })
                        .collect();
                    let f = tape.reshape(e, vec![r * c])?;
                    let s = tape.segment_sum(f, &segs, k)?;
                    tape.ln(s)?
                }
                14 => {
                    let s = tape.slice_cols(a, 0, c.div_ceil(2))?;
                    tape.scale(s, -1.7)?
                }
                _ => unreachable!(),
            };
            let n = tape.shape(y).iter().product::<usize>();
            let w = tape.constant(Tensor::new(tape.shape(y).to_vec(), weights.iter().cycle().take(n).copied().collect())?);
            let prod = tape.mul(y, w)?;
            let out = tape.sum(prod)?;
            let g = tape.backward(out, &Tensor::scalar(1.0))?;
            Ok((tape.scalar(out), vars.iter().map(|&v| g.get(v).unwrap()).collect()))
        };
        grad_check(loss, &params, 1e-5).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn every_op_matches_finite_differences(op in 0usize..15, r in 1usize..5, c in 1usize..6, seed in any::<u64>()) {
            let err = check_op(op, r, c, seed);
            prop_assert!(err < 1e-4, "op {op} shape {r}x{c}: relative error {err}");
        }
    }
}

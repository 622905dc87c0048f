use std::sync::atomic::{AtomicU32, Ordering};

use super::{NumericsError, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

/// A contiguous run of rows that attend to each other causally.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Log(usize),
    Exp(usize),
    RmsNorm {
        x: usize,
        offset: usize,
        inv_rms: Vec<f64>,
    },
    Gelu(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    MaskedFill {
        x: usize,
        mask: Vec<bool>,
    },
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    GatherCols {
        x: usize,
        idx: Vec<usize>,
    },
    Map {
        x: usize,
        deriv: Vec<f64>,
    },
    Dot {
        x: usize,
        weights: Vec<f64>,
    },
    CausalAttention {
        q: usize,
        k: usize,
        v: usize,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations in forward order so adjoints can be replayed
/// in exact reverse order.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by the variables of the
/// tape they came from.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; exact zeros when `var` is not on a path to the root.
    pub fn wrt(&self, var: Var) -> Result<Tensor, NumericsError> {
        if var.tape != self.tape || var.idx as usize >= self.grads.len() {
            return Err(NumericsError::DanglingVar);
        }
        let i = var.idx as usize;
        let shape = self.shapes[i].clone();
        Ok(match &self.grads[i] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(shape),
        })
    }

    /// Whether `var` received any adjoint contribution at all.
    pub fn touched(&self, var: Var) -> bool {
        var.tape == self.tape
            && self
                .grads
                .get(var.idx as usize)
                .is_some_and(|g| g.is_some())
    }
}

fn mismatch(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

/// `c = a · b + beta · c` with explicit strides; `c` is row-major `m × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: slices cover every index addressed by the given strides and
    // dimensions, which callers derive from the operand shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in x {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize, NumericsError> {
        if v.tape != self.id || v.idx as usize >= self.nodes.len() {
            return Err(NumericsError::DanglingVar);
        }
        Ok(v.idx as usize)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var, NumericsError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Ok(Var { tape: self.id, idx })
    }

    fn push_tensor(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_tensor(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_tensor(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor, NumericsError> {
        let i = self.index(v)?;
        Ok(&self.nodes[i].value)
    }

    fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<(), NumericsError> {
        let (sa, sb) = (self.node(a).value.shape(), self.node(b).value.shape());
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, i: usize) -> Result<(usize, usize), NumericsError> {
        let s = self.node(i).value.shape();
        if s.len() != 2 {
            return Err(mismatch(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var, NumericsError> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        self.same_shape(name, a, b)?;
        let data = self
            .node(a)
            .value
            .data()
            .iter()
            .zip(self.node(b).value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.node(a).value.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(name, shape, data, op(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        let a = self.index(a)?;
        let data = self.node(a).value.data().iter().map(|&x| x * c).collect();
        let shape = self.node(a).value.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push("scale", shape, data, Op::Scale(a, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.node(a).value.data(),
            k,
            1,
            self.node(b).value.data(),
            n,
            1,
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let a = self.index(a)?;
        let (r, c) = self.matrix_dims("transpose", a)?;
        let x = self.node(a).value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push("transpose", vec![c, r], out, Op::Transpose(a), rg)
    }

    fn row_op(
        &mut self,
        name: &'static str,
        a: Var,
        f: fn(&[f64], &mut [f64]),
        op: fn(usize) -> Op,
    ) -> Result<Var, NumericsError> {
        let a = self.index(a)?;
        let (r, c) = self.matrix_dims(name, a)?;
        let x = self.node(a).value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            f(&x[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        self.push(name, vec![r, c], out, op(a), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.row_op("softmax", a, softmax_row, Op::Softmax)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.row_op("log_softmax", a, log_softmax_row, Op::LogSoftmax)
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: fn(f64) -> f64,
        op: fn(usize) -> Op,
    ) -> Result<Var, NumericsError> {
        let a = self.index(a)?;
        let data = self.node(a).value.data().iter().map(|&x| f(x)).collect();
        let shape = self.node(a).value.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(name, shape, data, op(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary("log", a, f64::ln, Op::Log)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary("exp", a, f64::exp, Op::Exp)
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary("gelu", a, |x| x * std_normal_cdf(x), Op::Gelu)
    }

    /// RMS normalization of each row of `x`, scaled by `1 + offset`.
    pub fn rms_norm(&mut self, x: Var, offset: Var, eps: f64) -> Result<Var, NumericsError> {
        let (x, o) = (self.index(x)?, self.index(offset)?);
        let (r, c) = self.matrix_dims("rms_norm", x)?;
        if self.node(o).value.shape() != [c] {
            return Err(mismatch(
                "rms_norm",
                format!("offset {:?} for width {c}", self.node(o).value.shape()),
            ));
        }
        let xs = self.node(x).value.data();
        let off = self.node(o).value.data();
        let mut out = vec![0.0; r * c];
        let mut inv_rms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..c {
                out[i * c + j] = row[j] * inv * (1.0 + off[j]);
            }
        }
        let rg = self.rg(&[x, o]);
        self.push(
            "rms_norm",
            vec![r, c],
            out,
            Op::RmsNorm {
                x,
                offset: o,
                inv_rms,
            },
            rg,
        )
    }

    /// Gathers rows `ids` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let t = self.index(table)?;
        let (rows, d) = self.matrix_dims("embedding", t)?;
        let src = self.node(t).value.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[t]);
        self.push(
            "embedding",
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table: t,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let x = self.index(x)?;
        let (r, c) = self.matrix_dims("slice_cols", x)?;
        if start >= end || end > c {
            return Err(mismatch("slice_cols", format!("{start}..{end} of {c}")));
        }
        let w = end - start;
        let src = self.node(x).value.data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let rg = self.rg(&[x]);
        self.push("slice_cols", vec![r, w], out, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let ids = parts
            .iter()
            .map(|&p| self.index(p))
            .collect::<Result<Vec<_>, _>>()?;
        let Some(&first) = ids.first() else {
            return Err(mismatch("concat_cols", "no inputs".into()));
        };
        let (r, _) = self.matrix_dims("concat_cols", first)?;
        let mut total = 0;
        for &i in &ids {
            let (ri, ci) = self.matrix_dims("concat_cols", i)?;
            if ri != r {
                return Err(mismatch("concat_cols", format!("row counts {r} vs {ri}")));
            }
            total += ci;
        }
        let mut out = Vec::with_capacity(r * total);
        for row in 0..r {
            for &i in &ids {
                out.extend_from_slice(self.node(i).value.row(row));
            }
        }
        let rg = self.rg(&ids);
        self.push("concat_cols", vec![r, total], out, Op::ConcatCols(ids), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let x = self.index(x)?;
        let (r, c) = self.matrix_dims("slice_rows", x)?;
        if start >= end || end > r {
            return Err(mismatch("slice_rows", format!("{start}..{end} of {r}")));
        }
        let out = self.node(x).value.data()[start * c..end * c].to_vec();
        let rg = self.rg(&[x]);
        self.push(
            "slice_rows",
            vec![end - start, c],
            out,
            Op::SliceRows { x, start },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let ids = parts
            .iter()
            .map(|&p| self.index(p))
            .collect::<Result<Vec<_>, _>>()?;
        let Some(&first) = ids.first() else {
            return Err(mismatch("concat_rows", "no inputs".into()));
        };
        let (_, c) = self.matrix_dims("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &i in &ids {
            let (ri, ci) = self.matrix_dims("concat_rows", i)?;
            if ci != c {
                return Err(mismatch("concat_rows", format!("col counts {c} vs {ci}")));
            }
            rows += ri;
            out.extend_from_slice(self.node(i).value.data());
        }
        let rg = self.rg(&ids);
        self.push("concat_rows", vec![rows, c], out, Op::ConcatRows(ids), rg)
    }

    /// Replaces entries where `mask` is true with `fill`; those entries pass no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], fill: f64) -> Result<Var, NumericsError> {
        let x = self.index(x)?;
        let n = self.node(x).value.len();
        if mask.len() != n {
            return Err(mismatch("masked_fill", format!("mask {} vs {n}", mask.len())));
        }
        let data = self
            .node(x)
            .value
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let shape = self.node(x).value.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(
            "masked_fill",
            shape,
            data,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let x = self.index(x)?;
        let s = self.node(x).value.data().iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let x = self.index(x)?;
        let v = self.node(x).value.data();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push("mean", Vec::new(), vec![m], Op::Mean(x), rg)
    }

    /// Sums each row of a matrix into a vector.
    pub fn row_sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let x = self.index(x)?;
        let (r, c) = self.matrix_dims("row_sum", x)?;
        let v = self.node(x).value.data();
        let out = (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(&[x]);
        self.push("row_sum", vec![r], out, Op::RowSum(x), rg)
    }

    /// Picks `x[i, idx[i]]` for every row, producing a vector.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let x = self.index(x)?;
        let (r, c) = self.matrix_dims("gather_cols", x)?;
        if idx.len() != r {
            return Err(mismatch("gather_cols", format!("{} indices for {r} rows", idx.len())));
        }
        let v = self.node(x).value.data();
        let mut out = Vec::with_capacity(r);
        for (i, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_cols",
                    index: j,
                    bound: c,
                });
            }
            out.push(v[i * c + j]);
        }
        let rg = self.rg(&[x]);
        self.push(
            "gather_cols",
            vec![r],
            out,
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Pointwise map where `f(i, x_i)` returns the value and its local derivative.
    pub fn map(
        &mut self,
        x: Var,
        f: impl Fn(usize, f64) -> (f64, f64),
    ) -> Result<Var, NumericsError> {
        let x = self.index(x)?;
        let (vals, deriv): (Vec<f64>, Vec<f64>) = self
            .node(x)
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i, v))
            .unzip();
        if deriv.iter().any(|d| !d.is_finite()) {
            return Err(NumericsError::NonFinite { op: "map" });
        }
        let shape = self.node(x).value.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push("map", shape, vals, Op::Map { x, deriv }, rg)
    }

    /// Scalar `Σ x_i w_i` against constant weights, summed left to right.
    pub fn dot_const(&mut self, x: Var, weights: &[f64]) -> Result<Var, NumericsError> {
        let x = self.index(x)?;
        let v = self.node(x).value.data();
        if v.len() != weights.len() {
            return Err(mismatch("dot_const", format!("{} vs {}", v.len(), weights.len())));
        }
        let s = v.iter().zip(weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x]);
        self.push(
            "dot_const",
            Vec::new(),
            vec![s],
            Op::Dot {
                x,
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    /// Multi-head causal self-attention over independent row segments.
    ///
    /// `q`, `k`, `v` are `[rows × d]`; head `h` uses columns `h·d/heads ..`.
    /// Row `i` of a segment attends to rows `0..=i` of the same segment.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var, NumericsError> {
        let (q, k, v) = (self.index(q)?, self.index(k)?, self.index(v)?);
        self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        let (rows, d) = self.matrix_dims("causal_attention", q)?;
        if heads == 0 || d % heads != 0 {
            return Err(mismatch("causal_attention", format!("{heads} heads for width {d}")));
        }
        for s in segments {
            if s.len == 0 || s.start + s.len > rows {
                return Err(mismatch("causal_attention", format!("segment {s:?} in {rows} rows")));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (
            self.node(q).value.data(),
            self.node(k).value.data(),
            self.node(v).value.data(),
        );
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for seg in segments {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..seg.len {
                    let qi = &qs[(seg.start + i) * d + c0..(seg.start + i) * d + c0 + dh];
                    scores.clear();
                    for j in 0..=i {
                        let kj = &ks[(seg.start + j) * d + c0..(seg.start + j) * d + c0 + dh];
                        scores.push(qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale);
                    }
                    let base = probs.len();
                    probs.resize(base + i + 1, 0.0);
                    softmax_row(&scores, &mut probs[base..]);
                    let o = &mut out[(seg.start + i) * d + c0..(seg.start + i) * d + c0 + dh];
                    for j in 0..=i {
                        let p = probs[base + j];
                        let vj = &vs[(seg.start + j) * d + c0..(seg.start + j) * d + c0 + dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += p * vc;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            "causal_attention",
            vec![rows, d],
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar root. Each recorded operation is visited
    /// once, newest first.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumericsError> {
        let root = self.index(root)?;
        if self.nodes[root].value.len() != 1 {
            return Err(NumericsError::NonScalarRoot(
                self.nodes[root].value.shape().to_vec(),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[root].requires_grad {
            grads[root] = Some(vec![1.0]);
        }
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let nodes = &self.nodes;
        let mut acc = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[target].requires_grad {
                return;
            }
            let slot =
                grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                acc(*a, &mut |s| {
                    for ((s, g), b) in s.iter_mut().zip(g).zip(bv) {
                        *s += g * b;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, g), a) in s.iter_mut().zip(g).zip(av) {
                        *s += g * a;
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                let (m, k) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                let n = nodes[*b].value.cols();
                // dA = G · Bᵀ, dB = Aᵀ · G
                acc(*a, &mut |s| gemm(m, n, k, g, n, 1, bv, 1, n, 1.0, s));
                acc(*b, &mut |s| gemm(k, m, n, av, 1, k, g, n, 1, 1.0, s));
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                acc(*a, &mut |s| {
                    for ((srow, grow), yrow) in
                        s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((s, g), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += y * (g - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                acc(*a, &mut |s| {
                    for ((srow, grow), yrow) in
                        s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c))
                    {
                        let total: f64 = grow.iter().sum();
                        for ((s, g), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += g - y.exp() * total;
                        }
                    }
                });
            }
            Op::Log(a) => {
                let x = nodes[*a].value.data();
                acc(*a, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(x) {
                        *s += g / x;
                    }
                });
            }
            Op::Exp(a) => {
                acc(*a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(y) {
                        *s += g * y;
                    }
                });
            }
            Op::Gelu(a) => {
                let x = nodes[*a].value.data();
                acc(*a, &mut |s| {
                    for ((s, g), &x) in s.iter_mut().zip(g).zip(x) {
                        *s += g * (std_normal_cdf(x) + x * std_normal_pdf(x));
                    }
                });
            }
            Op::RmsNorm { x, offset, inv_rms } => {
                let xv = nodes[*x].value.data();
                let off = nodes[*offset].value.data();
                let c = off.len();
                acc(*offset, &mut |s| {
                    for (r, (grow, xrow)) in g.chunks(c).zip(xv.chunks(c)).enumerate() {
                        for j in 0..c {
                            s[j] += grow[j] * xrow[j] * inv_rms[r];
                        }
                    }
                });
                acc(*x, &mut |s| {
                    for (r, ((srow, grow), xrow)) in
                        s.chunks_mut(c).zip(g.chunks(c)).zip(xv.chunks(c)).enumerate()
                    {
                        let inv = inv_rms[r];
                        // gx = inv * (gh - xh * mean(gh * xh)), gh = g * (1 + offset)
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += grow[j] * (1.0 + off[j]) * xrow[j] * inv;
                        }
                        let mean = dot / c as f64;
                        for j in 0..c {
                            let gh = grow[j] * (1.0 + off[j]);
                            srow[j] += inv * (gh - xrow[j] * inv * mean);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[*table].value.cols();
                acc(*table, &mut |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            s[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = nodes[*x].value.cols();
                let w = node.value.cols();
                acc(*x, &mut |s| {
                    for (r, grow) in g.chunks(w).enumerate() {
                        for (j, gv) in grow.iter().enumerate() {
                            s[r * c + start + j] += gv;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    acc(p, &mut |s| {
                        for (r, srow) in s.chunks_mut(w).enumerate() {
                            for (j, sv) in srow.iter_mut().enumerate() {
                                *sv += g[r * total + col + j];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = nodes[*x].value.cols();
                acc(*x, &mut |s| {
                    for (sv, gv) in s[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *sv += gv;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    acc(p, &mut |s| {
                        for (sv, gv) in s.iter_mut().zip(&g[off..off + len]) {
                            *sv += gv;
                        }
                    });
                    off += len;
                }
            }
            Op::MaskedFill { x, mask } => {
                acc(*x, &mut |s| {
                    for ((s, g), &m) in s.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *s += g;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0]));
            }
            Op::Mean(x) => {
                let n = nodes[*x].value.len() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::RowSum(x) => {
                let c = nodes[*x].value.cols();
                acc(*x, &mut |s| {
                    for (srow, gv) in s.chunks_mut(c).zip(g) {
                        srow.iter_mut().for_each(|s| *s += gv);
                    }
                });
            }
            Op::GatherCols { x, idx } => {
                let c = nodes[*x].value.cols();
                acc(*x, &mut |s| {
                    for (r, (&j, gv)) in idx.iter().zip(g).enumerate() {
                        s[r * c + j] += gv;
                    }
                });
            }
            Op::Map { x, deriv } => {
                acc(*x, &mut |s| {
                    for ((s, g), d) in s.iter_mut().zip(g).zip(deriv) {
                        *s += g * d;
                    }
                });
            }
            Op::Dot { x, weights } => {
                acc(*x, &mut |s| {
                    for (s, w) in s.iter_mut().zip(weights) {
                        *s += g[0] * w;
                    }
                });
            }
            Op::CausalAttention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let d = node.value.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qs, ks, vs) = (
                    nodes[*q].value.data(),
                    nodes[*k].value.data(),
                    nodes[*v].value.data(),
                );
                let mut gq = vec![0.0; qs.len()];
                let mut gk = vec![0.0; ks.len()];
                let mut gv = vec![0.0; vs.len()];
                let mut dp = Vec::new();
                let mut pos = 0;
                for seg in segments {
                    for h in 0..*heads {
                        let c0 = h * dh;
                        for i in 0..seg.len {
                            let ri = (seg.start + i) * d + c0;
                            let go = &g[ri..ri + dh];
                            let p = &probs[pos..pos + i + 1];
                            pos += i + 1;
                            dp.clear();
                            for j in 0..=i {
                                let rj = (seg.start + j) * d + c0;
                                dp.push(go.iter().zip(&vs[rj..rj + dh]).map(|(a, b)| a * b).sum::<f64>());
                                for (gvc, goc) in gv[rj..rj + dh].iter_mut().zip(go) {
                                    *gvc += p[j] * goc;
                                }
                            }
                            let wsum: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - wsum) * scale;
                                let rj = (seg.start + j) * d + c0;
                                for c in 0..dh {
                                    gq[ri + c] += ds * ks[rj + c];
                                    gk[rj + c] += ds * qs[ri + c];
                                }
                            }
                        }
                    }
                }
                acc(*q, &mut |s| s.iter_mut().zip(&gq).for_each(|(s, g)| *s += g));
                acc(*k, &mut |s| s.iter_mut().zip(&gk).for_each(|(s, g)| *s += g));
                acc(*v, &mut |s| s.iter_mut().zip(&gv).for_each(|(s, g)| *s += g));
            }
        }
    }
}

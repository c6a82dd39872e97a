//! Dense f64 tensors and a dynamic reverse-mode tape.
//!
//! Every forward pass records onto a fresh [`Tape`]. Operations return [`Var`]
//! handles; the tape keeps the values, and [`Tape::backward`] replays the
//! recorded operations in reverse to fill in gradients.

use crate::activations;
use crate::error::{Error, Result};

/// An n-dimensional array of `f64` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Decomposition of a shape around one axis: `outer × len × inner`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lanes {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl Lanes {
    fn new(shape: &[usize], axis: usize) -> Self {
        Lanes {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    #[inline]
    fn base(&self, o: usize, i: usize) -> usize {
        o * self.len * self.inner + i
    }

    /// Calls `f(base, stride)` once per lane.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                f(self.base(o, i), self.inner);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Abs,
}

#[derive(Clone, Debug)]
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

#[derive(Clone, Debug)]
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// Strides of the logical `[k, n]` right operand.
    b_strides: (usize, usize),
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        plan: MatmulPlan,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bcast: Option<Broadcast>,
    },
    AddScalar(Var),
    Scale(Var, f64),
    Unary(UnaryKind, Var),
    Reshape(Var),
    Permute {
        a: Var,
        out_strides_in: Vec<usize>,
    },
    SumAll(Var),
    SumAxis(Var, Lanes),
    Softmax(Var, Lanes),
    LogSoftmax(Var, Lanes),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        lanes: Lanes,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sparsemax(Var, Lanes),
    ArgmaxSte(Var, f64),
    Slice {
        a: Var,
        src: Lanes,
        start: usize,
        len: usize,
    },
    GatherRows {
        a: Var,
        rows: Vec<usize>,
        row_len: usize,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation. Operations are appended in evaluation order, so the
/// node list is always topologically sorted.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (0 along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + nd - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Walks every index of `shape`, calling `f(flat, ia, ib)` with the offsets
/// into two strided operands.
fn odometer(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let Some((&inner, outer_shape)) = shape.split_last() else {
        f(0, 0, 0);
        return;
    };
    let nd = outer_shape.len();
    let (step_a, step_b) = (sa[nd], sb[nd]);
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    for _ in 0..total / inner {
        // innermost axis as a plain strided loop
        let (mut a, mut b) = (ia, ib);
        for _ in 0..inner {
            f(o, a, b);
            o += 1;
            a += step_a;
            b += step_b;
        }
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < outer_shape[d] {
                break;
            }
            ia -= sa[d] * outer_shape[d];
            ib -= sb[d] * outer_shape[d];
            idx[d] = 0;
        }
    }
}

/// `c = a·b + beta·c` on strided row-major blocks.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserted extents keep every strided access in bounds, and
    // `c` does not alias `a` or `b` (distinct borrows).
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
            rsc as isize,
            csc as isize,
        );
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` with no connection to its inputs.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ---- linear algebra ------------------------------------------------

    /// Batched matrix product `[.., m, k] × [.., k, n] → [.., m, n]` with
    /// broadcasting over the leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes: `[.., m, k] × [.., n, k] → [.., m, n]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::Shape {
            op: if trans_b { "matmul_t" } else { "matmul" },
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != k2 {
            return Err(mismatch());
        }
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = broadcast_shape(ba, bb).ok_or_else(mismatch)?;
        let nb: usize = batch.iter().product();
        let mut a_offsets = Vec::with_capacity(nb);
        let mut b_offsets = Vec::with_capacity(nb);
        let stra = broadcast_strides(ba, &batch);
        let strb = broadcast_strides(bb, &batch);
        odometer(&batch, &stra, &strb, |_, ia, ib| {
            a_offsets.push(ia * m * k);
            b_offsets.push(ib * k * n);
        });
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; nb * m * n];
        for bi in 0..nb {
            gemm(
                m,
                k,
                n,
                &av[a_offsets[bi]..],
                (k, 1),
                &bv[b_offsets[bi]..],
                b_strides,
                0.0,
                &mut out[bi * m * n..],
                (n, 1),
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        let plan = MatmulPlan {
            m,
            k,
            n,
            b_strides,
            a_offsets,
            b_offsets,
        };
        Ok(self.push(Tensor { shape, data: out }, rg, Op::MatMul { a, b, plan }))
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let apply = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
            BinaryKind::Min => x.min(y),
            BinaryKind::Max => x.max(y),
        };
        let (value, bcast) = if sa == sb {
            let data = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| apply(x, y))
                .collect();
            (Tensor { shape: sa.to_vec(), data }, None)
        } else {
            let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::Shape {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })?;
            let a_strides = broadcast_strides(sa, &out_shape);
            let b_strides = broadcast_strides(sb, &out_shape);
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let mut data = vec![0.0; out_shape.iter().product()];
            odometer(&out_shape, &a_strides, &b_strides, |o, ia, ib| {
                data[o] = apply(av[ia], bv[ib]);
            });
            (
                Tensor {
                    shape: out_shape.clone(),
                    data,
                },
                Some(Broadcast {
                    out_shape,
                    a_strides,
                    b_strides,
                }),
            )
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Binary { kind, a, b, bcast }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    /// Elementwise minimum; on ties the gradient goes to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Min, a, b, "minimum")
    }

    /// Elementwise maximum; on ties the gradient goes to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b, "maximum")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|x| x + c).collect(),
        };
        let rg = self.rg(a);
        self.push(value, rg, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|x| x * c).collect(),
        };
        let rg = self.rg(a);
        self.push(value, rg, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let t = self.value(a);
        let f = |x: f64| match kind {
            UnaryKind::Relu => {
                // NaN must survive so non-finite stages can be reported.
                if x > 0.0 || x.is_nan() {
                    x
                } else {
                    0.0
                }
            }
            UnaryKind::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Abs => x.abs(),
        };
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(value, rg, Op::Unary(kind, a))
    }

    /// `max(x, 0)`; the gradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }

    // ---- layout --------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape {
                op: "permute",
                lhs: shape,
                rhs: perm.to_vec(),
            });
        }
        let in_strides = contiguous_strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out_strides_in: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        let zeros = vec![0; out_shape.len()];
        odometer(&out_shape, &out_strides_in, &zeros, |o, i, _| data[o] = src[i]);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            rg,
            Op::Permute { a, out_strides_in },
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let nd = self.shape(a).len();
        if d0 >= nd || d1 >= nd {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(a).to_vec(),
                rhs: vec![d0, d1],
            });
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let src = Lanes::new(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let v = self.value(a).data();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..src.outer {
            let base = o * src.len * src.inner + start * src.inner;
            data.extend_from_slice(&v[base..base + len * src.inner]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            rg,
            Op::Slice { a, src, start, len },
        ))
    }

    /// Selects rows (entries of axis 0), repeats allowed.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: shape,
                rhs: rows.to_vec(),
            });
        }
        let row_len: usize = shape[1..].iter().product();
        let v = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            data.extend_from_slice(&v[r * row_len..(r + 1) * row_len]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            rg,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
                row_len,
            },
        ))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis(a, axis, "sum_axis")?;
        let lanes = Lanes::new(&shape, axis);
        let v = self.value(a).data();
        let mut data = vec![0.0; lanes.outer * lanes.inner];
        for o in 0..lanes.outer {
            for k in 0..lanes.len {
                let row = &v[(o * lanes.len + k) * lanes.inner..][..lanes.inner];
                for (d, x) in data[o * lanes.inner..][..lanes.inner].iter_mut().zip(row) {
                    *d += x;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            rg,
            Op::SumAxis(a, lanes),
        ))
    }

    fn check_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<Vec<usize>> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op,
                lhs: shape,
                rhs: vec![axis],
            });
        }
        Ok(shape)
    }

    // ---- normalizations ------------------------------------------------

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis(a, axis, "softmax")?;
        let lanes = Lanes::new(&shape, axis);
        let mut data = self.value(a).data().to_vec();
        lanes.for_each(|base, stride| {
            let idx = |k: usize| base + k * stride;
            let mx = (0..lanes.len).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..lanes.len {
                let e = (data[idx(k)] - mx).exp();
                data[idx(k)] = e;
                z += e;
            }
            for k in 0..lanes.len {
                data[idx(k)] /= z;
            }
        });
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, rg, Op::Softmax(a, lanes)))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis(a, axis, "log_softmax")?;
        let lanes = Lanes::new(&shape, axis);
        let mut data = self.value(a).data().to_vec();
        lanes.for_each(|base, stride| {
            let idx = |k: usize| base + k * stride;
            let mx = (0..lanes.len).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..lanes.len).map(|k| (data[idx(k)] - mx).exp()).sum::<f64>().ln();
            for k in 0..lanes.len {
                data[idx(k)] -= lse;
            }
        });
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, rg, Op::LogSoftmax(a, lanes)))
    }

    /// `(x − mean) / sqrt(var + 1e-5) · gain + bias` along `axis`; `gain` and
    /// `bias` have one entry per position on that axis.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let shape = self.check_axis(x, axis, "layernorm")?;
        let lanes = Lanes::new(&shape, axis);
        for p in [gain, bias] {
            if self.value(p).numel() != lanes.len {
                return Err(Error::Shape {
                    op: "layernorm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(lanes.outer * lanes.inner);
        let n = lanes.len as f64;
        lanes.for_each(|base, stride| {
            let idx = |k: usize| base + k * stride;
            let mean = (0..lanes.len).map(|k| xv[idx(k)]).sum::<f64>() / n;
            let var = (0..lanes.len).map(|k| (xv[idx(k)] - mean).powi(2)).sum::<f64>() / n;
            let r = 1.0 / (var + EPS).sqrt();
            rstd.push(r);
            for k in 0..lanes.len {
                let h = (xv[idx(k)] - mean) * r;
                xhat[idx(k)] = h;
                out[idx(k)] = h * g[k] + b[k];
            }
        });
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor { shape, data: out },
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                lanes,
                xhat,
                rstd,
            },
        ))
    }

    /// Euclidean projection of every lane along `axis` onto the simplex.
    pub fn sparsemax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis(a, axis, "sparsemax")?;
        if !self.value(a).is_finite() {
            return Err(Error::Numeric("sparsemax input".into()));
        }
        let lanes = Lanes::new(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        let mut lane = vec![0.0; lanes.len];
        lanes.for_each(|base, stride| {
            for (k, z) in lane.iter_mut().enumerate() {
                *z = src[base + k * stride];
            }
            for (k, p) in activations::sparsemax(&lane).into_iter().enumerate() {
                data[base + k * stride] = p;
            }
        });
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, rg, Op::Sparsemax(a, lanes)))
    }

    /// One-hot of the first maximum along `axis`; backward passes the
    /// upstream gradient straight through, multiplied by `scale`.
    pub fn argmax_ste(&mut self, a: Var, axis: usize, scale: f64) -> Result<Var> {
        let shape = self.check_axis(a, axis, "argmax_ste")?;
        let lanes = Lanes::new(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        lanes.for_each(|base, stride| {
            let mut best = 0;
            for k in 1..lanes.len {
                if src[base + k * stride] > src[base + best * stride] {
                    best = k;
                }
            }
            data[base + best * stride] = 1.0;
        });
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, rg, Op::ArgmaxSte(a, scale)))
    }

    // ---- backward ------------------------------------------------------

    /// Accumulates d`loss`/d`v` into every `requires_grad` node `v`.
    /// Calling it twice without [`Tape::zero_grads`] adds the gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$ga:ident| $body:block) => {
                if let Some($ga) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                let MatmulPlan { m, k, n, .. } = *plan;
                let (rsb, csb) = plan.b_strides;
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                with_grad!(*a, |ga| {
                    for bi in 0..plan.a_offsets.len() {
                        // dA += G · Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            (n, 1),
                            &bv[plan.b_offsets[bi]..],
                            (csb, rsb),
                            1.0,
                            &mut ga[plan.a_offsets[bi]..],
                            (k, 1),
                        );
                    }
                });
                with_grad!(*b, |gb| {
                    for bi in 0..plan.b_offsets.len() {
                        // dB += Aᵀ · G
                        gemm(
                            k,
                            m,
                            n,
                            &av[plan.a_offsets[bi]..],
                            (1, k),
                            &g[bi * m * n..],
                            (n, 1),
                            1.0,
                            &mut gb[plan.b_offsets[bi]..],
                            (rsb, csb),
                        );
                    }
                });
            }
            Op::Binary { kind, a, b, bcast } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let da = |x: f64, y: f64| match kind {
                    BinaryKind::Add | BinaryKind::Sub => 1.0,
                    BinaryKind::Mul => y,
                    BinaryKind::Div => 1.0 / y,
                    BinaryKind::Min => f64::from(x <= y),
                    BinaryKind::Max => f64::from(x >= y),
                };
                let db = |x: f64, y: f64| match kind {
                    BinaryKind::Add => 1.0,
                    BinaryKind::Sub => -1.0,
                    BinaryKind::Mul => x,
                    BinaryKind::Div => -x / (y * y),
                    BinaryKind::Min => f64::from(x > y),
                    BinaryKind::Max => f64::from(x < y),
                };
                match bcast {
                    None => {
                        with_grad!(*a, |ga| {
                            for j in 0..g.len() {
                                ga[j] += g[j] * da(av[j], bv[j]);
                            }
                        });
                        with_grad!(*b, |gb| {
                            for j in 0..g.len() {
                                gb[j] += g[j] * db(av[j], bv[j]);
                            }
                        });
                    }
                    Some(bc) => {
                        with_grad!(*a, |ga| {
                            odometer(&bc.out_shape, &bc.a_strides, &bc.b_strides, |o, ia, ib| {
                                ga[ia] += g[o] * da(av[ia], bv[ib]);
                            });
                        });
                        with_grad!(*b, |gb| {
                            odometer(&bc.out_shape, &bc.a_strides, &bc.b_strides, |o, ia, ib| {
                                gb[ib] += g[o] * db(av[ia], bv[ib]);
                            });
                        });
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
            }
            Op::Scale(a, c) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                });
            }
            Op::Unary(kind, a) => {
                let xv = nodes[a.0].value.data();
                let yv = out.data();
                with_grad!(*a, |ga| {
                    for j in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Relu => f64::from(xv[j] > 0.0),
                            UnaryKind::Sigmoid => yv[j] * (1.0 - yv[j]),
                            UnaryKind::Exp => yv[j],
                            UnaryKind::Log => 1.0 / xv[j],
                            UnaryKind::Abs => {
                                if xv[j] > 0.0 {
                                    1.0
                                } else if xv[j] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        ga[j] += g[j] * d;
                    }
                });
            }
            Op::Permute { a, out_strides_in } => {
                let zeros = vec![0; out_strides_in.len()];
                with_grad!(*a, |ga| {
                    odometer(out.shape(), out_strides_in, &zeros, |o, ia, _| ga[ia] += g[o]);
                });
            }
            Op::SumAll(a) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                });
            }
            Op::SumAxis(a, lanes) => {
                with_grad!(*a, |ga| {
                    for o in 0..lanes.outer {
                        for k in 0..lanes.len {
                            let dst = &mut ga[(o * lanes.len + k) * lanes.inner..][..lanes.inner];
                            dst.iter_mut()
                                .zip(&g[o * lanes.inner..][..lanes.inner])
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                });
            }
            Op::Softmax(a, lanes) => {
                let y = out.data();
                with_grad!(*a, |ga| {
                    lanes.for_each(|base, stride| {
                        let dot: f64 = (0..lanes.len).map(|k| g[base + k * stride] * y[base + k * stride]).sum();
                        for k in 0..lanes.len {
                            let j = base + k * stride;
                            ga[j] += y[j] * (g[j] - dot);
                        }
                    });
                });
            }
            Op::LogSoftmax(a, lanes) => {
                let y = out.data();
                with_grad!(*a, |ga| {
                    lanes.for_each(|base, stride| {
                        let gs: f64 = (0..lanes.len).map(|k| g[base + k * stride]).sum();
                        for k in 0..lanes.len {
                            let j = base + k * stride;
                            ga[j] += g[j] - y[j].exp() * gs;
                        }
                    });
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                lanes,
                xhat,
                rstd,
            } => {
                let gv = nodes[gain.0].value.data();
                with_grad!(*gain, |gg| {
                    lanes.for_each(|base, stride| {
                        for k in 0..lanes.len {
                            let j = base + k * stride;
                            gg[k] += g[j] * xhat[j];
                        }
                    });
                });
                with_grad!(*bias, |gb| {
                    lanes.for_each(|base, stride| {
                        for k in 0..lanes.len {
                            gb[k] += g[base + k * stride];
                        }
                    });
                });
                with_grad!(*x, |gx| {
                    let n = lanes.len as f64;
                    let mut lane_no = 0;
                    lanes.for_each(|base, stride| {
                        let r = rstd[lane_no];
                        lane_no += 1;
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for k in 0..lanes.len {
                            let j = base + k * stride;
                            let dh = g[j] * gv[k];
                            s1 += dh;
                            s2 += dh * xhat[j];
                        }
                        for k in 0..lanes.len {
                            let j = base + k * stride;
                            let dh = g[j] * gv[k];
                            gx[j] += r * (dh - s1 / n - xhat[j] * s2 / n);
                        }
                    });
                });
            }
            Op::Sparsemax(a, lanes) => {
                let y = out.data();
                with_grad!(*a, |ga| {
                    lanes.for_each(|base, stride| {
                        let (mut sum, mut count) = (0.0, 0usize);
                        for k in 0..lanes.len {
                            let j = base + k * stride;
                            if y[j] > 0.0 {
                                sum += g[j];
                                count += 1;
                            }
                        }
                        let mean = sum / count.max(1) as f64;
                        for k in 0..lanes.len {
                            let j = base + k * stride;
                            if y[j] > 0.0 {
                                ga[j] += g[j] - mean;
                            }
                        }
                    });
                });
            }
            Op::ArgmaxSte(a, scale) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += scale * y);
                });
            }
            Op::Slice { a, src, start, len } => {
                with_grad!(*a, |ga| {
                    let chunk = len * src.inner;
                    for o in 0..src.outer {
                        let base = o * src.len * src.inner + start * src.inner;
                        ga[base..base + chunk]
                            .iter_mut()
                            .zip(&g[o * chunk..(o + 1) * chunk])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::GatherRows { a, rows, row_len } => {
                with_grad!(*a, |ga| {
                    for (r_out, &r) in rows.iter().enumerate() {
                        ga[r * row_len..(r + 1) * row_len]
                            .iter_mut()
                            .zip(&g[r_out * row_len..(r_out + 1) * row_len])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
        }
    }
}

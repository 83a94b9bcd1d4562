//! Reverse-mode differentiation over a closed set of tensor operations.
//!
//! A [`Tape`] records every operation in execution order, so node inputs
//! always precede the node itself. [`Tape::backward`] walks the record once in
//! reverse and returns the gradient of a scalar loss with respect to every
//! leaf registered with `requires_grad`. Leaves registered without it never
//! have a gradient buffer allocated.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of an elementwise binary op is broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs shape is a trailing suffix of lhs shape; repeated over leading axes.
    Suffix,
    /// rhs holds a single element.
    Scalar,
}

/// One bilinear sample: batch item plus continuous (column, row) grid coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub batch: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, shared_rhs: bool, rhs_t: bool },
    Add { a: Var, b: Var, bcast: Bcast },
    Mul { a: Var, b: Var, bcast: Bcast },
    Scale { a: Var, c: T },
    Permute { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Gather { a: Var, axis: usize, index: Vec<usize> },
    SegmentMean { a: Var, groups: Vec<Vec<usize>> },
    Sum { a: Var, axis: Option<usize>, mean: bool },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var },
    Conv2d { x: Var, w: Var, b: Var, ksize: usize },
    Bilinear { grid: Var, taps: Vec<[(usize, T); 4]> },
    L2Normalize { a: Var, norms: Vec<T> },
    Log { a: Var },
    Exp { a: Var },
    SmoothL1 { a: Var },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b, .. } | Op::Mul { a, b, .. } => vec![*a, *b],
            Op::Concat { parts, .. } => parts.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Bilinear { grid, .. } => vec![*grid],
            Op::Scale { a, .. }
            | Op::Permute { a, .. }
            | Op::Reshape { a }
            | Op::Slice { a, .. }
            | Op::Gather { a, .. }
            | Op::SegmentMean { a, .. }
            | Op::Sum { a, .. }
            | Op::Softmax { a }
            | Op::LogSoftmax { a }
            | Op::Gelu { a }
            | Op::L2Normalize { a, .. }
            | Op::Log { a }
            | Op::Exp { a }
            | Op::SmoothL1 { a } => vec![*a],
        }
    }

    /// Inputs whose values backward reads.
    fn saved_inputs(&self) -> Vec<Var> {
        match self {
            Op::MatMul { a, b, .. } | Op::Mul { a, b, .. } => vec![*a, *b],
            Op::LayerNorm { gamma, .. } => vec![*gamma],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Gelu { a } | Op::Log { a } | Op::SmoothL1 { a } => vec![*a],
            _ => vec![],
        }
    }

    fn saves_output(&self) -> bool {
        matches!(self, Op::Softmax { .. } | Op::LogSoftmax { .. } | Op::L2Normalize { .. } | Op::Exp { .. })
    }

    fn side_buffer_len(&self) -> usize {
        match self {
            Op::LayerNorm { xhat, rstd, .. } => xhat.len() + rstd.len(),
            Op::L2Normalize { norms, .. } => norms.len(),
            _ => 0,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// The value aliases its first input's storage in a strided engine.
    view: bool,
}

/// Gradients of a loss with respect to the trainable leaves of a tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Operation record for one forward/backward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap()
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e = *e + c;
            }
        }
        None => *slot = Some(contribution),
    }
}

/// Strided gemm helper for row-major matrices, optionally transposed.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    // a is logically [m, k]; stored [k, m] when a_t. Same for b ([k, n] / [n, k]).
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu_value<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (T::one() + (x * inv_sqrt2).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64(0.398_942_280_401_432_7);
    half * (T::one() + (x * inv_sqrt2).erf()) + x * inv_sqrt_2pi * (-(x * x) * half).exp()
}

/// Smooth-L1 in the Fast R-CNN form: `0.5 x^2` inside the unit interval, `|x| - 0.5` outside.
pub fn smooth_l1_value<T: Scalar>(x: T) -> T {
    let ax = x.abs();
    if ax < T::one() {
        T::from_f64(0.5) * x * x
    } else {
        ax - T::from_f64(0.5)
    }
}

fn smooth_l1_grad<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Peak number of live activation elements over the recorded forward pass.
    ///
    /// Replays the tape in order. A non-leaf value comes alive when recorded
    /// and is freed after its last consumer unless backward needs it, in
    /// which case it lives to the end. Reshapes and contiguous slices alias
    /// their input; saved side buffers such as layer-norm statistics count
    /// as permanently live. Leaves (parameters, inputs) are not counted.
    pub fn peak_live_elements(&self) -> usize {
        let n = self.nodes.len();
        let mut root: Vec<usize> = (0..n).collect();
        let mut saved = vec![false; n];
        let mut last_use = vec![0usize; n];
        for (i, node) in self.nodes.iter().enumerate() {
            let ins = node.op.inputs();
            if node.view {
                root[i] = root[ins[0].0];
            }
            for v in &ins {
                let r = root[v.0];
                last_use[r] = last_use[r].max(i);
            }
            for v in node.op.saved_inputs() {
                saved[root[v.0]] = true;
            }
            if node.op.saves_output() {
                saved[root[i]] = true;
            }
        }
        let (mut live, mut peak) = (0usize, 0usize);
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            if !node.view {
                live += node.value.len();
            }
            live += node.op.side_buffer_len();
            peak = peak.max(live);
            let mut roots: Vec<usize> = node.op.inputs().iter().map(|v| root[v.0]).collect();
            roots.sort_unstable();
            roots.dedup();
            for r in roots {
                if last_use[r] == i && !saved[r] && !matches!(self.nodes[r].op, Op::Leaf) {
                    live -= self.nodes[r].value.len();
                }
            }
        }
        peak
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::State("tape already consumed by backward".into()));
        }
        Ok(())
    }

    /// Registers an input tensor. Only `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            view: false,
        });
        Var(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        self.record(op_name, value, op, inputs, false)
    }

    /// Records a node whose value is a contiguous range of its input.
    fn push_view(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        self.record(op_name, value, op, inputs, true)
    }

    fn record(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var], view: bool) -> Result<Var> {
        self.check_live()?;
        if !value.is_finite() {
            return Err(Error::numeric(op_name, format!("non-finite output of shape {:?}", value.shape())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            view,
        });
        Ok(Var(id))
    }

    // ---------------------------------------------------------------------
    // Forward operations
    // ---------------------------------------------------------------------

    /// `a @ b`. `a` is `[..., m, k]`; `b` is either a shared `[k, n]` matrix or
    /// carries the same leading batch axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` with `b` stored as `[..., n, k]` (or a shared `[n, k]`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, rhs_t: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || Error::dim("matmul", format!("{sa:?} x {sb:?} (rhs transposed: {rhs_t})"));
        if sa.len() < 2 && !(sa.len() == 1 && sb.len() == 2) || sb.len() < 2 {
            return Err(bad());
        }
        let k = last_dim(&sa);
        let (bk, n) = {
            let r = sb[sb.len() - 2];
            let c = sb[sb.len() - 1];
            if rhs_t {
                (c, r)
            } else {
                (r, c)
            }
        };
        if bk != k {
            return Err(bad());
        }
        let shared_rhs = sb.len() == 2;
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); out_shape.iter().product()];
        if shared_rhs {
            let m = av.len() / k;
            gemm(m, k, n, av, false, bv, rhs_t, &mut out, false);
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(bad());
            }
            let m = sa[sa.len() - 2];
            let batch: usize = sa[..sa.len() - 2].iter().product();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    rhs_t,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b, shared_rhs, rhs_t }, &[a, b])
    }

    fn bcast_mode(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(Bcast::Same)
        } else if self.value(b).len() == 1 {
            Ok(Bcast::Scalar)
        } else if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
            Ok(Bcast::Suffix)
        } else {
            Err(Error::dim(op, format!("cannot broadcast {sb:?} onto {sa:?}")))
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Bcast)> {
        let bcast = self.bcast_mode(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<T> = match bcast {
            Bcast::Same => av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => av.data().iter().map(|&x| f(x, bv[0])).collect(),
            Bcast::Suffix => av
                .data()
                .chunks_exact(bv.len())
                .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
                .collect(),
        };
        Ok((Tensor::new(av.shape(), data)?, bcast))
    }

    /// Elementwise `a + b`; `b` may be a trailing-suffix or single-element broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bcast) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add { a, b, bcast }, &[a, b])
    }

    /// Elementwise `a * b` with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bcast) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul { a, b, bcast }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let src = self.value(a);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&x| x * c).collect())?;
        self.push("scale", value, Op::Scale { a, c }, &[a])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// General axis permutation; output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let shape = src.shape();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&ax| ax >= nd || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::dim("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        let value = permute_tensor(src, axes);
        self.push("permute", value, Op::Permute { a, axes: axes.to_vec() }, &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::dim("transpose", format!("needs >= 2 axes, got {:?}", self.shape(a))));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push_view("reshape", value, Op::Reshape { a }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::dim("concat", format!("{s:?} vs {first:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split3(&first, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(&out_shape, data)?;
        self.push("concat", value, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, alen, inner) = split3(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        if outer == 1 {
            self.push_view("slice", value, Op::Slice { a, axis, start }, &[a])
        } else {
            self.push("slice", value, Op::Slice { a, axis, start }, &[a])
        }
    }

    /// Selects entries along `axis` by index (repeats allowed).
    pub fn gather(&mut self, a: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || index.is_empty() || index.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::dim("gather", format!("indices out of range for axis {axis} of {shape:?}")));
        }
        let (outer, alen, inner) = split3(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                let base = (o * alen + i) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = index.len();
        let value = Tensor::new(&out_shape, data)?;
        self.push("gather", value, Op::Gather { a, axis, index: index.to_vec() }, &[a])
    }

    /// Row means of a `[R, D]` matrix over index groups, giving `[G, D]`.
    ///
    /// Each mean is evaluated as the group's first row plus the mean offset of
    /// all members from it, so a group of identical rows reproduces them exactly.
    pub fn segment_mean(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("segment-mean", format!("input must be [rows, d], got {shape:?}")));
        }
        let (r, d) = (shape[0], shape[1]);
        if groups.is_empty() || groups.iter().any(|g| g.is_empty() || g.iter().any(|&i| i >= r)) {
            return Err(Error::dim("segment-mean", format!("groups must be non-empty and index {r} rows")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(groups.len() * d);
        let mut offset = vec![T::zero(); d];
        for g in groups {
            let pivot = &src[g[0] * d..(g[0] + 1) * d];
            offset.fill(T::zero());
            for &i in g {
                for ((o, &x), &p) in offset.iter_mut().zip(&src[i * d..(i + 1) * d]).zip(pivot) {
                    *o = *o + (x - p);
                }
            }
            let inv = T::from_f64(1.0 / g.len() as f64);
            data.extend(pivot.iter().zip(&offset).map(|(&p, &o)| p + o * inv));
        }
        let value = Tensor::new(&[groups.len(), d], data)?;
        self.push("segment-mean", value, Op::SegmentMean { a, groups: groups.to_vec() }, &[a])
    }

    fn reduce(&mut self, a: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let name = if mean { "reduce-mean" } else { "reduce-sum" };
        let src = self.value(a);
        let shape = src.shape().to_vec();
        let value = match axis {
            None => {
                let mut acc = T::zero();
                for &v in src.data() {
                    acc = acc + v;
                }
                if mean {
                    acc = acc / T::from_f64(src.len() as f64);
                }
                Tensor::scalar(acc)
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::dim(name, format!("axis {ax} for shape {shape:?}")));
                }
                let (outer, alen, inner) = split3(&shape, ax);
                let d = src.data();
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for i in 0..alen {
                        let row = &d[(o * alen + i) * inner..(o * alen + i + 1) * inner];
                        for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                }
                if mean {
                    let c = T::from_f64(alen as f64);
                    out.iter_mut().for_each(|v| *v = *v / c);
                }
                let mut out_shape: Vec<usize> = shape.clone();
                out_shape.remove(ax);
                if out_shape.is_empty() {
                    out_shape.push(1);
                }
                Tensor::new(&out_shape, out)?
            }
        };
        self.push(name, value, Op::Sum { a, axis, mean }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, None, false)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, None, true)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, Some(axis), false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, Some(axis), true)
    }

    /// Softmax over the last axis, shifted by the row maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let n = last_dim(src.shape());
        let mut data = src.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let value = Tensor::new(src.shape(), data)?;
        self.push("softmax", value, Op::Softmax { a }, &[a])
    }

    /// Log-softmax over the last axis (stable log-sum-exp).
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let n = last_dim(src.shape());
        let mut data = src.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for &v in row.iter() {
                total = total + (v - max).exp();
            }
            let lse = max + total.ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let value = Tensor::new(src.shape(), data)?;
        self.push("log-softmax", value, Op::LogSoftmax { a }, &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let src = self.value(x);
        let n = last_dim(src.shape());
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::dim(
                "layer-norm",
                format!("affine {:?}/{:?} for width {n}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let eps = T::from_f64(eps);
        let inv_n = T::from_f64(1.0 / n as f64);
        let rows = src.len() / n;
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.data().chunks_exact(n) {
            let mut mu = T::zero();
            for &v in row {
                mu = mu + v;
            }
            mu = mu * inv_n;
            let mut var = T::zero();
            for &v in row {
                var = var + (v - mu) * (v - mu);
            }
            var = var * inv_n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * r;
                xhat.push(h);
                out.push(h * g[j] + bt[j]);
            }
        }
        let value = Tensor::new(src.shape(), out)?;
        self.push("layer-norm", value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// GELU with the exact Gaussian CDF.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&x| gelu_value(x)).collect())?;
        self.push("gelu", value, Op::Gelu { a }, &[a])
    }

    /// Stride-1 2-D convolution on `[B, C, H, W]` input with a 1x1 or 3x3
    /// kernel `[Co, Ci, k, k]` and bias `[Co]`; 3x3 uses zero same-padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sb != [sw[0]] {
            return Err(Error::dim("conv2d", format!("input {sx:?}, weight {sw:?}, bias {sb:?}")));
        }
        let ksize = sw[2];
        if ksize != 1 && ksize != 3 {
            return Err(Error::dim("conv2d", format!("unsupported kernel size {ksize}")));
        }
        let (batch, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let co = sw[0];
        let hw = h * wd;
        let kk = ci * ksize * ksize;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * co * hw];
        let mut cols = vec![T::zero(); if ksize == 3 { kk * hw } else { 0 }];
        for bi in 0..batch {
            let xb = &xv[bi * ci * hw..(bi + 1) * ci * hw];
            let ob = &mut out[bi * co * hw..(bi + 1) * co * hw];
            for (c, row) in ob.chunks_exact_mut(hw).enumerate() {
                row.fill(bv[c]);
            }
            if ksize == 1 {
                gemm(co, ci, hw, wv, false, xb, false, ob, true);
            } else {
                im2col3(xb, ci, h, wd, &mut cols);
                gemm(co, kk, hw, wv, false, &cols, false, ob, true);
            }
        }
        let value = Tensor::new(&[batch, co, h, wd], out)?;
        self.push("conv2d", value, Op::Conv2d { x, w, b, ksize }, &[x, w, b])
    }

    /// Bilinear interpolation of a `[B, H, W, D]` grid at continuous points.
    ///
    /// Coordinates are clamped to `[0, W-1] x [0, H-1]`. Output is `[P, D]`.
    pub fn bilinear_sample(&mut self, grid: Var, points: &[SamplePoint]) -> Result<Var> {
        let s = self.shape(grid).to_vec();
        if s.len() != 4 || points.is_empty() {
            return Err(Error::dim("bilinear-sample", format!("grid {s:?}, {} points", points.len())));
        }
        let (batch, h, w, d) = (s[0], s[1], s[2], s[3]);
        let mut taps = Vec::with_capacity(points.len());
        for p in points {
            if p.batch >= batch || !p.x.is_finite() || !p.y.is_finite() {
                return Err(Error::dim("bilinear-sample", format!("point {p:?} outside batch {batch}")));
            }
            let x = p.x.clamp(0.0, (w - 1) as f64);
            let y = p.y.clamp(0.0, (h - 1) as f64);
            let x0 = x.floor() as usize;
            let y0 = y.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = x - x0 as f64;
            let fy = y - y0 as f64;
            let cell = |yy: usize, xx: usize| (p.batch * h + yy) * w + xx;
            taps.push([
                (cell(y0, x0), T::from_f64((1.0 - fy) * (1.0 - fx))),
                (cell(y0, x1), T::from_f64((1.0 - fy) * fx)),
                (cell(y1, x0), T::from_f64(fy * (1.0 - fx))),
                (cell(y1, x1), T::from_f64(fy * fx)),
            ]);
        }
        let gv = self.value(grid).data();
        let mut out = vec![T::zero(); points.len() * d];
        for (row, tap) in out.chunks_exact_mut(d).zip(&taps) {
            for &(cell, wt) in tap {
                let src = &gv[cell * d..(cell + 1) * d];
                for (o, &v) in row.iter_mut().zip(src) {
                    *o = *o + wt * v;
                }
            }
        }
        let value = Tensor::new(&[points.len(), d], out)?;
        self.push("bilinear-sample", value, Op::Bilinear { grid, taps }, &[grid])
    }

    /// Scales each last-axis row to unit Euclidean norm. Zero rows are an error.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let n = last_dim(src.shape());
        let mut norms = Vec::with_capacity(src.len() / n);
        let mut out = Vec::with_capacity(src.len());
        for row in src.data().chunks_exact(n) {
            let mut ss = T::zero();
            for &v in row {
                ss = ss + v * v;
            }
            let norm = ss.sqrt();
            if norm <= T::zero() || !norm.is_finite() {
                return Err(Error::numeric("l2-normalize", "zero-norm row cannot be normalized"));
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::new(src.shape(), out)?;
        self.push("l2-normalize", value, Op::L2Normalize { a, norms }, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&x| x.ln()).collect())?;
        self.push("log", value, Op::Log { a }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&x| x.exp()).collect())?;
        self.push("exp", value, Op::Exp { a }, &[a])
    }

    pub fn smooth_l1(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&x| smooth_l1_value(x)).collect())?;
        self.push("smooth-l1", value, Op::SmoothL1 { a }, &[a])
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Propagates `d loss / d leaf` to every `requires_grad` leaf and consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.check_live()?;
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
        }
        let mut out = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = grads[id].take().unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                out.insert(Var(id), Tensor::new(node.value.shape(), data)?);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, shared_rhs, rhs_t } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let k = last_dim(sa);
                let n = last_dim(node.value.shape());
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if *shared_rhs {
                    let m = av.len() / k;
                    if self.wants(*a) {
                        // dA = G B^T; B is [k,n] (or [n,k] stored when rhs_t).
                        let mut da = vec![T::zero(); m * k];
                        gemm(m, n, k, g, false, bv, !rhs_t, &mut da, false);
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); k * n];
                        if *rhs_t {
                            // dB[n,k] = G^T A
                            gemm(n, m, k, g, true, av, false, &mut db, false);
                        } else {
                            gemm(k, m, n, av, true, g, false, &mut db, false);
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                } else {
                    let m = sa[sa.len() - 2];
                    let batch: usize = sa[..sa.len() - 2].iter().product();
                    debug_assert_eq!(sb.len(), sa.len());
                    if self.wants(*a) {
                        let mut da = vec![T::zero(); batch * m * k];
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &bv[i * k * n..(i + 1) * k * n],
                                !rhs_t,
                                &mut da[i * m * k..(i + 1) * m * k],
                                false,
                            );
                        }
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); batch * k * n];
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &av[i * m * k..(i + 1) * m * k];
                            let dbi = &mut db[i * k * n..(i + 1) * k * n];
                            if *rhs_t {
                                gemm(n, m, k, gi, true, ai, false, dbi, false);
                            } else {
                                gemm(k, m, n, ai, true, gi, false, dbi, false);
                            }
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                }
            }
            Op::Add { a, b, bcast } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*b) {
                    let nb = self.value(*b).len();
                    accumulate(&mut grads[b.0], reduce_bcast(g, nb, *bcast));
                }
            }
            Op::Mul { a, b, bcast } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    let da: Vec<T> = match bcast {
                        Bcast::Same => g.iter().zip(bv).map(|(&x, &y)| x * y).collect(),
                        Bcast::Scalar => g.iter().map(|&x| x * bv[0]).collect(),
                        Bcast::Suffix => g
                            .chunks_exact(bv.len())
                            .flat_map(|c| c.iter().zip(bv).map(|(&x, &y)| x * y))
                            .collect(),
                    };
                    accumulate(&mut grads[a.0], da);
                }
                if self.wants(*b) {
                    let prod: Vec<T> = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads[b.0], reduce_bcast(&prod, bv.len(), *bcast));
                }
            }
            Op::Scale { a, c } => {
                accumulate(&mut grads[a.0], g.iter().map(|&x| x * *c).collect());
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                accumulate(&mut grads[a.0], permute_tensor(&gt, &inverse).into_data());
            }
            Op::Reshape { a } => accumulate(&mut grads[a.0], g.to_vec()),
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split3(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let plen = self.shape(p)[*axis];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(outer * plen * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[base..base + plen * inner]);
                        }
                        accumulate(&mut grads[p.0], dp);
                    }
                    offset += plen;
                }
            }
            Op::Slice { a, axis, start } => {
                let shape = self.shape(*a);
                let (outer, alen, inner) = split3(shape, *axis);
                let len = node.value.shape()[*axis];
                let mut da = vec![T::zero(); outer * alen * inner];
                for o in 0..outer {
                    let dst = o * alen * inner + start * inner;
                    da[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::Gather { a, axis, index } => {
                let shape = self.shape(*a);
                let (outer, alen, inner) = split3(shape, *axis);
                let mut da = vec![T::zero(); outer * alen * inner];
                let mut src = 0;
                for o in 0..outer {
                    for &i in index {
                        let dst = (o * alen + i) * inner;
                        for (d, &v) in da[dst..dst + inner].iter_mut().zip(&g[src..src + inner]) {
                            *d = *d + v;
                        }
                        src += inner;
                    }
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::SegmentMean { a, groups } => {
                let d = last_dim(node.value.shape());
                let mut da = vec![T::zero(); self.value(*a).len()];
                for (grp, gr) in groups.iter().zip(g.chunks_exact(d)) {
                    let inv = T::from_f64(1.0 / grp.len() as f64);
                    for &i in grp {
                        for (dst, &v) in da[i * d..(i + 1) * d].iter_mut().zip(gr) {
                            *dst = *dst + v * inv;
                        }
                    }
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::Sum { a, axis, mean } => {
                let shape = self.shape(*a);
                let n_in: usize = shape.iter().product();
                let da = match axis {
                    None => {
                        let v = if *mean { g[0] / T::from_f64(n_in as f64) } else { g[0] };
                        vec![v; n_in]
                    }
                    Some(ax) => {
                        let (outer, alen, inner) = split3(shape, *ax);
                        let c = if *mean { T::one() / T::from_f64(alen as f64) } else { T::one() };
                        let mut da = Vec::with_capacity(n_in);
                        for o in 0..outer {
                            for _ in 0..alen {
                                da.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * c));
                            }
                        }
                        da
                    }
                };
                accumulate(&mut grads[a.0], da);
            }
            Op::Softmax { a } => {
                let n = last_dim(node.value.shape());
                let mut da = Vec::with_capacity(g.len());
                for (yr, gr) in out.chunks_exact(n).zip(g.chunks_exact(n)) {
                    let mut dot = T::zero();
                    for (&y, &gg) in yr.iter().zip(gr) {
                        dot = dot + y * gg;
                    }
                    da.extend(yr.iter().zip(gr).map(|(&y, &gg)| y * (gg - dot)));
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::LogSoftmax { a } => {
                let n = last_dim(node.value.shape());
                let mut da = Vec::with_capacity(g.len());
                for (yr, gr) in out.chunks_exact(n).zip(g.chunks_exact(n)) {
                    let mut total = T::zero();
                    for &gg in gr {
                        total = total + gg;
                    }
                    da.extend(yr.iter().zip(gr).map(|(&y, &gg)| gg - y.exp() * total));
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = last_dim(node.value.shape());
                let gm = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![T::zero(); n];
                    let mut db = vec![T::zero(); n];
                    for (hr, gr) in xhat.chunks_exact(n).zip(g.chunks_exact(n)) {
                        for j in 0..n {
                            dg[j] = dg[j] + gr[j] * hr[j];
                            db[j] = db[j] + gr[j];
                        }
                    }
                    if self.wants(*gamma) {
                        accumulate(&mut grads[gamma.0], dg);
                    }
                    if self.wants(*beta) {
                        accumulate(&mut grads[beta.0], db);
                    }
                }
                if self.wants(*x) {
                    let inv_n = T::from_f64(1.0 / n as f64);
                    let mut dx = Vec::with_capacity(g.len());
                    let mut dh = vec![T::zero(); n];
                    for ((hr, gr), &r) in xhat.chunks_exact(n).zip(g.chunks_exact(n)).zip(rstd) {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..n {
                            dh[j] = gr[j] * gm[j];
                            m1 = m1 + dh[j];
                            m2 = m2 + dh[j] * hr[j];
                        }
                        m1 = m1 * inv_n;
                        m2 = m2 * inv_n;
                        dx.extend((0..n).map(|j| r * (dh[j] - m1 - hr[j] * m2)));
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Gelu { a } => {
                let av = self.value(*a).data();
                accumulate(&mut grads[a.0], av.iter().zip(g).map(|(&x, &gg)| gg * gelu_grad(x)).collect());
            }
            Op::Conv2d { x, w, b, ksize } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (batch, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let co = sw[0];
                let hw = h * wd;
                let kk = ci * ksize * ksize;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dw = vec![T::zero(); co * kk];
                let mut dx = vec![T::zero(); if self.wants(*x) { batch * ci * hw } else { 0 }];
                let mut cols = vec![T::zero(); if *ksize == 3 { kk * hw } else { 0 }];
                let mut dcols = vec![T::zero(); if *ksize == 3 { kk * hw } else { 0 }];
                for bi in 0..batch {
                    let gb = &g[bi * co * hw..(bi + 1) * co * hw];
                    let xb = &xv[bi * ci * hw..(bi + 1) * ci * hw];
                    if *ksize == 1 {
                        if self.wants(*w) {
                            gemm(co, hw, ci, gb, false, xb, true, &mut dw, true);
                        }
                        if self.wants(*x) {
                            gemm(ci, co, hw, wv, true, gb, false, &mut dx[bi * ci * hw..(bi + 1) * ci * hw], false);
                        }
                    } else {
                        if self.wants(*w) {
                            im2col3(xb, ci, h, wd, &mut cols);
                            gemm(co, hw, kk, gb, false, &cols, true, &mut dw, true);
                        }
                        if self.wants(*x) {
                            gemm(kk, co, hw, wv, true, gb, false, &mut dcols, false);
                            col2im3(&dcols, ci, h, wd, &mut dx[bi * ci * hw..(bi + 1) * ci * hw]);
                        }
                    }
                }
                if self.wants(*w) {
                    accumulate(&mut grads[w.0], dw);
                }
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], dx);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); co];
                    for bi in 0..batch {
                        for (c, row) in g[bi * co * hw..(bi + 1) * co * hw].chunks_exact(hw).enumerate() {
                            for &v in row {
                                db[c] = db[c] + v;
                            }
                        }
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Bilinear { grid, taps } => {
                let d = last_dim(node.value.shape());
                let mut dg = vec![T::zero(); self.value(*grid).len()];
                for (gr, tap) in g.chunks_exact(d).zip(taps) {
                    for &(cell, wt) in tap {
                        for (dst, &v) in dg[cell * d..(cell + 1) * d].iter_mut().zip(gr) {
                            *dst = *dst + wt * v;
                        }
                    }
                }
                accumulate(&mut grads[grid.0], dg);
            }
            Op::L2Normalize { a, norms } => {
                let n = last_dim(node.value.shape());
                let mut da = Vec::with_capacity(g.len());
                for ((yr, gr), &nm) in out.chunks_exact(n).zip(g.chunks_exact(n)).zip(norms) {
                    let mut dot = T::zero();
                    for (&y, &gg) in yr.iter().zip(gr) {
                        dot = dot + y * gg;
                    }
                    da.extend(yr.iter().zip(gr).map(|(&y, &gg)| (gg - y * dot) / nm));
                }
                accumulate(&mut grads[a.0], da);
            }
            Op::Log { a } => {
                let av = self.value(*a).data();
                accumulate(&mut grads[a.0], av.iter().zip(g).map(|(&x, &gg)| gg / x).collect());
            }
            Op::Exp { a } => {
                accumulate(&mut grads[a.0], out.iter().zip(g).map(|(&y, &gg)| gg * y).collect());
            }
            Op::SmoothL1 { a } => {
                let av = self.value(*a).data();
                accumulate(&mut grads[a.0], av.iter().zip(g).map(|(&x, &gg)| gg * smooth_l1_grad(x)).collect());
            }
        }
        Ok(())
    }
}

fn reduce_bcast<T: Scalar>(g: &[T], target_len: usize, bcast: Bcast) -> Vec<T> {
    match bcast {
        Bcast::Same => g.to_vec(),
        Bcast::Scalar => {
            let mut acc = T::zero();
            for &v in g {
                acc = acc + v;
            }
            vec![acc]
        }
        Bcast::Suffix => {
            let mut out = vec![T::zero(); target_len];
            for chunk in g.chunks_exact(target_len) {
                for (o, &v) in out.iter_mut().zip(chunk) {
                    *o = *o + v;
                }
            }
            out
        }
    }
}

pub(crate) fn permute_tensor<T: Scalar>(src: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = src.shape();
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let data = src.data();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    // Innermost output axis handled as a strided run.
    let inner_len = out_shape[nd - 1];
    let inner_stride = strides[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    let mut base = 0usize;
    for _ in 0..total / inner_len {
        for j in 0..inner_len {
            out.push(data[base + j * inner_stride]);
        }
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permutation preserves element count")
}

fn im2col3<T: Scalar>(x: &[T], ci: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for c in 0..ci {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 3 + ky) * 3 + kx) * hw..((c * 3 + ky) * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        row[y * w + xx] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            x[c * hw + sy as usize * w + sx as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im3<T: Scalar>(cols: &[T], ci: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for c in 0..ci {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 3 + ky) * 3 + kx) * hw..((c * 3 + ky) * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            let d = &mut dx[c * hw + sy as usize * w + sx as usize];
                            *d = *d + row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

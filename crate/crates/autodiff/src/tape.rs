use std::collections::HashMap;

use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
struct Bcast {
    out: [usize; 3],
    sa: [usize; 3],
    sb: [usize; 3],
}

impl Bcast {
    fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Bcast, Vec<usize>)> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut p = [1usize; 3];
            p[3 - s.len()..].copy_from_slice(s);
            p
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = [1usize; 3];
        for i in 0..3 {
            out[i] = match (pa[i], pb[i]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(AutodiffError::ShapeMismatch {
                        op,
                        lhs: a.to_vec(),
                        rhs: b.to_vec(),
                    })
                }
            };
        }
        let strides = |p: [usize; 3]| {
            let full = [p[1] * p[2], p[2], 1];
            let mut s = [0usize; 3];
            for i in 0..3 {
                s[i] = if p[i] == 1 { 0 } else { full[i] };
            }
            s
        };
        let shape = out[3 - rank..].to_vec();
        Ok((
            Bcast {
                out,
                sa: strides(pa),
                sb: strides(pb),
            },
            shape,
        ))
    }

    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let mut io = 0;
        for i in 0..self.out[0] {
            for j in 0..self.out[1] {
                let base_a = i * self.sa[0] + j * self.sa[1];
                let base_b = i * self.sb[0] + j * self.sb[1];
                for k in 0..self.out[2] {
                    f(io, base_a + k * self.sa[2], base_b + k * self.sb[2]);
                    io += 1;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Affine(usize, f64),
    MatMul(usize, usize),
    Bmm(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize),
    Sum(usize, usize),
    Mean(usize, usize),
    SumAll(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Cos(usize),
    Clamp(usize, f64, f64),
    MaskedSoftmax(usize),
    Dropout(usize, Vec<f64>),
    Gather(usize, Vec<Option<usize>>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records forward operations so that [`Tape::backward`] can replay them in
/// reverse. One tape per forward pass; `backward` consumes it.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    grad_enabled: bool,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// (outer, axis, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[n,k] += g[n,m] * b[k,m]^T
fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let mut s = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// out[k,m] += a[n,k]^T * g[n,m]
fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// A tape that records values only; parameters enter as constants.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Parameters that have been read onto this tape.
    pub fn touched_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.params.keys().copied().collect();
        ids.sort();
        ids
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.rg(i));
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported in [`Gradients::input`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reads a parameter onto the tape. Repeated reads return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&i) = self.params.get(&id) {
            return Var(i);
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: if self.grad_enabled { Op::Param(id) } else { Op::Leaf },
            requires_grad: self.grad_enabled,
        });
        let i = self.nodes.len() - 1;
        self.params.insert(id, i);
        Var(i)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Bcast)> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (plan, shape) = Bcast::plan(name, va.shape(), vb.shape())?;
        let mut out = vec![0.0; shape.iter().product()];
        let (da, db) = (va.data(), vb.data());
        if va.shape() == vb.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(da).zip(db) {
                *o = f(x, y);
            }
        } else {
            plan.for_each(|io, ia, ib| out[io] = f(da[ia], db[ib]));
        }
        Ok((Tensor::new(&shape, out)?, plan))
    }

    /// Elementwise sum with broadcasting over size-1 or missing leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, plan) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a.0, b.0, plan), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, plan) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a.0, b.0, plan), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, plan) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a.0, b.0, plan), &[a.0, b.0])
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.value(x).map(|v| scale * v + shift);
        self.push("affine", t, Op::Affine(x.0, scale), &[x.0])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    /// `[.., k] x [k, m] -> [.., m]`; leading axes of the left operand are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let m = sb[1];
        let n = va.numel() / k.max(1);
        let mut out = vec![0.0; n * m];
        matmul_into(va.data(), vb.data(), &mut out, n, k, m);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(m);
        let t = Tensor::new(&shape, out)?;
        self.push("matmul", t, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    /// Batched matmul `[B, n, k] x [B, k, m] -> [B, n, m]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (bsz, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bsz * n * m];
        for bi in 0..bsz {
            matmul_into(
                &va.data()[bi * n * k..(bi + 1) * n * k],
                &vb.data()[bi * k * m..(bi + 1) * k * m],
                &mut out[bi * n * m..(bi + 1) * n * m],
                n,
                k,
                m,
            );
        }
        let t = Tensor::new(&[bsz, n, m], out)?;
        self.push("bmm", t, Op::Bmm(a.0, b.0), &[a.0, b.0])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape().to_vec();
        if s.len() < 2 {
            return Err(AutodiffError::InvalidShape {
                op: "transpose",
                shape: s,
                msg: "needs rank >= 2".into(),
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = v.numel() / (r * c).max(1);
        let mut out = vec![0.0; v.numel()];
        transpose_into(v.data(), &mut out, batch, r, c);
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let t = Tensor::new(&shape, out)?;
        self.push("transpose", t, Op::Transpose(x.0), &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", t, Op::Reshape(x.0), &[x.0])
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| AutodiffError::InvalidShape {
            op: "concat",
            shape: vec![],
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::InvalidShape {
                op: "concat",
                shape: base,
                msg: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for x in xs {
            let s = self.shape(*x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (p, q))| i == axis || p == q);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in xs {
                let v = self.value(*x);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        self.push("concat", t, Op::Concat(ids.clone(), axis), &ids)
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape().to_vec();
        let d = v.last_dim();
        if s.is_empty() || start > end || end > d {
            return Err(AutodiffError::InvalidShape {
                op: "slice",
                shape: s,
                msg: format!("range {start}..{end}"),
            });
        }
        let rows = v.numel() / d.max(1);
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&v.data()[r * d + start..r * d + end]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = w;
        let t = Tensor::new(&shape, out)?;
        self.push("slice", t, Op::Slice(x.0, start, end), &[x.0])
    }

    fn reduce(&mut self, name: &'static str, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape().to_vec();
        if axis >= s.len() {
            return Err(AutodiffError::InvalidShape {
                op: name,
                shape: s,
                msg: format!("axis {axis} out of range"),
            });
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let mut out = vec![0.0; outer * inner];
        let d = v.data();
        for o in 0..outer {
            for a in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * n + a) * inner + i];
                }
            }
        }
        if mean && n > 0 {
            let inv = 1.0 / n as f64;
            out.iter_mut().for_each(|x| *x *= inv);
        }
        let mut shape = s;
        shape.remove(axis);
        let t = Tensor::new(&shape, out)?;
        let op = if mean { Op::Mean(x.0, axis) } else { Op::Sum(x.0, axis) };
        self.push(name, t, op, &[x.0])
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce("sum", x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce("mean", x, axis, true)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x.0), &[x.0])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x).map(f);
        self.push(name, t, op, &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x.0))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x.0))
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary("cos", x, f64::cos, Op::Cos(x.0))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp(x.0, lo, hi))
    }

    /// Softmax over the last axis. `keep[i] == false` positions act as `-inf`;
    /// a row with nothing kept yields zeros.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let v = self.value(x);
        if keep.len() != v.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_softmax",
                lhs: v.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let d = v.last_dim();
        let mut out = vec![0.0; v.numel()];
        for (r, (row, mask)) in v.data().chunks(d.max(1)).zip(keep.chunks(d.max(1))).enumerate() {
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[r * d..(r + 1) * d];
            let mut z = 0.0;
            for j in 0..d {
                if mask[j] {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|e| *e /= z);
        }
        let t = Tensor::new(v.shape(), out)?;
        self.push("masked_softmax", t, Op::MaskedSoftmax(x.0), &[x.0])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let keep = vec![true; self.value(x).numel()];
        self.masked_softmax(x, &keep)
    }

    /// Inverted dropout; identity when `!train` or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !train || p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let v = self.value(x);
        let scale: Vec<f64> = (0..v.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = v.data().iter().zip(&scale).map(|(a, s)| a * s).collect();
        let t = Tensor::new(v.shape(), data)?;
        self.push("dropout", t, Op::Dropout(x.0, scale), &[x.0])
    }

    /// Row lookup into a `[N, D]` table.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let idx: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
        self.gather_padded(table, &idx)
    }

    /// Row lookup where `None` produces a zero row.
    pub fn gather_padded(&mut self, table: Var, rows: &[Option<usize>]) -> Result<Var> {
        let v = self.value(table);
        if v.rank() != 2 {
            return Err(AutodiffError::InvalidShape {
                op: "gather",
                shape: v.shape().to_vec(),
                msg: "table must be rank 2".into(),
            });
        }
        let (n, d) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; rows.len() * d];
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = *r {
                if r >= n {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "gather",
                        index: r,
                        len: n,
                    });
                }
                out[i * d..(i + 1) * d].copy_from_slice(v.row(r));
            }
        }
        let t = Tensor::new(&[rows.len(), d], out)?;
        self.push("gather", t, Op::Gather(table.0, rows.to_vec()), &[table.0])
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut out = Gradients::default();
        if !nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], j: usize, f: impl FnOnce(&mut [f64])) {
            if !nodes[j].requires_grad {
                return;
            }
            let slot = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]);
            f(slot);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        out.inputs.insert(i, Tensor::new(node.value.shape(), g)?);
                    }
                }
                Op::Param(id) => {
                    out.params.insert(*id, Tensor::new(node.value.shape(), g)?);
                }
                Op::Add(a, b, plan) | Op::Sub(a, b, plan) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    acc(&mut grads, &nodes, *a, |ga| plan.for_each(|io, ia, _| ga[ia] += g[io]));
                    acc(&mut grads, &nodes, *b, |gb| plan.for_each(|io, _, ib| gb[ib] += sign * g[io]));
                }
                Op::Mul(a, b, plan) => {
                    let (da, db) = (nodes[*a].value.data(), nodes[*b].value.data());
                    acc(&mut grads, &nodes, *a, |ga| plan.for_each(|io, ia, ib| ga[ia] += g[io] * db[ib]));
                    acc(&mut grads, &nodes, *b, |gb| plan.for_each(|io, ia, ib| gb[ib] += g[io] * da[ia]));
                }
                Op::Affine(x, s) => {
                    acc(&mut grads, &nodes, *x, |gx| gx.iter_mut().zip(&g).for_each(|(o, v)| *o += s * v));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (k, m) = (vb.shape()[0], vb.shape()[1]);
                    let n = va.numel() / k.max(1);
                    acc(&mut grads, &nodes, *a, |ga| matmul_bt_acc(&g, vb.data(), ga, n, k, m));
                    acc(&mut grads, &nodes, *b, |gb| matmul_at_acc(va.data(), &g, gb, n, k, m));
                }
                Op::Bmm(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (bsz, n, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                    let m = vb.shape()[2];
                    acc(&mut grads, &nodes, *a, |ga| {
                        for bi in 0..bsz {
                            matmul_bt_acc(
                                &g[bi * n * m..(bi + 1) * n * m],
                                &vb.data()[bi * k * m..(bi + 1) * k * m],
                                &mut ga[bi * n * k..(bi + 1) * n * k],
                                n,
                                k,
                                m,
                            );
                        }
                    });
                    acc(&mut grads, &nodes, *b, |gb| {
                        for bi in 0..bsz {
                            matmul_at_acc(
                                &va.data()[bi * n * k..(bi + 1) * n * k],
                                &g[bi * n * m..(bi + 1) * n * m],
                                &mut gb[bi * k * m..(bi + 1) * k * m],
                                n,
                                k,
                                m,
                            );
                        }
                    });
                }
                Op::Transpose(x) => {
                    let s = node.value.shape();
                    // output is [.., c, r]; map back to [.., r, c]
                    let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
                    let batch = node.value.numel() / (r * c).max(1);
                    acc(&mut grads, &nodes, *x, |gx| {
                        let mut tmp = vec![0.0; g.len()];
                        transpose_into(&g, &mut tmp, batch, c, r);
                        gx.iter_mut().zip(tmp).for_each(|(o, v)| *o += v);
                    });
                }
                Op::Reshape(x) => {
                    acc(&mut grads, &nodes, *x, |gx| gx.iter_mut().zip(&g).for_each(|(o, v)| *o += v));
                }
                Op::Concat(xs, axis) => {
                    let s = node.value.shape();
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let row = s[*axis] * inner;
                    let mut offset = 0;
                    for &x in xs {
                        let chunk = nodes[x].value.shape()[*axis] * inner;
                        acc(&mut grads, &nodes, x, |gx| {
                            for o in 0..outer {
                                let src = &g[o * row + offset..o * row + offset + chunk];
                                gx[o * chunk..(o + 1) * chunk]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(a, b)| *a += b);
                            }
                        });
                        offset += chunk;
                    }
                }
                Op::Slice(x, start, end) => {
                    let d = nodes[*x].value.last_dim();
                    let w = end - start;
                    acc(&mut grads, &nodes, *x, |gx| {
                        for (r, gr) in g.chunks(w.max(1)).enumerate() {
                            gx[r * d + start..r * d + end]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                }
                Op::Sum(x, axis) | Op::Mean(x, axis) => {
                    let (outer, n, inner) = split_axis(nodes[*x].value.shape(), *axis);
                    let f = if matches!(node.op, Op::Mean(..)) && n > 0 { 1.0 / n as f64 } else { 1.0 };
                    acc(&mut grads, &nodes, *x, |gx| {
                        for o in 0..outer {
                            for a in 0..n {
                                for i in 0..inner {
                                    gx[(o * n + a) * inner + i] += f * g[o * inner + i];
                                }
                            }
                        }
                    });
                }
                Op::SumAll(x) => {
                    acc(&mut grads, &nodes, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0]));
                }
                Op::Relu(x) => {
                    let xv = nodes[*x].value.data();
                    acc(&mut grads, &nodes, *x, |gx| {
                        for j in 0..gx.len() {
                            if xv[j] > 0.0 {
                                gx[j] += g[j];
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    acc(&mut grads, &nodes, *x, |gx| {
                        for j in 0..gx.len() {
                            gx[j] += g[j] * y[j] * (1.0 - y[j]);
                        }
                    });
                }
                Op::Exp(x) => {
                    acc(&mut grads, &nodes, *x, |gx| {
                        for j in 0..gx.len() {
                            gx[j] += g[j] * y[j];
                        }
                    });
                }
                Op::Log(x) => {
                    let xv = nodes[*x].value.data();
                    acc(&mut grads, &nodes, *x, |gx| {
                        for j in 0..gx.len() {
                            gx[j] += g[j] / xv[j];
                        }
                    });
                }
                Op::Cos(x) => {
                    let xv = nodes[*x].value.data();
                    acc(&mut grads, &nodes, *x, |gx| {
                        for j in 0..gx.len() {
                            gx[j] -= g[j] * xv[j].sin();
                        }
                    });
                }
                Op::Clamp(x, lo, hi) => {
                    let xv = nodes[*x].value.data();
                    acc(&mut grads, &nodes, *x, |gx| {
                        for j in 0..gx.len() {
                            if xv[j] >= *lo && xv[j] <= *hi {
                                gx[j] += g[j];
                            }
                        }
                    });
                }
                Op::MaskedSoftmax(x) => {
                    let d = node.value.last_dim().max(1);
                    acc(&mut grads, &nodes, *x, |gx| {
                        for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                out[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::Dropout(x, scale) => {
                    acc(&mut grads, &nodes, *x, |gx| {
                        for j in 0..gx.len() {
                            gx[j] += g[j] * scale[j];
                        }
                    });
                }
                Op::Gather(t, rows) => {
                    let d = nodes[*t].value.shape()[1];
                    acc(&mut grads, &nodes, *t, |gt| {
                        for (i, r) in rows.iter().enumerate() {
                            if let Some(r) = *r {
                                gt[r * d..(r + 1) * d]
                                    .iter_mut()
                                    .zip(&g[i * d..(i + 1) * d])
                                    .for_each(|(a, b)| *a += b);
                            }
                        }
                    });
                }
            }
        }
        Ok(out)
    }
}

fn transpose_into(src: &[f64], dst: &mut [f64], batch: usize, r: usize, c: usize) {
    for b in 0..batch {
        let off = b * r * c;
        for i in 0..r {
            for j in 0..c {
                dst[off + j * r + i] = src[off + i * c + j];
            }
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

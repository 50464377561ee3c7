//! Reverse-mode gradient tape.
//!
//! A [`Tape`] records every primitive executed during one forward pass.
//! Node `i` only ever references nodes `< i`, so the record is already in
//! topological order and `backward` is a single reverse sweep. Parameters are
//! read in place from a borrowed [`ParamStore`]; their gradients are returned
//! in a [`Gradients`] value and folded back with [`ParamStore::accumulate`].
//!
//! Binary elementwise ops accept an rhs that broadcasts over the leading
//! dimensions of the lhs (its shape, ignoring leading 1s, is a suffix of the
//! lhs shape) or that has a single element.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{check_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Storage {
    Owned(Vec<f64>),
    Param(ParamId),
}

#[derive(Clone, Copy)]
enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
}

#[derive(Clone, Copy, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Min,
    Max,
}

enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Concat {
        parts: Vec<usize>,
    },
    Slice {
        a: usize,
        start: usize,
    },
    Reshape {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    Max {
        a: usize,
        arg: usize,
    },
    Unary {
        kind: Unary,
        a: usize,
    },
    Softmax {
        a: usize,
        dims: AxisDims,
        log: bool,
    },
}

#[derive(Clone, Copy)]
struct AxisDims {
    outer: usize,
    len: usize,
    inner: usize,
}

struct Node {
    shape: Vec<usize>,
    storage: Storage,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape<'static> {
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }
}

impl<'p> Tape<'p> {
    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.data(v.0)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.data(v.0).len()
    }

    /// First element of `v`; meant for scalars.
    pub fn item(&self, v: Var) -> f64 {
        self.data(v.0)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, i: usize) -> &[f64] {
        match &self.nodes[i].storage {
            Storage::Owned(d) => d,
            Storage::Param(id) => self
                .store
                .expect("param node without a store")
                .get(*id)
                .data(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            storage: Storage::Owned(data),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ── leaves ───────────────────────────────────────────────────────

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        check_shape(&shape, data.len())?;
        Ok(self.push(shape, data, Op::Constant, false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![1], vec![value], Op::Constant, false)
    }

    /// Records `tensor` as a leaf; it is differentiated iff `requires_grad`.
    pub fn input(&mut self, tensor: &Tensor) -> Var {
        let op = if tensor.requires_grad() {
            Op::Input
        } else {
            Op::Constant
        };
        let needs = tensor.requires_grad();
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), op, needs)
    }

    /// Leaf reading a stored parameter in place. Repeated calls with the same
    /// id return the same node so gradients from every use accumulate.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        let store = self.store.expect("Tape::param on a tape without a ParamStore");
        let shape = store.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            storage: Storage::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// Matrix product. 1-D operands are treated as a row (lhs) or column
    /// (rhs) vector and the corresponding output dimension is dropped.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, a_vec) = match sa.as_slice() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return Err(mismatch("matmul", &sa, &sb)),
        };
        let (k2, n, b_vec) = match sb.as_slice() {
            [k] => (*k, 1, true),
            [k, n] => (*k, *n, false),
            _ => return Err(mismatch("matmul", &sa, &sb)),
        };
        if k != k2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let out = matmul_raw(self.data(a.0), self.data(b.0), m, k, n);
        let shape = match (a_vec, b_vec) {
            (true, true) => vec![1],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (false, false) => vec![m, n],
        };
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            needs,
        ))
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, "minimum", a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, "maximum", a, b)
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcasts(sa, sb) {
            return Err(mismatch(name, sa, sb));
        }
        let shape = sa.to_vec();
        let (da, db) = (self.data(a.0), self.data(b.0));
        let nb = db.len();
        let out: Vec<f64> = da
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = db[i % nb];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Min => x.min(y),
                    Binary::Max => x.max(y),
                }
            })
            .collect();
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(shape, out, Op::Binary { kind, a: a.0, b: b.0 }, needs))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.data(a.0).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.nodes[a.0].needs_grad;
        self.push(shape, out, Op::Scale { a: a.0, factor }, needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Relu => |x| x.max(0.0),
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
        };
        let out = self.data(a.0).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.nodes[a.0].needs_grad;
        self.push(shape, out, Op::Unary { kind, a: a.0 }, needs)
    }

    // ── structure ────────────────────────────────────────────────────

    /// Concatenates along axis 0. All parts must agree on trailing dims.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => {
                return Err(TensorError::InvalidArgument {
                    op: "concat",
                    shape: vec![],
                    reason: "no operands".into(),
                })
            }
        };
        let mut rows = 0;
        let mut data = Vec::new();
        let mut needs = false;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(mismatch("concat", &first, s));
            }
            rows += s[0];
            needs |= self.nodes[p.0].needs_grad;
            data.extend_from_slice(self.data(p.0));
        }
        let mut shape = first;
        shape[0] = rows;
        let parts = parts.iter().map(|v| v.0).collect();
        Ok(self.push(shape, data, Op::Concat { parts }, needs))
    }

    /// Contiguous run of `len` elements of the flattened tensor, as 1-D.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.numel(a);
        if len == 0 || start + len > n {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                shape: self.shape(a).to_vec(),
                reason: format!("range {start}..{} out of bounds", start + len),
            });
        }
        let out = self.data(a.0)[start..start + len].to_vec();
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(vec![len], out, Op::Slice { a: a.0, start }, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.numel(a);
        if check_shape(&shape, n).is_err() {
            return Err(mismatch("reshape", self.shape(a), &shape));
        }
        let out = self.data(a.0).to_vec();
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(shape, out, Op::Reshape { a: a.0 }, needs))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a.0).iter().sum();
        let needs = self.nodes[a.0].needs_grad;
        self.push(vec![1], vec![s], Op::Sum { a: a.0 }, needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a.0);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let needs = self.nodes[a.0].needs_grad;
        self.push(vec![1], vec![s], Op::Mean { a: a.0 }, needs)
    }

    /// Largest element; the gradient flows to its first occurrence.
    pub fn max(&mut self, a: Var) -> Var {
        let d = self.data(a.0);
        let mut arg = 0;
        for (i, &x) in d.iter().enumerate() {
            if x > d[arg] {
                arg = i;
            }
        }
        let m = d[arg];
        let needs = self.nodes[a.0].needs_grad;
        self.push(vec![1], vec![m], Op::Max { a: a.0, arg }, needs)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, true)
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, log: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let dims = AxisDims {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        };
        let x = self.data(a.0);
        let mut out = vec![0.0; x.len()];
        for o in 0..dims.outer {
            for i in 0..dims.inner {
                let at = |j: usize| o * dims.len * dims.inner + j * dims.inner + i;
                let mx = (0..dims.len)
                    .map(|j| x[at(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..dims.len).map(|j| (x[at(j)] - mx).exp()).sum();
                let lz = mx + z.ln();
                for j in 0..dims.len {
                    out[at(j)] = if log {
                        x[at(j)] - lz
                    } else {
                        (x[at(j)] - mx).exp() / z
                    };
                }
            }
        }
        let needs = self.nodes[a.0].needs_grad;
        Ok(self.push(shape, out, Op::Softmax { a: a.0, dims, log }, needs))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.numel(loss) != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Input => {
                    out.inputs.insert(Var(i), g);
                }
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if self.nodes[*a].needs_grad {
                        let bd = self.data(*b);
                        let ga = slot(&mut grads, *a, m * k);
                        for r in 0..m {
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                let grow = &g[r * n..(r + 1) * n];
                                ga[r * k + p] += dot(grow, brow);
                            }
                        }
                    }
                    if self.nodes[*b].needs_grad {
                        let ad = self.data(*a);
                        let gb = slot(&mut grads, *b, k * n);
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let av = ad[r * k + p];
                                if av != 0.0 {
                                    axpy(av, grow, &mut gb[p * n..(p + 1) * n]);
                                }
                            }
                        }
                    }
                }
                Op::Binary { kind, a, b } => {
                    let (a, b, kind) = (*a, *b, *kind);
                    let nb = self.data(b).len();
                    if self.nodes[a].needs_grad {
                        let ad = self.data(a);
                        let bd = self.data(b);
                        let ga = slot(&mut grads, a, g.len());
                        for (i, gi) in g.iter().enumerate() {
                            let (x, y) = (ad[i], bd[i % nb]);
                            ga[i] += match kind {
                                Binary::Add | Binary::Sub => *gi,
                                Binary::Mul => gi * y,
                                Binary::Min => take_lhs(x <= y, *gi),
                                Binary::Max => take_lhs(x >= y, *gi),
                            };
                        }
                    }
                    if self.nodes[b].needs_grad {
                        let ad = self.data(a);
                        let bd = self.data(b);
                        let gb = slot(&mut grads, b, nb);
                        for (i, gi) in g.iter().enumerate() {
                            let (x, y) = (ad[i], bd[i % nb]);
                            gb[i % nb] += match kind {
                                Binary::Add => *gi,
                                Binary::Sub => -gi,
                                Binary::Mul => gi * x,
                                Binary::Min => take_lhs(x > y, *gi),
                                Binary::Max => take_lhs(x < y, *gi),
                            };
                        }
                    }
                }
                Op::Scale { a, factor } => {
                    let ga = slot(&mut grads, *a, g.len());
                    axpy(*factor, &g, ga);
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.data(p).len();
                        if self.nodes[p].needs_grad {
                            let gp = slot(&mut grads, p, len);
                            axpy(1.0, &g[offset..offset + len], gp);
                        }
                        offset += len;
                    }
                }
                Op::Slice { a, start } => {
                    let n = self.data(*a).len();
                    let ga = slot(&mut grads, *a, n);
                    axpy(1.0, &g, &mut ga[*start..*start + g.len()]);
                }
                Op::Reshape { a } => {
                    let ga = slot(&mut grads, *a, g.len());
                    axpy(1.0, &g, ga);
                }
                Op::Sum { a } => {
                    let n = self.data(*a).len();
                    slot(&mut grads, *a, n).iter_mut().for_each(|x| *x += g[0]);
                }
                Op::Mean { a } => {
                    let n = self.data(*a).len();
                    let share = g[0] / n as f64;
                    slot(&mut grads, *a, n).iter_mut().for_each(|x| *x += share);
                }
                Op::Max { a, arg } => {
                    let n = self.data(*a).len();
                    slot(&mut grads, *a, n)[*arg] += g[0];
                }
                Op::Unary { kind, a } => {
                    let a = *a;
                    let x = self.data(a);
                    let y = self.data(i);
                    let n = x.len();
                    let ga = slot(&mut grads, a, n);
                    for j in 0..n {
                        ga[j] += g[j]
                            * match kind {
                                Unary::Tanh => 1.0 - y[j] * y[j],
                                Unary::Sigmoid => y[j] * (1.0 - y[j]),
                                Unary::Relu => {
                                    if x[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Exp => y[j],
                                Unary::Log => 1.0 / x[j],
                            };
                    }
                }
                Op::Softmax { a, dims, log } => {
                    let (a, dims, log) = (*a, *dims, *log);
                    let y = self.data(i);
                    let ga = slot(&mut grads, a, y.len());
                    for o in 0..dims.outer {
                        for inn in 0..dims.inner {
                            let at = |j: usize| o * dims.len * dims.inner + j * dims.inner + inn;
                            if log {
                                let gs: f64 = (0..dims.len).map(|j| g[at(j)]).sum();
                                for j in 0..dims.len {
                                    ga[at(j)] += g[at(j)] - y[at(j)].exp() * gs;
                                }
                            } else {
                                let dotp: f64 = (0..dims.len).map(|j| g[at(j)] * y[at(j)]).sum();
                                for j in 0..dims.len {
                                    ga[at(j)] += y[at(j)] * (g[at(j)] - dotp);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    params: HashMap<ParamId, Vec<f64>>,
    inputs: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Gradient of an [`Tape::input`] leaf created with `requires_grad`.
    pub fn input(&self, v: Var) -> Option<&[f64]> {
        self.inputs.get(&v).map(Vec::as_slice)
    }

    /// Parameter gradients in id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        let mut ids: Vec<_> = self.params.keys().copied().collect();
        ids.sort();
        ids.into_iter().map(move |id| (id, self.params[&id].as_slice()))
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, n: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; n])
}

fn take_lhs(cond: bool, g: f64) -> f64 {
    if cond {
        g
    } else {
        0.0
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcasts(a: &[usize], b: &[usize]) -> bool {
    if a == b || b.iter().product::<usize>() == 1 {
        return true;
    }
    let first = b.iter().position(|&d| d != 1).unwrap_or(b.len());
    let b = &b[first..];
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for r in 0..m {
        let crow = &mut c[r * n..(r + 1) * n];
        for p in 0..k {
            let av = a[r * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], crow);
            }
        }
    }
    c
}

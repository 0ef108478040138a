use std::collections::HashMap;

use super::{ParamId, ParameterSet, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Constant,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Stack(Vec<Var>),
    Row(Var, usize),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, usize),
    Gather(Var, Vec<usize>),
    Dot(Var, Var),
    Sum(Var),
    SumAll(Vec<Var>),
    L2Normalize(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    /// False when no leaf below this node can receive a gradient.
    tracked: bool,
}

/// Record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Adjoints of the leaves of a tape with respect to one scalar output.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a leaf (input or parameter). `None` when
    /// the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.adjoints.get(v.0).and_then(|a| a.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.wrt(*v).map(|g| (*p, g)))
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

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        debug_assert!(
            value.iter().all(|x| x.is_finite()),
            "non-finite value produced by {op:?}"
        );
        let tracked = self.any_tracked(&op);
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_tracked(&self, op: &Op) -> bool {
        let t = |v: &Var| self.nodes[v.0].tracked;
        match op {
            Op::Input | Op::Param => true,
            Op::Constant => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulScalar(a, b) | Op::Dot(a, b) => {
                t(a) || t(b)
            }
            Op::Concat(vs) | Op::Stack(vs) | Op::SumAll(vs) => vs.iter().any(t),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Slice(a, _)
            | Op::Row(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Pick(a, _)
            | Op::Gather(a, _)
            | Op::Sum(a)
            | Op::L2Normalize(a) => t(a),
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    /// A constant leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        let Tensor { shape, data } = t;
        self.push(shape, data, Op::Input)
    }

    pub fn vector(&mut self, data: Vec<f64>) -> Var {
        self.input(Tensor::vector(data))
    }

    /// A leaf that never receives a gradient; backward skips work that
    /// only feeds it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let Tensor { shape, data } = t;
        self.push(shape, data, Op::Constant)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.input(Tensor::scalar(x))
    }

    /// Brings a trainable parameter onto the tape. Repeated calls for the
    /// same id return the same handle.
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = params.value(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param);
        self.params.insert(id, v);
        v
    }

    fn rank1(&self, op: &'static str, v: Var) -> Result<usize> {
        match self.shape(v) {
            [n] => Ok(*n),
            s => Err(Error::shape(op, format!("expected a vector, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k) = match sa[..] {
            [m, k] => (m, k),
            _ => return Err(Error::shape("matmul", format!("left operand has shape {sa:?}"))),
        };
        let (k2, n, out_shape) = match sb[..] {
            [k2] => (k2, 1, vec![m]),
            [k2, n] => (k2, n, vec![m, n]),
            _ => return Err(Error::shape("matmul", format!("right operand has shape {sb:?}"))),
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        if n == 1 {
            for (i, o) in out.iter_mut().enumerate() {
                let row = &av[i * k..(i + 1) * k];
                *o = row.iter().zip(bv).map(|(x, y)| x * y).sum();
            }
        } else {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    for (o, bpj) in orow.iter_mut().zip(brow) {
                        *o += aip * bpj;
                    }
                }
            }
        }
        Ok(self.push(out_shape, out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = match self.shape(a) {
            [m, n] => (*m, *n),
            s => return Err(Error::shape("transpose", format!("shape {s:?}"))),
        };
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(a)))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rec))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, c))
    }

    /// Tensor times a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", format!("scalar operand has shape {:?}", self.shape(s))));
        }
        let c = self.scalar(s);
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::MulScalar(a, s)))
    }

    /// Concatenation of vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            self.rank1("concat", p)?;
            out.extend_from_slice(self.value(p));
        }
        if out.is_empty() {
            return Err(Error::shape("concat", "nothing to concatenate"));
        }
        let n = out.len();
        Ok(self.push(vec![n], out, Op::Concat(parts.to_vec())))
    }

    /// `a[start..start + len]` of a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.rank1("slice", a)?;
        if start + len > n || len == 0 {
            return Err(Error::shape("slice", format!("range {start}..{} of length {n}", start + len)));
        }
        let out = self.value(a)[start..start + len].to_vec();
        Ok(self.push(vec![len], out, Op::Slice(a, start)))
    }

    /// Stacks equally sized vectors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or_else(|| Error::shape("stack", "no rows"))?;
        let n = self.rank1("stack", first)?;
        let mut out = Vec::with_capacity(n * rows.len());
        for &r in rows {
            if self.rank1("stack", r)? != n {
                return Err(Error::shape("stack", format!("row of shape {:?}, expected [{n}]", self.shape(r))));
            }
            out.extend_from_slice(self.value(r));
        }
        Ok(self.push(vec![rows.len(), n], out, Op::Stack(rows.to_vec())))
    }

    /// Row `i` of a matrix; used for embedding lookup.
    pub fn row(&mut self, table: Var, i: usize) -> Result<Var> {
        let (m, n) = match self.shape(table) {
            [m, n] => (*m, *n),
            s => return Err(Error::shape("row", format!("table shape {s:?}"))),
        };
        if i >= m {
            return Err(Error::shape("row", format!("row {i} of {m}")));
        }
        let out = self.value(table)[i * n..(i + 1) * n].to_vec();
        Ok(self.push(vec![n], out, Op::Row(table, i)))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, rec: Op) -> Var {
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, rec)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    fn rows_of(&self, op: &'static str, a: Var) -> Result<usize> {
        match self.shape(a) {
            [n] if *n > 0 => Ok(*n),
            [_, n] if *n > 0 => Ok(*n),
            s => Err(Error::shape(op, format!("shape {s:?}"))),
        }
    }

    /// Softmax over a vector, or over each row of a matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.rows_of("softmax", a)?;
        let mut out = self.value(a).to_vec();
        out.chunks_mut(n).for_each(softmax_in_place);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.rows_of("log_softmax", a)?;
        let mut out = self.value(a).to_vec();
        out.chunks_mut(n).for_each(log_softmax_in_place);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::LogSoftmax(a)))
    }

    /// Element `i` of a vector, as a scalar.
    pub fn pick(&mut self, a: Var, i: usize) -> Result<Var> {
        let n = self.rank1("pick", a)?;
        if i >= n {
            return Err(Error::shape("pick", format!("index {i} of {n}")));
        }
        let x = self.value(a)[i];
        Ok(self.push(vec![], vec![x], Op::Pick(a, i)))
    }

    /// `a[idx[0]], a[idx[1]], ...` as a new vector.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = self.rank1("gather", a)?;
        if idx.is_empty() {
            return Err(Error::shape("gather", "empty index list"));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} of {n}")));
        }
        let av = self.value(a);
        let out = idx.iter().map(|&i| av[i]).collect();
        Ok(self.push(vec![idx.len()], out, Op::Gather(a, idx.to_vec())))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.rank1("dot", a)?;
        self.same_shape("dot", a, b)?;
        let d = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        Ok(self.push(vec![], vec![d], Op::Dot(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![], vec![s], Op::Sum(a))
    }

    /// Sum of several one-element tensors.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut s = 0.0;
        for &p in parts {
            if self.value(p).len() != 1 {
                return Err(Error::shape("sum_scalars", format!("operand of shape {:?}", self.shape(p))));
            }
            s += self.scalar(p);
        }
        Ok(self.push(vec![], vec![s], Op::SumAll(parts.to_vec())))
    }

    /// `a / ||a||`.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.rank1("l2_normalize", a)?;
        let norm = self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::numeric("l2_normalize of a zero or non-finite vector"));
        }
        let out = self.value(a).iter().map(|x| x / norm).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::L2Normalize(a)))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be a scalar, got shape {:?}", self.shape(output)),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Input | Op::Constant | Op::Param => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = if self.shape(*b).len() == 1 { 1 } else { self.shape(*b)[1] };
                    let (ta, tb) = (self.nodes[a.0].tracked, self.nodes[b.0].tracked);
                    if n == 1 {
                        if ta {
                            let da = accumulate(&mut adj, *a, m * k);
                            for (darow, gr) in da.chunks_mut(k).zip(&g) {
                                darow.iter_mut().zip(bv).for_each(|(d, x)| *d += gr * x);
                            }
                        }
                        if tb {
                            let db = accumulate(&mut adj, *b, k);
                            for (arow, gr) in av.chunks(k).zip(&g) {
                                db.iter_mut().zip(arow).for_each(|(d, x)| *d += gr * x);
                            }
                        }
                        continue;
                    }
                    if ta {
                        let da = accumulate(&mut adj, *a, m * k);
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            let darow = &mut da[r * k..(r + 1) * k];
                            for (p, d) in darow.iter_mut().enumerate() {
                                let brow = &bv[p * n..(p + 1) * n];
                                *d += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    if tb {
                        let db = accumulate(&mut adj, *b, k * n);
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            let arow = &av[r * k..(r + 1) * k];
                            for (p, &arp) in arow.iter().enumerate() {
                                if arp == 0.0 {
                                    continue;
                                }
                                let dbrow = &mut db[p * n..(p + 1) * n];
                                for (d, gj) in dbrow.iter_mut().zip(grow) {
                                    *d += arp * gj;
                                }
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let da = accumulate(&mut adj, *a, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[c * m + r];
                        }
                    }
                }
                Op::Add(a, b) => {
                    let n = g.len();
                    accumulate(&mut adj, *a, n).iter_mut().zip(&g).for_each(|(d, x)| *d += x);
                    accumulate(&mut adj, *b, n).iter_mut().zip(&g).for_each(|(d, x)| *d += x);
                }
                Op::Sub(a, b) => {
                    let n = g.len();
                    accumulate(&mut adj, *a, n).iter_mut().zip(&g).for_each(|(d, x)| *d += x);
                    accumulate(&mut adj, *b, n).iter_mut().zip(&g).for_each(|(d, x)| *d -= x);
                }
                Op::Mul(a, b) => {
                    let n = g.len();
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut adj, *a, n)
                        .iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(d, (x, y))| *d += x * y);
                    accumulate(&mut adj, *b, n)
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(d, (x, y))| *d += x * y);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adj, *a, g.len())
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(d, x)| *d += c * x);
                }
                Op::MulScalar(a, s) => {
                    let c = self.scalar(*s);
                    let av = self.value(*a);
                    let ds: f64 = g.iter().zip(av).map(|(x, y)| x * y).sum();
                    accumulate(&mut adj, *a, g.len())
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(d, x)| *d += c * x);
                    accumulate(&mut adj, *s, 1)[0] += ds;
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        accumulate(&mut adj, *p, n)
                            .iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(d, x)| *d += x);
                        off += n;
                    }
                }
                Op::Slice(a, start) => {
                    let n = self.value(*a).len();
                    accumulate(&mut adj, *a, n)[*start..*start + g.len()]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(d, x)| *d += x);
                }
                Op::Stack(rows) => {
                    let n = node.shape[1];
                    for (r, v) in rows.iter().enumerate() {
                        accumulate(&mut adj, *v, n)
                            .iter_mut()
                            .zip(&g[r * n..(r + 1) * n])
                            .for_each(|(d, x)| *d += x);
                    }
                }
                Op::Row(table, r) => {
                    let len = self.value(*table).len();
                    let n = g.len();
                    accumulate(&mut adj, *table, len)[r * n..(r + 1) * n]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(d, x)| *d += x);
                }
                Op::Tanh(a) => {
                    accumulate(&mut adj, *a, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(d, (x, t))| *d += x * (1.0 - t * t));
                }
                Op::Sigmoid(a) => {
                    accumulate(&mut adj, *a, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(d, (x, s))| *d += x * s * (1.0 - s));
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    accumulate(&mut adj, *a, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(d, (x, v))| {
                            if *v > 0.0 {
                                *d += x
                            }
                        });
                }
                Op::Exp(a) => {
                    accumulate(&mut adj, *a, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(d, (x, e))| *d += x * e);
                }
                Op::Softmax(a) => {
                    let n = *node.shape.last().expect("softmax input has rank >= 1");
                    let da = accumulate(&mut adj, *a, g.len());
                    for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let inner: f64 = grow.iter().zip(yrow).map(|(x, p)| x * p).sum();
                        for ((d, x), p) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += p * (x - inner);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let n = *node.shape.last().expect("log_softmax input has rank >= 1");
                    let da = accumulate(&mut adj, *a, g.len());
                    for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let total: f64 = grow.iter().sum();
                        for ((d, x), lp) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += x - lp.exp() * total;
                        }
                    }
                }
                Op::Pick(a, idx) => {
                    let n = self.value(*a).len();
                    accumulate(&mut adj, *a, n)[*idx] += g[0];
                }
                Op::Gather(a, idx) => {
                    let n = self.value(*a).len();
                    let da = accumulate(&mut adj, *a, n);
                    for (k, &i) in idx.iter().enumerate() {
                        da[i] += g[k];
                    }
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let n = av.len();
                    accumulate(&mut adj, *a, n)
                        .iter_mut()
                        .zip(bv)
                        .for_each(|(d, y)| *d += g[0] * y);
                    accumulate(&mut adj, *b, n)
                        .iter_mut()
                        .zip(av)
                        .for_each(|(d, x)| *d += g[0] * x);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut adj, *a, n).iter_mut().for_each(|d| *d += g[0]);
                }
                Op::SumAll(parts) => {
                    for p in parts {
                        accumulate(&mut adj, *p, 1)[0] += g[0];
                    }
                }
                Op::L2Normalize(a) => {
                    let av = self.value(*a);
                    let norm = av.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let inner: f64 = g.iter().zip(y).map(|(x, u)| x * u).sum();
                    accumulate(&mut adj, *a, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(d, (x, u))| *d += (x - u * inner) / norm);
                }
            }
        }
        let params = self.params.iter().map(|(p, v)| (*p, *v)).collect();
        Ok(Gradients {
            adjoints: adj,
            params,
        })
    }

    /// Runs [`Tape::backward`] and adds the parameter gradients into
    /// `params`.
    pub fn backward_into(&self, output: Var, params: &mut ParameterSet) -> Result<()> {
        let grads = self.backward(output)?;
        params.accumulate(&grads);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

    /// Checks every input's gradient against central differences and
    /// returns the worst relative error.
    fn check(inputs: &[Tensor], build: Build) -> f64 {
        let eval = |ins: &[Tensor]| -> (Tape, Vec<Var>, Var) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|t| tape.input(t.clone())).collect();
            let out = build(&mut tape, &vars).unwrap();
            (tape, vars, out)
        };
        let (tape, vars, out) = eval(inputs);
        let grads = tape.backward(out).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, v) in vars.iter().enumerate() {
            let a: Vec<f64> = grads
                .wrt(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
            let mut num = vec![0.0; inputs[k].len()];
            for i in 0..inputs[k].len() {
                let mut up = inputs.to_vec();
                up[k].data_mut()[i] += eps;
                let mut down = inputs.to_vec();
                down[k].data_mut()[i] -= eps;
                let (tu, _, ou) = eval(&up);
                let (td, _, od) = eval(&down);
                num[i] = (tu.scalar(ou) - td.scalar(od)) / (2.0 * eps);
            }
            let diff = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt()
                + num.iter().map(|x| x * x).sum::<f64>().sqrt();
            if scale > 1e-12 {
                worst = worst.max(diff / scale);
            }
        }
        worst
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Weighted sum so that every output coordinate matters.
    fn reduce(tape: &mut Tape, v: Var) -> Result<Var> {
        let n = tape.value(v).len();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64 - 0.05 * (i * i % 7) as f64).collect();
        let shape = tape.shape(v).to_vec();
        let w = tape.input(Tensor::new(shape, w).unwrap());
        let p = tape.mul(v, w)?;
        Ok(tape.sum(p))
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
                let y = t.matmul(v[0], v[1])?;
                reduce(t, y)
            }),
            ("matvec", vec![vec![3, 4], vec![4]], |t, v| {
                let y = t.matmul(v[0], v[1])?;
                reduce(t, y)
            }),
            ("transpose", vec![vec![2, 3]], |t, v| {
                let y = t.transpose(v[0])?;
                reduce(t, y)
            }),
            ("add_sub_mul", vec![vec![5], vec![5], vec![5]], |t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.sub(a, v[2])?;
                let c = t.mul(b, v[1])?;
                reduce(t, c)
            }),
            ("scale_mul_scalar", vec![vec![4], vec![]], |t, v| {
                let a = t.scale(v[0], -2.5);
                let b = t.mul_scalar(a, v[1])?;
                reduce(t, b)
            }),
            ("concat_slice", vec![vec![2], vec![3]], |t, v| {
                let a = t.concat(&[v[0], v[1], v[0]])?;
                let b = t.slice(a, 1, 5)?;
                reduce(t, b)
            }),
            ("stack_row", vec![vec![3], vec![3]], |t, v| {
                let m = t.stack(&[v[0], v[1], v[0]])?;
                let r = t.row(m, 2)?;
                let s = reduce(t, m)?;
                let q = reduce(t, r)?;
                t.sum_scalars(&[s, q])
            }),
            ("nonlinear", vec![vec![6]], |t, v| {
                let a = t.tanh(v[0]);
                let b = t.sigmoid(v[0]);
                let c = t.exp(a);
                let d = t.mul(b, c)?;
                reduce(t, d)
            }),
            ("relu", vec![vec![6]], |t, v| {
                let a = t.relu(v[0]);
                reduce(t, a)
            }),
            ("softmax", vec![vec![5]], |t, v| {
                let a = t.softmax(v[0])?;
                reduce(t, a)
            }),
            ("softmax_rows", vec![vec![3, 4]], |t, v| {
                let a = t.softmax(v[0])?;
                reduce(t, a)
            }),
            ("log_softmax", vec![vec![2, 5]], |t, v| {
                let a = t.log_softmax(v[0])?;
                reduce(t, a)
            }),
            ("pick_gather", vec![vec![6]], |t, v| {
                let a = t.gather(v[0], &[4, 0, 4, 2])?;
                let b = t.log_softmax(a)?;
                t.pick(b, 2)
            }),
            ("dot_normalize", vec![vec![4], vec![4]], |t, v| {
                let a = t.l2_normalize(v[0])?;
                t.dot(a, v[1])
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for (name, shapes, build) in cases {
            for _ in 0..3 {
                let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
                let err = check(&inputs, build);
                assert!(err <= 1e-4, "{name}: relative error {err}");
            }
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let z = t.vector(vec![0.0; 4]);
        let s = t.softmax(z).unwrap();
        assert_eq!(t.value(s), &[0.25; 4]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new();
        let x = t.input(Tensor::new(vec![3, 7], (0..21).map(|_| rng.random_range(-30.0..30.0)).collect()).unwrap());
        let s = t.softmax(x).unwrap();
        for row in t.value(s).chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn l2_normalize_gives_unit_norm() {
        let mut t = Tape::new();
        let x = t.vector(vec![3.0, -4.0, 12.0]);
        let u = t.l2_normalize(x).unwrap();
        let n: f64 = t.value(u).iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-15);
        let z = t.vector(vec![0.0, 0.0]);
        assert!(t.l2_normalize(z).is_err());
    }

    #[test]
    fn matmul_hand_case() {
        let mut t = Tape::new();
        let a = t.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.input(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.input(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = t.vector(vec![0.0; 2]);
        match t.matmul(a, b) {
            Err(Error::Shape { op, detail }) => {
                assert_eq!(op, "matmul");
                assert!(detail.contains("[2, 3]") && detail.contains("[2]"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(t.add(a, b).is_err());
        assert!(t.dot(b, a).is_err());
    }

    #[test]
    fn disconnected_leaf_has_no_gradient() {
        let mut t = Tape::new();
        let a = t.vector(vec![1.0, 2.0]);
        let b = t.vector(vec![3.0]);
        let s = t.sum(a);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(a), Some(&[1.0, 1.0][..]));
        assert_eq!(g.wrt(b), None);
    }
}

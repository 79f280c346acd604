//! Tape-based reverse-mode differentiation over [`DenseArray`] values.
//!
//! Every primitive appends one node holding its forward value and the indices
//! of its parents. Parents always precede children, so the insertion order is
//! a topological order and [`Tape::backward`] is a single reverse sweep.

use std::collections::BTreeMap;
use std::fmt;

use super::array::{matmul_raw, transpose_raw, DenseArray};
use super::params::ParameterSet;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward rule of a tape node.
///
/// Binary elementwise primitives accept either equal shapes or a right-hand
/// side of shape `[n]`/`[1, n]` broadcast across the rows of an `[m, n]`
/// left-hand side. Nothing else broadcasts.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Relu,
    Cos,
    Abs,
    Scale(f64),
    Shift(f64),
    /// Sum of all entries, scalar result.
    Sum,
    /// Mean of all entries, scalar result.
    Mean,
    /// Reduce a 2-D array along an axis, keeping it as length 1.
    SumAxis(usize),
    MeanAxis(usize),
    Reshape(Vec<usize>),
    /// Join two 2-D arrays along an axis.
    Concat(usize),
    /// Repeat an `[n]` or `[1, n]` array into `[rows, n]`.
    Broadcast(usize),
}

impl Primitive {
    fn arity(&self) -> usize {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Concat(_) => 2,
            _ => 1,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Relu => "relu",
            Primitive::Cos => "cos",
            Primitive::Abs => "abs",
            Primitive::Scale(_) => "scale",
            Primitive::Shift(_) => "shift",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SumAxis(_) => "sum_axis",
            Primitive::MeanAxis(_) => "mean_axis",
            Primitive::Reshape(_) => "reshape",
            Primitive::Concat(_) => "concat",
            Primitive::Broadcast(_) => "broadcast",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf,
    Op(Primitive),
}

#[derive(Debug, Clone)]
struct Node {
    value: DenseArray,
    kind: NodeKind,
    parents: Vec<usize>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, if any flowed into it.
    pub fn get(&self, var: Var) -> Option<&DenseArray> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// Parameters of a [`ParameterSet`] recorded as leaves on a tape.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layout {
    Same,
    RowBroadcast { rows: usize, cols: usize },
}

fn binary_layout(op: &Primitive, a: &[usize], b: &[usize]) -> Result<Layout> {
    if a == b {
        return Ok(Layout::Same);
    }
    if let [rows, cols] = *a {
        let row_like = matches!(*b, [n] if n == cols) || matches!(*b, [1, n] if n == cols);
        if row_like {
            return Ok(Layout::RowBroadcast { rows, cols });
        }
    }
    Err(mismatch(op, &[a, b]))
}

fn mismatch(op: &Primitive, shapes: &[&[usize]]) -> Error {
    let shapes = shapes.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" and ");
    Error::ShapeMismatch { op: op.name(), shapes }
}

fn dims2(op: &Primitive, a: &DenseArray) -> Result<(usize, usize)> {
    a.dims2().ok_or_else(|| mismatch(op, &[a.shape()]))
}

/// Sums an `[rows, cols]` buffer over rows.
fn column_sums(g: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    out
}

/// Recording of a computation for reverse-mode differentiation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, var: Var) -> &DenseArray {
        &self.nodes[var.0].value
    }

    /// Parent nodes of `var`, in argument order.
    pub fn parents(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].parents.iter().map(|&i| Var(i)).collect()
    }

    /// The primitive that produced `var`, or `None` for leaves.
    pub fn primitive(&self, var: Var) -> Option<&Primitive> {
        match &self.nodes[var.0].kind {
            NodeKind::Leaf => None,
            NodeKind::Op(p) => Some(p),
        }
    }

    fn push_leaf(&mut self, value: DenseArray, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, kind: NodeKind::Leaf, parents: Vec::new(), requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: DenseArray) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push_leaf(value, false)
    }

    /// Records every parameter of `params` as a trainable leaf.
    pub fn bind(&mut self, params: &ParameterSet) -> Bound {
        let vars = params.iter().map(|(name, value)| (name.to_string(), self.variable(value.clone()))).collect();
        Bound { vars }
    }

    /// Applies `prim` to `inputs` and records the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != prim.arity() {
            return Err(Error::InvalidArgument(format!("{prim} takes {} inputs, got {}", prim.arity(), inputs.len())));
        }
        let value = self.forward(&prim, inputs)?;
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {prim}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            kind: NodeKind::Op(prim),
            parents: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn forward(&self, prim: &Primitive, inputs: &[Var]) -> Result<DenseArray> {
        let a = &self.nodes[inputs[0].0].value;
        let out = match prim {
            Primitive::MatMul => {
                let b = &self.nodes[inputs[1].0].value;
                let (m, k) = dims2(prim, a)?;
                let (k2, n) = dims2(prim, b)?;
                if k != k2 {
                    return Err(mismatch(prim, &[a.shape(), b.shape()]));
                }
                DenseArray::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
            }
            Primitive::Transpose => {
                let (m, n) = dims2(prim, a)?;
                DenseArray::from_parts(vec![n, m], transpose_raw(a.data(), m, n))
            }
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                let b = &self.nodes[inputs[1].0].value;
                let layout = binary_layout(prim, a.shape(), b.shape())?;
                let cols = match layout {
                    Layout::Same => a.len().max(1),
                    Layout::RowBroadcast { cols, .. } => cols,
                };
                let mut data = a.data().to_vec();
                if cols > 0 {
                    for chunk in data.chunks_mut(cols) {
                        let rhs = &b.data()[..chunk.len()];
                        match prim {
                            Primitive::Add => chunk.iter_mut().zip(rhs).for_each(|(x, y)| *x += y),
                            Primitive::Sub => chunk.iter_mut().zip(rhs).for_each(|(x, y)| *x -= y),
                            _ => chunk.iter_mut().zip(rhs).for_each(|(x, y)| *x *= y),
                        }
                    }
                }
                DenseArray::from_parts(a.shape().to_vec(), data)
            }
            Primitive::Relu => a.map(|x| if x > 0.0 { x } else { 0.0 }),
            Primitive::Cos => a.map(f64::cos),
            Primitive::Abs => a.map(f64::abs),
            Primitive::Scale(c) => a.map(|x| c * x),
            Primitive::Shift(c) => a.map(|x| x + c),
            Primitive::Sum => DenseArray::scalar(a.data().iter().sum()),
            Primitive::Mean => {
                if a.is_empty() {
                    return Err(mismatch(prim, &[a.shape()]));
                }
                DenseArray::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
            Primitive::SumAxis(axis) | Primitive::MeanAxis(axis) => {
                let (m, n) = dims2(prim, a)?;
                let mean = matches!(prim, Primitive::MeanAxis(_));
                match axis {
                    0 => {
                        let mut sums = column_sums(a.data(), m, n);
                        if mean {
                            sums.iter_mut().for_each(|s| *s /= m as f64);
                        }
                        DenseArray::from_parts(vec![1, n], sums)
                    }
                    1 => {
                        let sums = (0..m)
                            .map(|r| {
                                let s: f64 = a.data()[r * n..(r + 1) * n].iter().sum();
                                if mean {
                                    s / n as f64
                                } else {
                                    s
                                }
                            })
                            .collect();
                        DenseArray::from_parts(vec![m, 1], sums)
                    }
                    _ => return Err(Error::InvalidArgument(format!("{prim}: axis {axis} out of range"))),
                }
            }
            Primitive::Reshape(shape) => a.clone().reshaped(shape.clone())?,
            Primitive::Concat(axis) => {
                let b = &self.nodes[inputs[1].0].value;
                let (am, an) = dims2(prim, a)?;
                let (bm, bn) = dims2(prim, b)?;
                match axis {
                    0 if an == bn => {
                        let mut data = a.data().to_vec();
                        data.extend_from_slice(b.data());
                        DenseArray::from_parts(vec![am + bm, an], data)
                    }
                    1 if am == bm => {
                        let mut data = Vec::with_capacity(a.len() + b.len());
                        for r in 0..am {
                            data.extend_from_slice(a.row(r));
                            data.extend_from_slice(b.row(r));
                        }
                        DenseArray::from_parts(vec![am, an + bn], data)
                    }
                    _ => return Err(mismatch(prim, &[a.shape(), b.shape()])),
                }
            }
            Primitive::Broadcast(rows) => {
                let n = match *a.shape() {
                    [n] | [1, n] => n,
                    _ => return Err(mismatch(prim, &[a.shape()])),
                };
                let mut data = Vec::with_capacity(rows * n);
                for _ in 0..*rows {
                    data.extend_from_slice(a.data());
                }
                DenseArray::from_parts(vec![*rows, n], data)
            }
        };
        Ok(out)
    }

    /// Reverse sweep from a scalar `root`.
    ///
    /// Subgradient tie-breaks: `relu'(0) = 0` and `|x|'(0) = 0`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(DenseArray::filled(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let NodeKind::Op(prim) = &node.kind else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(prim, node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, prim: &Primitive, node: &Node, g: &DenseArray, grads: &mut [Option<DenseArray>]) -> Result<()> {
        let pa = node.parents[0];
        let a = &self.nodes[pa].value;
        let gd = g.data();
        match prim {
            Primitive::MatMul => {
                let pb = node.parents[1];
                let b = &self.nodes[pb].value;
                let (m, k) = a.dims2().expect("checked in forward");
                let (_, n) = b.dims2().expect("checked in forward");
                if self.wants(pa) {
                    let bt = transpose_raw(b.data(), k, n);
                    self.accumulate(grads, pa, matmul_raw(gd, &bt, m, n, k));
                }
                if self.wants(pb) {
                    let at = transpose_raw(a.data(), m, k);
                    self.accumulate(grads, pb, matmul_raw(&at, gd, k, m, n));
                }
            }
            Primitive::Transpose => {
                let (m, n) = a.dims2().expect("checked in forward");
                self.accumulate(grads, pa, transpose_raw(gd, n, m));
            }
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                let pb = node.parents[1];
                let b = &self.nodes[pb].value;
                let layout = binary_layout(prim, a.shape(), b.shape())?;
                let cols = match layout {
                    Layout::Same => b.len(),
                    Layout::RowBroadcast { cols, .. } => cols,
                };
                if self.wants(pa) {
                    let mut da = gd.to_vec();
                    if matches!(prim, Primitive::Mul) && cols > 0 {
                        for chunk in da.chunks_mut(cols) {
                            chunk.iter_mut().zip(b.data()).for_each(|(x, y)| *x *= y);
                        }
                    }
                    self.accumulate(grads, pa, da);
                }
                if self.wants(pb) {
                    let full: Vec<f64> = match prim {
                        Primitive::Add => gd.to_vec(),
                        Primitive::Sub => gd.iter().map(|v| -v).collect(),
                        _ => gd.iter().zip(a.data()).map(|(gv, av)| gv * av).collect(),
                    };
                    let db = match layout {
                        Layout::Same => full,
                        Layout::RowBroadcast { rows, cols } => column_sums(&full, rows, cols),
                    };
                    self.accumulate(grads, pb, db);
                }
            }
            Primitive::Relu => {
                let da = gd.iter().zip(a.data()).map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 }).collect();
                self.accumulate(grads, pa, da);
            }
            Primitive::Cos => {
                let da = gd.iter().zip(a.data()).map(|(gv, x)| -gv * x.sin()).collect();
                self.accumulate(grads, pa, da);
            }
            Primitive::Abs => {
                let da = gd
                    .iter()
                    .zip(a.data())
                    .map(|(gv, &x)| {
                        if x > 0.0 {
                            *gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, pa, da);
            }
            Primitive::Scale(c) => {
                self.accumulate(grads, pa, gd.iter().map(|v| c * v).collect());
            }
            Primitive::Shift(_) | Primitive::Reshape(_) => {
                self.accumulate(grads, pa, gd.to_vec());
            }
            Primitive::Sum => self.accumulate(grads, pa, vec![gd[0]; a.len()]),
            Primitive::Mean => self.accumulate(grads, pa, vec![gd[0] / a.len() as f64; a.len()]),
            Primitive::SumAxis(axis) | Primitive::MeanAxis(axis) => {
                let (m, n) = a.dims2().expect("checked in forward");
                let mean = matches!(prim, Primitive::MeanAxis(_));
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] = match axis {
                            0 => gd[c] / if mean { m as f64 } else { 1.0 },
                            _ => gd[r] / if mean { n as f64 } else { 1.0 },
                        };
                    }
                }
                self.accumulate(grads, pa, da);
            }
            Primitive::Concat(axis) => {
                let pb = node.parents[1];
                let b = &self.nodes[pb].value;
                let (am, an) = a.dims2().expect("checked in forward");
                let (_, bn) = b.dims2().expect("checked in forward");
                let (da, db) = if *axis == 0 {
                    (gd[..a.len()].to_vec(), gd[a.len()..].to_vec())
                } else {
                    let width = an + bn;
                    let mut da = Vec::with_capacity(a.len());
                    let mut db = Vec::with_capacity(b.len());
                    for r in 0..am {
                        da.extend_from_slice(&gd[r * width..r * width + an]);
                        db.extend_from_slice(&gd[r * width + an..(r + 1) * width]);
                    }
                    (da, db)
                };
                if self.wants(pa) {
                    self.accumulate(grads, pa, da);
                }
                if self.wants(pb) {
                    self.accumulate(grads, pb, db);
                }
            }
            Primitive::Broadcast(rows) => {
                let n = a.len();
                self.accumulate(grads, pa, column_sums(gd, *rows, n));
            }
        }
        Ok(())
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<DenseArray>], idx: usize, delta: Vec<f64>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let shape = self.nodes[idx].value.shape().to_vec();
        match &mut grads[idx] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(&delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(DenseArray::from_parts(shape, delta)),
        }
    }

    // Convenience wrappers over `apply`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Cos, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Abs, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Shift(c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::SumAxis(axis), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::MeanAxis(axis), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat(axis), &[a, b])
    }

    pub fn broadcast(&mut self, a: Var, rows: usize) -> Result<Var> {
        self.apply(Primitive::Broadcast(rows), &[a])
    }

    /// `a` of shape `[m, 1]` repeated across `cols` columns, via a ones matmul.
    pub fn repeat_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let ones = self.constant(DenseArray::filled(&[1, cols], 1.0));
        self.matmul(a, ones)
    }
}

//! Scalar computation graphs with nested differentiation.
//!
//! A [`Tape`] is an immutable, topologically ordered list of scalar
//! operations over a fixed set of leaves (inputs and parameters). Tapes are
//! built through a [`Graph`], whose [`Var`] handles overload the arithmetic
//! operators:
//!
//! ```
//! use diffnet::autodiff::{derive, Graph};
//!
//! let g = Graph::new();
//! let x = g.input();
//! let y = x.powi(3);
//! let tape = g.finish(y);
//! let d2 = derive(&derive(&tape, 0), 0);
//! assert_eq!(d2.forward(&[2.0]).unwrap(), 12.0);
//! ```
//!
//! [`derive`] is a source transformation: it returns a new tape whose root is
//! the partial derivative of the old root, so it can be applied again to get
//! mixed and higher-order derivatives. [`gradient`] is a reverse sweep over
//! one evaluation and is what the optimizer-facing code uses.
//!
//! Evaluation never mutates the tape. Node values live in an [`Evaluation`]
//! (one point) or a [`BatchEvaluation`] (one column per leaf), so a tape can
//! be shared between threads freely.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

/// Index of a node within its tape.
pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Const(f64),
    /// Leaf by position in the tape's leaf list.
    Leaf(usize),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// Integer power with a constant exponent.
    Powi(NodeId, i32),
    Neg(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    /// Sign function; its derivative is taken to be zero everywhere.
    Sign(NodeId),
}

impl Op {
    fn operands(&self) -> (Option<NodeId>, Option<NodeId>) {
        match *self {
            Op::Const(_) | Op::Leaf(_) => (None, None),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => (Some(a), Some(b)),
            Op::Powi(a, _)
            | Op::Neg(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Abs(a)
            | Op::Sign(a) => (Some(a), None),
        }
    }

    fn remap(&self, map: &[NodeId]) -> Op {
        match *self {
            Op::Const(c) => Op::Const(c),
            Op::Leaf(i) => Op::Leaf(i),
            Op::Add(a, b) => Op::Add(map[a], map[b]),
            Op::Sub(a, b) => Op::Sub(map[a], map[b]),
            Op::Mul(a, b) => Op::Mul(map[a], map[b]),
            Op::Div(a, b) => Op::Div(map[a], map[b]),
            Op::Powi(a, n) => Op::Powi(map[a], n),
            Op::Neg(a) => Op::Neg(map[a]),
            Op::Sin(a) => Op::Sin(map[a]),
            Op::Cos(a) => Op::Cos(map[a]),
            Op::Tanh(a) => Op::Tanh(map[a]),
            Op::Exp(a) => Op::Exp(map[a]),
            Op::Log(a) => Op::Log(map[a]),
            Op::Sqrt(a) => Op::Sqrt(map[a]),
            Op::Abs(a) => Op::Abs(map[a]),
            Op::Sign(a) => Op::Sign(map[a]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LeafKind {
    Input,
    Parameter,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("expected {expected} leaf values, got {got}")]
    LeafCount { expected: usize, got: usize },
    #[error("{op} is undefined for argument {value} at node {node}")]
    Domain {
        node: NodeId,
        op: &'static str,
        value: f64,
        /// Row of the batch that failed, for batched evaluation.
        row: Option<usize>,
    },
    #[error("leaf index {0} out of range")]
    InvalidLeaf(usize),
}

/// An immutable scalar computation graph with a single root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    nodes: Vec<Op>,
    leaves: Vec<LeafKind>,
    root: NodeId,
}

impl Tape {
    pub fn nodes(&self) -> &[Op] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf_kinds(&self) -> &[LeafKind] {
        &self.leaves
    }

    /// Leaf positions of the given kind, in leaf order.
    pub fn leaves_of(&self, kind: LeafKind) -> Vec<usize> {
        self.leaves.iter().enumerate().filter(|(_, k)| **k == kind).map(|(i, _)| i).collect()
    }

    /// True if the root is a literal constant (e.g. the derivative of a
    /// constant expression).
    pub fn is_constant(&self) -> Option<f64> {
        match self.nodes[self.root] {
            Op::Const(c) => Some(c),
            _ => None,
        }
    }

    /// Evaluates the tape and returns the root value.
    pub fn forward(&self, leaf_values: &[f64]) -> Result<f64, AutodiffError> {
        Ok(self.evaluate(leaf_values)?.root_value())
    }

    /// Evaluates every node.
    pub fn evaluate(&self, leaf_values: &[f64]) -> Result<Evaluation, AutodiffError> {
        if leaf_values.len() != self.leaves.len() {
            return Err(AutodiffError::LeafCount { expected: self.leaves.len(), got: leaf_values.len() });
        }
        let mut values = Vec::with_capacity(self.nodes.len());
        for (id, op) in self.nodes.iter().enumerate() {
            let v = apply(op, id, &values, leaf_values).map_err(|(op, value)| AutodiffError::Domain {
                node: id,
                op,
                value,
                row: None,
            })?;
            values.push(v);
        }
        Ok(Evaluation { values, root: self.root })
    }

    /// Evaluates the tape on `rows` points at once. `columns[i]` holds the
    /// values of leaf `i` for every row.
    pub fn evaluate_batch(&self, columns: &[&[f64]]) -> Result<BatchEvaluation, AutodiffError> {
        if columns.len() != self.leaves.len() {
            return Err(AutodiffError::LeafCount { expected: self.leaves.len(), got: columns.len() });
        }
        let rows = columns.first().map_or(1, |c| c.len());
        let n = self.nodes.len();
        let mut values = vec![0.0; n * rows];
        for (id, op) in self.nodes.iter().enumerate() {
            let (head, tail) = values.split_at_mut(id * rows);
            let out = &mut tail[..rows];
            let col = |j: NodeId| &head[j * rows..(j + 1) * rows];
            match *op {
                Op::Const(c) => out.fill(c),
                Op::Leaf(i) => out.copy_from_slice(&columns[i][..rows]),
                Op::Add(a, b) => zip2(out, col(a), col(b), |x, y| x + y),
                Op::Sub(a, b) => zip2(out, col(a), col(b), |x, y| x - y),
                Op::Mul(a, b) => zip2(out, col(a), col(b), |x, y| x * y),
                Op::Div(a, b) => {
                    let (ca, cb) = (col(a), col(b));
                    for r in 0..rows {
                        if cb[r] == 0.0 {
                            return Err(AutodiffError::Domain { node: id, op: "div", value: cb[r], row: Some(r) });
                        }
                        out[r] = ca[r] / cb[r];
                    }
                }
                _ => {
                    let ca = col(op.operands().0.unwrap());
                    for r in 0..rows {
                        out[r] = unary(op, ca[r]).map_err(|(name, value)| AutodiffError::Domain {
                            node: id,
                            op: name,
                            value,
                            row: Some(r),
                        })?;
                    }
                }
            }
        }
        Ok(BatchEvaluation { values, rows, root: self.root })
    }
}

fn zip2(out: &mut [f64], a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = f(*x, *y);
    }
}

fn unary(op: &Op, a: f64) -> Result<f64, (&'static str, f64)> {
    Ok(match *op {
        Op::Powi(_, n) => {
            if n < 0 && a == 0.0 {
                return Err(("pow", a));
            }
            a.powi(n)
        }
        Op::Neg(_) => -a,
        Op::Sin(_) => a.sin(),
        Op::Cos(_) => a.cos(),
        Op::Tanh(_) => a.tanh(),
        Op::Exp(_) => a.exp(),
        Op::Log(_) => {
            if a <= 0.0 {
                return Err(("log", a));
            }
            a.ln()
        }
        Op::Sqrt(_) => {
            if a < 0.0 {
                return Err(("sqrt", a));
            }
            a.sqrt()
        }
        Op::Abs(_) => a.abs(),
        Op::Sign(_) => sign(a),
        _ => unreachable!("binary or leaf op passed to unary"),
    })
}

fn sign(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else if a < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn apply(op: &Op, _id: NodeId, values: &[f64], leaves: &[f64]) -> Result<f64, (&'static str, f64)> {
    Ok(match *op {
        Op::Const(c) => c,
        Op::Leaf(i) => leaves[i],
        Op::Add(a, b) => values[a] + values[b],
        Op::Sub(a, b) => values[a] - values[b],
        Op::Mul(a, b) => values[a] * values[b],
        Op::Div(a, b) => {
            if values[b] == 0.0 {
                return Err(("div", values[b]));
            }
            values[a] / values[b]
        }
        _ => unary(op, values[op.operands().0.unwrap()])?,
    })
}

/// Node values of one tape evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<f64>,
    root: NodeId,
}

impl Evaluation {
    pub fn root_value(&self) -> f64 {
        self.values[self.root]
    }

    pub fn value(&self, node: NodeId) -> f64 {
        self.values[node]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Node values of a batched evaluation, stored node-major.
#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    values: Vec<f64>,
    rows: usize,
    root: NodeId,
}

impl BatchEvaluation {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn root_values(&self) -> &[f64] {
        self.node_values(self.root)
    }

    pub fn node_values(&self, node: NodeId) -> &[f64] {
        &self.values[node * self.rows..(node + 1) * self.rows]
    }
}

/// Returns a tape whose root is the partial derivative of `tape`'s root with
/// respect to leaf `wrt`. The result has the same leaves as the input, so it
/// can be evaluated with the same leaf values and derived again.
pub fn derive(tape: &Tape, wrt: usize) -> Tape {
    assert!(wrt < tape.leaves.len(), "derive: leaf {wrt} out of range");
    let mut g = GraphInner { nodes: tape.nodes.clone(), leaves: tape.leaves.clone() };
    let mut tangent: Vec<Option<NodeId>> = Vec::with_capacity(tape.nodes.len());
    for id in 0..tape.nodes.len() {
        let t = match tape.nodes[id] {
            Op::Const(_) | Op::Sign(_) => None,
            Op::Leaf(i) => (i == wrt).then(|| g.push(Op::Const(1.0))),
            Op::Add(a, b) => match (tangent[a], tangent[b]) {
                (Some(ta), Some(tb)) => Some(g.push(Op::Add(ta, tb))),
                (ta, tb) => ta.or(tb),
            },
            Op::Sub(a, b) => match (tangent[a], tangent[b]) {
                (Some(ta), Some(tb)) => Some(g.push(Op::Sub(ta, tb))),
                (Some(ta), None) => Some(ta),
                (None, Some(tb)) => Some(g.push(Op::Neg(tb))),
                (None, None) => None,
            },
            Op::Mul(a, b) => {
                let l = tangent[a].map(|ta| g.push(Op::Mul(ta, b)));
                let r = tangent[b].map(|tb| g.push(Op::Mul(a, tb)));
                g.add_opt(l, r)
            }
            Op::Div(a, b) => {
                // d(a/b) = (da - (a/b) db) / b
                let num = match (tangent[a], tangent[b]) {
                    (None, None) => None,
                    (ta, tb) => {
                        let q = tb.map(|tb| g.push(Op::Mul(id, tb)));
                        match (ta, q) {
                            (Some(ta), Some(q)) => Some(g.push(Op::Sub(ta, q))),
                            (Some(ta), None) => Some(ta),
                            (None, Some(q)) => Some(g.push(Op::Neg(q))),
                            (None, None) => None,
                        }
                    }
                };
                num.map(|n| g.push(Op::Div(n, b)))
            }
            Op::Powi(a, n) => tangent[a].and_then(|ta| {
                if n == 0 {
                    return None;
                }
                let coef = g.push(Op::Const(n as f64));
                let lowered = if n == 1 { None } else { Some(g.push(Op::Powi(a, n - 1))) };
                let scaled = match lowered {
                    Some(p) => g.push(Op::Mul(coef, p)),
                    None => coef,
                };
                Some(g.push(Op::Mul(scaled, ta)))
            }),
            Op::Neg(a) => tangent[a].map(|ta| g.push(Op::Neg(ta))),
            Op::Sin(a) => tangent[a].map(|ta| {
                let c = g.push(Op::Cos(a));
                g.push(Op::Mul(c, ta))
            }),
            Op::Cos(a) => tangent[a].map(|ta| {
                let s = g.push(Op::Sin(a));
                let m = g.push(Op::Mul(s, ta));
                g.push(Op::Neg(m))
            }),
            Op::Tanh(a) => tangent[a].map(|ta| {
                let one = g.push(Op::Const(1.0));
                let sq = g.push(Op::Mul(id, id));
                let d = g.push(Op::Sub(one, sq));
                g.push(Op::Mul(d, ta))
            }),
            Op::Exp(a) => tangent[a].map(|ta| g.push(Op::Mul(id, ta))),
            Op::Log(a) => tangent[a].map(|ta| g.push(Op::Div(ta, a))),
            Op::Sqrt(a) => tangent[a].map(|ta| {
                let half = g.push(Op::Const(0.5));
                let h = g.push(Op::Mul(half, ta));
                g.push(Op::Div(h, id))
            }),
            Op::Abs(a) => tangent[a].map(|ta| {
                let s = g.push(Op::Sign(a));
                g.push(Op::Mul(s, ta))
            }),
        };
        tangent.push(t);
    }
    let root = match tangent[tape.root] {
        Some(t) => t,
        None => g.push(Op::Const(0.0)),
    };
    g.finish(root)
}

/// Reverse-mode gradient of the root with respect to each leaf in `wrt`,
/// computed in one sweep over a single evaluation.
pub fn gradient(tape: &Tape, leaf_values: &[f64], wrt: &[usize]) -> Result<Vec<f64>, AutodiffError> {
    let eval = tape.evaluate(leaf_values)?;
    let adjoints = adjoints(tape, &eval.values);
    wrt.iter()
        .map(|&leaf| {
            if leaf >= tape.leaves.len() {
                return Err(AutodiffError::InvalidLeaf(leaf));
            }
            Ok(leaf_adjoint(tape, &adjoints, leaf))
        })
        .collect()
}

fn leaf_adjoint(tape: &Tape, adjoints: &[f64], leaf: usize) -> f64 {
    tape.nodes
        .iter()
        .enumerate()
        .filter(|(_, op)| matches!(op, Op::Leaf(i) if *i == leaf))
        .map(|(id, _)| adjoints[id])
        .sum()
}

fn adjoints(tape: &Tape, values: &[f64]) -> Vec<f64> {
    let mut adj = vec![0.0; tape.nodes.len()];
    adj[tape.root] = 1.0;
    for id in (0..=tape.root).rev() {
        let g = adj[id];
        if g == 0.0 {
            continue;
        }
        let v = values[id];
        match tape.nodes[id] {
            Op::Const(_) | Op::Leaf(_) | Op::Sign(_) => {}
            Op::Add(a, b) => {
                adj[a] += g;
                adj[b] += g;
            }
            Op::Sub(a, b) => {
                adj[a] += g;
                adj[b] -= g;
            }
            Op::Mul(a, b) => {
                adj[a] += g * values[b];
                adj[b] += g * values[a];
            }
            Op::Div(a, b) => {
                adj[a] += g / values[b];
                adj[b] -= g * v / values[b];
            }
            Op::Powi(a, n) => adj[a] += g * n as f64 * values[a].powi(n - 1),
            Op::Neg(a) => adj[a] -= g,
            Op::Sin(a) => adj[a] += g * values[a].cos(),
            Op::Cos(a) => adj[a] -= g * values[a].sin(),
            Op::Tanh(a) => adj[a] += g * (1.0 - v * v),
            Op::Exp(a) => adj[a] += g * v,
            Op::Log(a) => adj[a] += g / values[a],
            Op::Sqrt(a) => adj[a] += 0.5 * g / v,
            Op::Abs(a) => adj[a] += g * sign(values[a]),
        }
    }
    adj
}

/// Batched reverse sweep: for every row, the derivative of the root with
/// respect to each leaf in `wrt`. Returns one column per requested leaf.
pub fn gradient_batch(tape: &Tape, eval: &BatchEvaluation, wrt: &[usize]) -> Vec<Vec<f64>> {
    let rows = eval.rows;
    let n = tape.nodes.len();
    let mut adj = vec![0.0; n * rows];
    adj[tape.root * rows..(tape.root + 1) * rows].fill(1.0);
    let vals = &eval.values;
    let col = |j: NodeId| &vals[j * rows..(j + 1) * rows];
    for id in (0..=tape.root).rev() {
        let op = tape.nodes[id];
        let (a, b) = op.operands();
        let Some(a) = a else { continue };
        // Operands always precede the node, so the node's own adjoint column
        // sits in the upper half of the split.
        let (lower, upper) = adj.split_at_mut(id * rows);
        let g = &upper[..rows];
        let v = col(id);
        if let Some(b) = b {
            let (va, vb) = (col(a), col(b));
            for r in 0..rows {
                let gr = g[r];
                let (da, db) = match op {
                    Op::Add(..) => (gr, gr),
                    Op::Sub(..) => (gr, -gr),
                    Op::Mul(..) => (gr * vb[r], gr * va[r]),
                    Op::Div(..) => (gr / vb[r], -gr * v[r] / vb[r]),
                    _ => unreachable!(),
                };
                lower[a * rows + r] += da;
                lower[b * rows + r] += db;
            }
        } else {
            let va = col(a);
            for r in 0..rows {
                let gr = g[r];
                let da = match op {
                    Op::Powi(_, n) => gr * n as f64 * va[r].powi(n - 1),
                    Op::Neg(_) => -gr,
                    Op::Sin(_) => gr * va[r].cos(),
                    Op::Cos(_) => -gr * va[r].sin(),
                    Op::Tanh(_) => gr * (1.0 - v[r] * v[r]),
                    Op::Exp(_) => gr * v[r],
                    Op::Log(_) => gr / va[r],
                    Op::Sqrt(_) => 0.5 * gr / v[r],
                    Op::Abs(_) => gr * sign(va[r]),
                    Op::Sign(_) => 0.0,
                    _ => unreachable!(),
                };
                lower[a * rows + r] += da;
            }
        }
    }
    wrt.iter()
        .map(|&leaf| {
            let mut out = vec![0.0; rows];
            for (id, op) in tape.nodes.iter().enumerate() {
                if matches!(op, Op::Leaf(i) if *i == leaf) {
                    for (o, g) in out.iter_mut().zip(&adj[id * rows..(id + 1) * rows]) {
                        *o += g;
                    }
                }
            }
            out
        })
        .collect()
}

struct GraphInner {
    nodes: Vec<Op>,
    leaves: Vec<LeafKind>,
}

impl GraphInner {
    /// Appends a node, folding constants and trivial identities.
    fn push(&mut self, op: Op) -> NodeId {
        if let Some(id) = self.simplify(&op) {
            return id;
        }
        self.nodes.push(op);
        self.nodes.len() - 1
    }

    fn constant_of(&self, id: NodeId) -> Option<f64> {
        match self.nodes[id] {
            Op::Const(c) => Some(c),
            _ => None,
        }
    }

    fn simplify(&mut self, op: &Op) -> Option<NodeId> {
        let (ca, cb) = match op.operands() {
            (Some(a), Some(b)) => (self.constant_of(a), self.constant_of(b)),
            (Some(a), None) => (self.constant_of(a), None),
            _ => (None, None),
        };
        match *op {
            Op::Add(a, b) => match (ca, cb) {
                (Some(x), Some(y)) => Some(self.lit(x + y)),
                (Some(0.0), _) => Some(b),
                (_, Some(0.0)) => Some(a),
                _ => None,
            },
            Op::Sub(a, _) => match (ca, cb) {
                (Some(x), Some(y)) => Some(self.lit(x - y)),
                (_, Some(0.0)) => Some(a),
                _ => None,
            },
            Op::Mul(a, b) => match (ca, cb) {
                (Some(x), Some(y)) => Some(self.lit(x * y)),
                (Some(x), _) | (_, Some(x)) if x == 0.0 => Some(self.lit(0.0)),
                (Some(1.0), _) => Some(b),
                (_, Some(1.0)) => Some(a),
                _ => None,
            },
            Op::Div(a, _) => match (ca, cb) {
                (Some(x), Some(y)) if y != 0.0 => Some(self.lit(x / y)),
                (_, Some(1.0)) => Some(a),
                _ => None,
            },
            Op::Neg(a) => match self.nodes[a] {
                Op::Const(x) => Some(self.lit(-x)),
                Op::Neg(inner) => Some(inner),
                _ => None,
            },
            Op::Powi(a, n) => match (ca, n) {
                (_, 1) => Some(a),
                (_, 0) => Some(self.lit(1.0)),
                (Some(x), n) if !(x == 0.0 && n < 0) => Some(self.lit(x.powi(n))),
                _ => None,
            },
            Op::Const(_) | Op::Leaf(_) => None,
            _ => {
                let x = ca?;
                unary(op, x).ok().map(|v| self.lit(v))
            }
        }
    }

    fn lit(&mut self, v: f64) -> NodeId {
        self.nodes.push(Op::Const(v));
        self.nodes.len() - 1
    }

    fn add_opt(&mut self, a: Option<NodeId>, b: Option<NodeId>) -> Option<NodeId> {
        match (a, b) {
            (Some(a), Some(b)) => Some(self.push(Op::Add(a, b))),
            (a, b) => a.or(b),
        }
    }

    /// Copies the nodes reachable from `root` into a compact tape.
    fn finish(&self, root: NodeId) -> Tape {
        let mut live = vec![false; self.nodes.len()];
        live[root] = true;
        for id in (0..=root).rev() {
            if !live[id] {
                continue;
            }
            let (a, b) = self.nodes[id].operands();
            if let Some(a) = a {
                live[a] = true;
            }
            if let Some(b) = b {
                live[b] = true;
            }
        }
        let mut map = vec![usize::MAX; self.nodes.len()];
        let mut nodes = Vec::new();
        for id in 0..=root {
            if live[id] {
                map[id] = nodes.len();
                nodes.push(self.nodes[id].remap(&map));
            }
        }
        Tape { nodes, leaves: self.leaves.clone(), root: map[root] }
    }
}

/// Mutable builder for tapes. Create leaves with [`Graph::input`] and
/// [`Graph::parameter`], combine them with [`Var`] arithmetic, then call
/// [`Graph::finish`] once per root of interest.
pub struct Graph {
    inner: RefCell<GraphInner>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { inner: RefCell::new(GraphInner { nodes: Vec::new(), leaves: Vec::new() }) }
    }

    fn leaf(&self, kind: LeafKind) -> Var<'_> {
        let mut g = self.inner.borrow_mut();
        let index = g.leaves.len();
        g.leaves.push(kind);
        g.nodes.push(Op::Leaf(index));
        let id = g.nodes.len() - 1;
        Var { graph: self, id }
    }

    pub fn input(&self) -> Var<'_> {
        self.leaf(LeafKind::Input)
    }

    pub fn parameter(&self) -> Var<'_> {
        self.leaf(LeafKind::Parameter)
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        let id = self.inner.borrow_mut().lit(value);
        Var { graph: self, id }
    }

    pub fn leaf_count(&self) -> usize {
        self.inner.borrow().leaves.len()
    }

    fn push(&self, op: Op) -> Var<'_> {
        let id = self.inner.borrow_mut().push(op);
        Var { graph: self, id }
    }

    /// Freezes the graph reachable from `root` into a tape. All leaves
    /// created so far are kept, even ones the root does not depend on.
    pub fn finish(&self, root: Var<'_>) -> Tape {
        assert!(std::ptr::eq(root.graph, self), "root belongs to another graph");
        self.inner.borrow().finish(root.id)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    fn unary(self, op: fn(NodeId) -> Op) -> Var<'g> {
        self.graph.push(op(self.id))
    }

    pub fn sin(self) -> Var<'g> {
        self.unary(Op::Sin)
    }
    pub fn cos(self) -> Var<'g> {
        self.unary(Op::Cos)
    }
    pub fn tan(self) -> Var<'g> {
        self.sin() / self.cos()
    }
    pub fn tanh(self) -> Var<'g> {
        self.unary(Op::Tanh)
    }
    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp)
    }
    pub fn ln(self) -> Var<'g> {
        self.unary(Op::Log)
    }
    pub fn sqrt(self) -> Var<'g> {
        self.unary(Op::Sqrt)
    }
    pub fn abs(self) -> Var<'g> {
        self.unary(Op::Abs)
    }

    pub fn powi(self, n: i32) -> Var<'g> {
        self.graph.push(Op::Powi(self.id, n))
    }

    /// Real power. Integral exponents use [`Var::powi`]; anything else is
    /// rewritten as `exp(p * ln(self))` and so needs a positive base.
    pub fn powf(self, p: f64) -> Var<'g> {
        if p.fract() == 0.0 && p.abs() <= i32::MAX as f64 {
            self.powi(p as i32)
        } else {
            (self.ln() * p).exp()
        }
    }

    /// Power with a variable exponent, `exp(p * ln(self))`.
    pub fn pow(self, p: Var<'g>) -> Var<'g> {
        (p * self.ln()).exp()
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $op:ident) => {
        impl<'g> $trait for Var<'g> {
            type Output = Var<'g>;
            fn $method(self, rhs: Var<'g>) -> Var<'g> {
                debug_assert!(std::ptr::eq(self.graph, rhs.graph));
                self.graph.push(Op::$op(self.id, rhs.id))
            }
        }
        impl<'g> $trait<f64> for Var<'g> {
            type Output = Var<'g>;
            fn $method(self, rhs: f64) -> Var<'g> {
                let c = self.graph.constant(rhs);
                self.graph.push(Op::$op(self.id, c.id))
            }
        }
        impl<'g> $trait<Var<'g>> for f64 {
            type Output = Var<'g>;
            fn $method(self, rhs: Var<'g>) -> Var<'g> {
                let c = rhs.graph.constant(self);
                rhs.graph.push(Op::$op(c.id, rhs.id))
            }
        }
    };
}

binop!(Add, add, Add);
binop!(Sub, sub, Sub);
binop!(Mul, mul, Mul);
binop!(Div, div, Div);

impl<'g> Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.graph.push(Op::Neg(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(f: impl for<'g> Fn(Var<'g>) -> Var<'g>) -> Tape {
        let g = Graph::new();
        let x = g.input();
        let y = f(x);
        g.finish(y)
    }

    #[test]
    fn sin_at_zero() {
        let t = single(|x| x.sin());
        assert_eq!(t.forward(&[0.0]).unwrap(), 0.0);
        assert_eq!(derive(&t, 0).forward(&[0.0]).unwrap(), 1.0);
    }

    #[test]
    fn product_plus_leaf() {
        let g = Graph::new();
        let x = g.input();
        let y = g.input();
        let t = g.finish(x * y + y);
        assert_eq!(t.forward(&[2.0, 3.0]).unwrap(), 9.0);
    }

    #[test]
    fn tanh_matches_reference() {
        let g = Graph::new();
        let x = g.constant(0.5);
        let t = g.finish(x.tanh());
        // 30-digit reference: 0.462117157260009758502318483644
        let v = t.forward(&[]).unwrap();
        assert!((v - 0.462_117_157_260_009_76).abs() <= 1e-16, "{v}");
    }

    #[test]
    fn second_derivative_of_cube() {
        let t = single(|x| x.powi(3));
        let d2 = derive(&derive(&t, 0), 0);
        assert_eq!(d2.forward(&[2.0]).unwrap(), 12.0);
        let d3 = derive(&d2, 0);
        assert_eq!(d3.forward(&[-7.0]).unwrap(), 6.0);
        let d4 = derive(&d3, 0);
        assert_eq!(d4.is_constant(), Some(0.0));
    }

    #[test]
    fn derivative_of_constant_is_zero_literal() {
        let g = Graph::new();
        let _x = g.input();
        let c = g.constant(3.5);
        let t = g.finish(c.sin() * 2.0);
        let d = derive(&t, 0);
        assert_eq!(d.forward(&[1.0]).unwrap(), 0.0);
        assert_eq!(d.is_constant(), Some(0.0));
    }

    #[test]
    fn gradient_of_sum_and_product() {
        let g = Graph::new();
        let x = g.input();
        let y = g.input();
        let sum = g.finish(x + y);
        assert_eq!(gradient(&sum, &[0.3, -4.0], &[0, 1]).unwrap(), vec![1.0, 1.0]);
        let prod = g.finish(x * y);
        assert_eq!(gradient(&prod, &[2.0, 3.0], &[0, 1]).unwrap(), vec![3.0, 2.0]);
    }

    #[test]
    fn domain_errors_name_the_node() {
        let t = single(|x| x.ln());
        match t.forward(&[-1.0]) {
            Err(AutodiffError::Domain { op: "log", node, .. }) => {
                assert!(matches!(t.nodes()[node], Op::Log(_)))
            }
            other => panic!("unexpected {other:?}"),
        }
        let g = Graph::new();
        let x = g.input();
        let y = g.input();
        let t = g.finish(x / y);
        assert!(matches!(t.forward(&[1.0, 0.0]), Err(AutodiffError::Domain { op: "div", .. })));
    }

    #[test]
    fn leaf_count_is_checked() {
        let t = single(|x| x + 1.0);
        assert_eq!(t.forward(&[1.0, 2.0]), Err(AutodiffError::LeafCount { expected: 1, got: 2 }));
    }

    #[test]
    fn batch_matches_pointwise() {
        let g = Graph::new();
        let x = g.input();
        let y = g.input();
        let t = g.finish((x * y).sin() + (x / y).exp() - y.powi(2).tanh());
        let xs = [0.1, 0.7, -1.3, 2.0];
        let ys = [1.5, -0.4, 0.9, 3.0];
        let batch = t.evaluate_batch(&[&xs, &ys]).unwrap();
        let grads = gradient_batch(&t, &batch, &[0, 1]);
        for r in 0..4 {
            let v = t.forward(&[xs[r], ys[r]]).unwrap();
            assert_eq!(batch.root_values()[r], v);
            let gp = gradient(&t, &[xs[r], ys[r]], &[0, 1]).unwrap();
            assert!((grads[0][r] - gp[0]).abs() < 1e-14);
            assert!((grads[1][r] - gp[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn batch_reports_failing_row() {
        let t = single(|x| x.sqrt());
        let err = t.evaluate_batch(&[&[1.0, 4.0, -2.0]]).unwrap_err();
        assert!(matches!(err, AutodiffError::Domain { row: Some(2), op: "sqrt", .. }));
    }

    #[test]
    fn real_powers_go_through_exp_log() {
        let t = single(|x| x.powf(0.5));
        assert!((t.forward(&[4.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!((derive(&t, 0).forward(&[4.0]).unwrap() - 0.25).abs() < 1e-15);
        assert!(t.forward(&[-4.0]).is_err());
    }

    #[test]
    fn derive_wrt_parameter_leaf() {
        let g = Graph::new();
        let x = g.input();
        let w = g.parameter();
        let t = g.finish((w * x).tanh());
        assert_eq!(t.leaves_of(LeafKind::Parameter), vec![1]);
        let dw = derive(&t, 1);
        let v = dw.forward(&[0.5, 2.0]).unwrap();
        let exact = 0.5 * (1.0 - (1.0f64).tanh().powi(2));
        assert!((v - exact).abs() < 1e-15);
    }
}

//! Tape-based reverse-mode autodiff over row-major matrices.
//!
//! Every node is a `rows x cols` matrix; scalars are `1 x 1`. Operations are
//! recorded in creation order, so the tape is a topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Broadcasting is limited to what the models need: a `1 x c` row added to
//! or multiplied into every row ([`Graph::add_row`], [`Graph::mul_row`]) and
//! an `r x 1` column scaling every row ([`Graph::mul_col`]).

use std::collections::HashMap;

use crate::error::{DiffError, Result};
use crate::store::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    LogSigmoid(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients of a scalar output with respect to every node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not reach the output.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn check_same(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(DiffError::Shape {
            op,
            detail: format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1),
        });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "scalar() on a {}x{} node", n.rows, n.cols);
        n.value[0]
    }

    /// Constant input. Gradients are still computed for it (see [`Graph::backward_all`]).
    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(DiffError::Shape {
                op: "input",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, value.len()),
            });
        }
        Ok(self.push(rows, cols, value, Op::Leaf))
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.push(1, 1, vec![v], Op::Leaf)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (r, c, val) = (n.rows, n.cols, n.value.clone());
        self.push(r, c, val, Op::Leaf)
    }

    /// Binds a trainable parameter; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let t = store.require(name)?;
        let (r, c) = t.matrix_dims()?;
        let v = self.push(r, c, t.values().to_vec(), Op::Leaf);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds a parameter as a constant (no gradient is written back for it).
    pub fn frozen(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store.require(name)?;
        let (r, c) = t.matrix_dims()?;
        Ok(self.push(r, c, t.values().to_vec(), Op::Leaf))
    }

    pub fn from_tensor(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.matrix_dims()?;
        Ok(self.push(r, c, t.values().to_vec(), Op::Leaf))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if ac != br {
            return Err(DiffError::Shape {
                op: "matmul",
                detail: format!("{ar}x{ac} * {br}x{bc}"),
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; ar * bc];
        for i in 0..ar {
            let row = &mut out[i * bc..(i + 1) * bc];
            for k in 0..ac {
                let aik = av[i * ac + k];
                let brow = &bv[k * bc..(k + 1) * bc];
                for (o, b) in row.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        Ok(self.push(ar, bc, out, Op::MatMul(a, b)))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        check_same(name, self.dims(a), self.dims(b))?;
        let (r, c) = self.dims(a);
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(self.push(r, c, out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
            .expect("mul: shape mismatch")
    }

    pub fn try_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; on ties the gradient goes to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    fn row_broadcast(&mut self, name: &'static str, a: Var, row: Var) -> Result<(usize, usize)> {
        let (r, c) = self.dims(a);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != c {
            return Err(DiffError::Shape {
                op: name,
                detail: format!("{r}x{c} with row {rr}x{rc}"),
            });
        }
        Ok((r, c))
    }

    /// `a + row` with `row` (1 x c) added to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast("add_row", a, row)?;
        let bv = &self.nodes[row.0].value;
        let out = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % c])
            .collect();
        Ok(self.push(r, c, out, Op::AddRow(a, row)))
    }

    /// `a * row` with `row` (1 x c) multiplied into every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast("mul_row", a, row)?;
        let bv = &self.nodes[row.0].value;
        let out = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[i % c])
            .collect();
        Ok(self.push(r, c, out, Op::MulRow(a, row)))
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is r x 1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(col) != (r, 1) {
            let (cr, cc) = self.dims(col);
            return Err(DiffError::Shape {
                op: "mul_col",
                detail: format!("{r}x{c} with column {cr}x{cc}"),
            });
        }
        let cv = &self.nodes[col.0].value;
        let out = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x * cv[i / c])
            .collect();
        Ok(self.push(r, c, out, Op::MulCol(a, col)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        let out = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        self.push(r, c, out, op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x / (1.0 + (-x).exp()), Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(1, 1, vec![s], Op::Mean(a))
    }

    /// Per-row sum: r x c -> r x 1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = &self.nodes[a.0].value;
        let out = (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect();
        self.push(r, 1, out, Op::SumCols(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(&v[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        self.push(r, c, out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        self.push(r, c, out, Op::LogSoftmaxRows(a))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(p) => self.dims(*p).0,
            None => {
                return Err(DiffError::Shape {
                    op: "concat_cols",
                    detail: "no inputs".into(),
                })
            }
        };
        let mut total = 0;
        for p in parts {
            let (r, c) = self.dims(*p);
            if r != rows {
                return Err(DiffError::Shape {
                    op: "concat_cols",
                    detail: format!("row count {r} vs {rows}"),
                });
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                let n = &self.nodes[p.0];
                out.extend_from_slice(&n.value[i * n.cols..(i + 1) * n.cols]);
            }
        }
        Ok(self.push(rows, total, out, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > c {
            return Err(DiffError::Shape {
                op: "slice_cols",
                detail: format!("{start}+{len} > {c}"),
            });
        }
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        Ok(self.push(r, len, out, Op::SliceCols(a, start)))
    }

    /// Row lookup (embedding table): output row `i` is `table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table);
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(DiffError::Shape {
                op: "gather_rows",
                detail: format!("index {bad} out of {r} rows"),
            });
        }
        let v = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        Ok(self.push(idx.len(), c, out, Op::GatherRows(table, idx.to_vec())))
    }

    /// Picks column `idx[i]` from row `i`: r x c -> r x 1.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(DiffError::Shape {
                op: "pick_cols",
                detail: format!("{} indices for {r}x{c}", idx.len()),
            });
        }
        let v = &self.nodes[a.0].value;
        let out = idx.iter().enumerate().map(|(i, &j)| v[i * c + j]).collect();
        Ok(self.push(r, 1, out, Op::PickCols(a, idx.to_vec())))
    }

    /// Reverse sweep from a scalar output; returns gradients for every node.
    pub fn backward_all(&self, out: Var) -> Result<Gradients> {
        let (r, c) = self.dims(out);
        if r * c != 1 {
            return Err(DiffError::NonScalarOutput { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Reverse sweep from a scalar output, writing `d out / d param` into the
    /// store for every bound parameter. Store parameters that were not bound
    /// on this graph receive zero gradients.
    pub fn backward(&self, out: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward_all(out)?;
        for (name, t) in store.iter_mut() {
            let n = t.len();
            let g = match self.params.get(name) {
                Some(v) => grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]),
                None => vec![0.0; n],
            };
            t.set_grad(g)?;
        }
        Ok(grads)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = &node.value;
        let (rows, cols) = (node.rows, node.cols);
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(usize) -> f64| {
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            for (i, s) in slot.iter_mut().enumerate() {
                *s += f(i);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ar, ac) = self.dims(*a);
                let bc = self.dims(*b).1;
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let mut da = vec![0.0; ar * ac];
                for i in 0..ar {
                    let grow = &g[i * bc..(i + 1) * bc];
                    for k in 0..ac {
                        let brow = &bv[k * bc..(k + 1) * bc];
                        da[i * ac + k] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                let mut db = vec![0.0; ac * bc];
                for i in 0..ar {
                    let grow = &g[i * bc..(i + 1) * bc];
                    for k in 0..ac {
                        let aik = av[i * ac + k];
                        let drow = &mut db[k * bc..(k + 1) * bc];
                        for (d, x) in drow.iter_mut().zip(grow) {
                            *d += aik * x;
                        }
                    }
                }
                acc(grads, *a, &|i| da[i]);
                acc(grads, *b, &|i| db[i]);
            }
            Op::Add(a, b) => {
                acc(grads, *a, &|i| g[i]);
                acc(grads, *b, &|i| g[i]);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &|i| g[i]);
                acc(grads, *b, &|i| -g[i]);
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(grads, *a, &|i| g[i] * bv[i]);
                acc(grads, *b, &|i| g[i] * av[i]);
            }
            Op::Div(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(grads, *a, &|i| g[i] / bv[i]);
                acc(grads, *b, &|i| -g[i] * av[i] / (bv[i] * bv[i]));
            }
            Op::Minimum(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(grads, *a, &|i| if av[i] <= bv[i] { g[i] } else { 0.0 });
                acc(grads, *b, &|i| if av[i] <= bv[i] { 0.0 } else { g[i] });
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, &|i| g[i]);
                let mut dr = vec![0.0; cols];
                for (i, x) in g.iter().enumerate() {
                    dr[i % cols] += x;
                }
                acc(grads, *row, &|j| dr[j]);
            }
            Op::MulRow(a, row) => {
                let av = &self.nodes[a.0].value;
                let rv = &self.nodes[row.0].value;
                acc(grads, *a, &|i| g[i] * rv[i % cols]);
                let mut dr = vec![0.0; cols];
                for (i, x) in g.iter().enumerate() {
                    dr[i % cols] += x * av[i];
                }
                acc(grads, *row, &|j| dr[j]);
            }
            Op::MulCol(a, col) => {
                let av = &self.nodes[a.0].value;
                let cv = &self.nodes[col.0].value;
                acc(grads, *a, &|i| g[i] * cv[i / cols]);
                let mut dc = vec![0.0; rows];
                for (i, x) in g.iter().enumerate() {
                    dc[i / cols] += x * av[i];
                }
                acc(grads, *col, &|i| dc[i]);
            }
            Op::Scale(a, s) => acc(grads, *a, &|i| g[i] * s),
            Op::AddScalar(a) => acc(grads, *a, &|i| g[i]),
            Op::Neg(a) => acc(grads, *a, &|i| -g[i]),
            Op::Silu(a) => {
                let av = &self.nodes[a.0].value;
                acc(grads, *a, &|i| {
                    let s = 1.0 / (1.0 + (-av[i]).exp());
                    g[i] * (s + av[i] * s * (1.0 - s))
                });
            }
            Op::Tanh(a) => acc(grads, *a, &|i| g[i] * (1.0 - val[i] * val[i])),
            Op::Exp(a) => acc(grads, *a, &|i| g[i] * val[i]),
            Op::Ln(a) => {
                let av = &self.nodes[a.0].value;
                acc(grads, *a, &|i| g[i] / av[i]);
            }
            Op::Sqrt(a) => acc(grads, *a, &|i| g[i] * 0.5 / val[i]),
            Op::Square(a) => {
                let av = &self.nodes[a.0].value;
                acc(grads, *a, &|i| g[i] * 2.0 * av[i]);
            }
            Op::LogSigmoid(a) => {
                let av = &self.nodes[a.0].value;
                // d/dx ln sigmoid(x) = sigmoid(-x)
                acc(grads, *a, &|i| g[i] / (1.0 + av[i].exp()));
            }
            Op::Clamp(a, lo, hi) => {
                let av = &self.nodes[a.0].value;
                acc(grads, *a, &|i| if av[i] >= *lo && av[i] <= *hi { g[i] } else { 0.0 });
            }
            Op::Sum(a) => acc(grads, *a, &|_| g[0]),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                acc(grads, *a, &|_| g[0] / n);
            }
            Op::SumCols(a) => {
                let c = self.dims(*a).1;
                acc(grads, *a, &|i| g[i / c]);
            }
            Op::SoftmaxRows(a) => {
                let mut da = vec![0.0; rows * cols];
                for i in 0..rows {
                    let p = &val[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dot: f64 = p.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..cols {
                        da[i * cols + j] = p[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *a, &|i| da[i]);
            }
            Op::LogSoftmaxRows(a) => {
                let mut da = vec![0.0; rows * cols];
                for i in 0..rows {
                    let lp = &val[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let gs: f64 = gr.iter().sum();
                    for j in 0..cols {
                        da[i * cols + j] = gr[j] - lp[j].exp() * gs;
                    }
                }
                acc(grads, *a, &|i| da[i]);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pc = self.dims(*p).1;
                    acc(grads, *p, &|i| {
                        let (r, j) = (i / pc, i % pc);
                        g[r * cols + offset + j]
                    });
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.dims(*a).1;
                let mut da = vec![0.0; rows * ac];
                for i in 0..rows {
                    for j in 0..cols {
                        da[i * ac + start + j] = g[i * cols + j];
                    }
                }
                acc(grads, *a, &|i| da[i]);
            }
            Op::GatherRows(table, idx) => {
                let (tr, tc) = self.dims(*table);
                let mut dt = vec![0.0; tr * tc];
                for (i, &row) in idx.iter().enumerate() {
                    for j in 0..tc {
                        dt[row * tc + j] += g[i * tc + j];
                    }
                }
                acc(grads, *table, &|i| dt[i]);
            }
            Op::PickCols(a, idx) => {
                let ac = self.dims(*a).1;
                let mut da = vec![0.0; rows * ac];
                for (i, &j) in idx.iter().enumerate() {
                    da[i * ac + j] = g[i];
                }
                acc(grads, *a, &|i| da[i]);
            }
        }
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

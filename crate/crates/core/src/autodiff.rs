//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every intermediate value; [`Tape::backward`] walks it
//! in reverse and returns one gradient slot per node. Only the handful of
//! ops the toy denoisers need are supported.

use ndarray::{concatenate, s, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a @ b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a` (n x d) plus a single row `b` (1 x d) broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    Silu(Var),
    ConcatRows(Var, Var),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    /// Rows of `table` at the listed indices.
    Gather(Var, Vec<usize>),
    /// Mean of the entries as a 1 x 1 value.
    Mean(Var),
    /// Mean squared difference against a constant target, 1 x 1.
    Mse(Var, Array2<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - top).exp());
            let sum = row.sum();
            row /= sum;
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x / (1.0 + (-x).exp()));
        self.push(value, Op::Silu(a))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let value = concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("column counts agree");
        self.push(value, Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("row counts agree");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start, len))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start, len))
    }

    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Array2::zeros((rows.len(), t.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).assign(&t.row(r));
        }
        self.push(value, Op::Gather(table, rows.to_vec()))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push(value, Op::Mean(a))
    }

    pub fn mse(&mut self, pred: Var, target: Array2<f64>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim(), "mse shapes");
        let value = Array2::from_elem(
            (1, 1),
            (p - &target).mapv(|d| d * d).sum() / p.len() as f64,
        );
        self.push(value, Op::Mse(pred, target))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Vec<Option<Array2<f64>>> {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones((1, 1)));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot = drow.sum();
                        drow.scaled_add(-dot, &yrow);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    d.zip_mut_with(x, |gi, &xi| {
                        let s = 1.0 / (1.0 + (-xi).exp());
                        *gi *= s * (1.0 + xi * (1.0 - s));
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatRows(a, b) => {
                    let na = self.value(*a).nrows();
                    accumulate(&mut grads, *a, g.slice(s![..na, ..]).to_owned());
                    accumulate(&mut grads, *b, g.slice(s![na.., ..]).to_owned());
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![*start..*start + *len, ..]).assign(&g);
                    accumulate(&mut grads, *a, d);
                }
                Op::SliceCols(a, start, len) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    accumulate(&mut grads, *a, d);
                }
                Op::Gather(table, rows) => {
                    let mut d = Array2::zeros(self.value(*table).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(r);
                        dst += &g.row(i);
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::Mean(a) => {
                    let v = self.value(*a);
                    let d = Array2::from_elem(v.dim(), g[[0, 0]] / v.len() as f64);
                    accumulate(&mut grads, *a, d);
                }
                Op::Mse(pred, target) => {
                    let p = self.value(*pred);
                    let k = 2.0 * g[[0, 0]] / p.len() as f64;
                    accumulate(&mut grads, *pred, (p - target) * k);
                }
            }
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

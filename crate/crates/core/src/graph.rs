//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D array; vectors are `1 × n` rows. Nodes are appended
//! in evaluation order, so `backward` is a single reverse sweep.

use ndarray::{concatenate, s, Array2, Axis};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `a + row` with a `1 × n` row broadcast over every row of `a`.
    AddRow(Var, Var),
    /// `a + col` with an `m × 1` column broadcast over every column of `a`.
    AddCol(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    Transpose(Var),
    Reshape(Var),
    MeanRows(Var),
    SumAll(Var),
    /// log-sum-exp over the selected flat (row-major) positions.
    LogSumExp(Var, Vec<usize>),
    /// Numerically stable `-[y log σ(x) + (1-y) log(1-σ(x))]`, summed.
    BceWithLogits(Var, Vec<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn row(v: &Array2<f64>) -> bool {
    v.nrows() == 1
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        assert!(row(self.value(r)), "add_row expects a 1 x n row");
        let v = self.value(a) + self.value(r);
        self.push(v, Op::AddRow(a, r))
    }

    pub fn add_col(&mut self, a: Var, c: Var) -> Var {
        assert_eq!(self.value(c).ncols(), 1, "add_col expects an m x 1 column");
        let v = self.value(a) + self.value(c);
        self.push(v, Op::AddCol(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows col mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let src = self.value(a);
        let flat: Vec<f64> = src.iter().copied().collect();
        let v = Array2::from_shape_vec(shape, flat).expect("reshape size mismatch");
        self.push(v, Op::Reshape(a))
    }

    /// Column-wise mean, giving a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn logsumexp(&mut self, a: Var, positions: Vec<usize>) -> Var {
        let val = self.value(a);
        let flat: Vec<f64> = positions
            .iter()
            .map(|&p| val[[p / val.ncols(), p % val.ncols()]])
            .collect();
        let v = Array2::from_elem((1, 1), logsumexp(&flat));
        self.push(v, Op::LogSumExp(a, positions))
    }

    pub fn logsumexp_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.logsumexp(a, (0..n).collect())
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>) -> Var {
        let val = self.value(logits);
        assert_eq!(val.len(), targets.len());
        let loss: f64 = val
            .iter()
            .zip(&targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::BceWithLogits(logits, targets),
        )
    }

    /// Gradients of scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, &g * *k),
                Op::AddRow(a, r) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *r, gr);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddCol(a, c) => {
                    let gc = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *c, gc);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Tanh(a) => {
                    let ga = &g * &node.value.mapv(|y| 1.0 - y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = &g * &node.value.mapv(|y| y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dot);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let gp = g.slice(s![.., off..off + w]).to_owned();
                        accumulate(&mut grads, *p, gp);
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        let gp = g.slice(s![off..off + h, ..]).to_owned();
                        accumulate(&mut grads, *p, gp);
                        off += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start, end) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*end, ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Reshape(a) => {
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let ga = Array2::from_shape_vec(self.value(*a).dim(), flat).unwrap();
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let (m, n) = self.value(*a).dim();
                    let ga = g.broadcast((m, n)).unwrap().to_owned() / m as f64;
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSumExp(a, positions) => {
                    let val = self.value(*a);
                    let cols = val.ncols();
                    let lse = node.value[[0, 0]];
                    let mut ga = Array2::zeros(val.dim());
                    for &p in positions {
                        let (i, j) = (p / cols, p % cols);
                        ga[[i, j]] += g[[0, 0]] * (val[[i, j]] - lse).exp();
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::BceWithLogits(a, targets) => {
                    let val = self.value(*a);
                    let flat: Vec<f64> = val
                        .iter()
                        .zip(targets)
                        .map(|(&x, &y)| g[[0, 0]] * (sigmoid(x) - y))
                        .collect();
                    let ga = Array2::from_shape_vec(val.dim(), flat).unwrap();
                    accumulate(&mut grads, *a, ga);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
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

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut r in out.rows_mut() {
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        r.mapv_inplace(|x| (x - max).exp());
        let sum = r.sum();
        r /= sum;
    }
    out
}

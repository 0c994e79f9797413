//! Minimal reverse-mode autodiff over 2-D f64 arrays.
//!
//! Every forward pass builds a fresh [`Tape`]; variables are indices into the
//! tape's node list, so the op order is already topological and the backward
//! pass is a single reverse sweep. All values are `Array2<f64>`; scalars are
//! 1x1 matrices.

use ndarray::{concatenate, s, Array2, Axis};
use std::collections::HashMap;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

pub fn scalar(v: f64) -> Mat {
    Mat::from_elem((1, 1), v)
}

enum Op {
    /// Constant or named parameter leaf.
    Leaf { param: Option<String> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// x (T x d) + row (1 x d), broadcast over rows.
    AddRow(Var, Var),
    /// x (T x d) * row (1 x d).
    MulRow(Var, Var),
    /// x (T x d) * col (T x 1).
    MulCol(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Silu(Var),
    Tanh(Var),
    /// Row-wise softmax.
    Softmax(Var),
    /// Row-wise log-softmax.
    LogSoftmax(Var),
    /// Row-wise layer norm without affine terms.
    LayerNorm(Var, f64),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SumAll(Var),
    MeanAll(Var),
    /// Mean over rows -> 1 x d.
    MeanRows(Var),
    /// Row gather (embedding lookup / position select).
    GatherRows(Var, Vec<usize>),
    /// mean of -x[r,c] over the index list -> 1 x 1 (cross-entropy reducer).
    NegGatherMean(Var, Vec<(usize, usize)>),
    /// Rotary position transform along dim pairs; one position per row.
    Rope(Var, Vec<usize>, f64),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Grads {
    pub by_name: HashMap<String, Mat>,
}

impl Grads {
    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.by_name.get(name)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn param(&mut self, name: &str, value: Mat) -> Var {
        self.push(
            value,
            Op::Leaf {
                param: Some(name.to_string()),
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let v = &self.nodes[x.0].value + &self.nodes[row.0].value;
        self.push(v, Op::AddRow(x, row))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let v = &self.nodes[x.0].value * &self.nodes[row.0].value;
        self.push(v, Op::MulRow(x, row))
    }

    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        debug_assert_eq!(self.nodes[col.0].value.ncols(), 1);
        let v = &self.nodes[x.0].value * &self.nodes[col.0].value;
        self.push(v, Op::MulCol(x, col))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(&self.nodes[a.0].value);
        self.push(v, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(&self.nodes[a.0].value);
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let v = layer_norm_rows(&self.nodes[a.0].value, eps);
        self.push(v, Op::LayerNorm(a, eps))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0].value.slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0].value.slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = scalar(self.nodes[a.0].value.sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let v = scalar(self.nodes[a.0].value.sum() / n);
        self.push(v, Op::MeanAll(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let v = x
            .mean_axis(Axis(0))
            .expect("mean_rows on empty matrix")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = Mat::zeros((ids.len(), x.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).assign(&x.row(id));
        }
        self.push(v, Op::GatherRows(a, ids.to_vec()))
    }

    pub fn neg_gather_mean(&mut self, a: Var, idx: &[(usize, usize)]) -> Var {
        let x = &self.nodes[a.0].value;
        let n = idx.len().max(1) as f64;
        let total: f64 = idx.iter().map(|&(r, c)| -x[(r, c)]).sum();
        self.push(scalar(total / n), Op::NegGatherMean(a, idx.to_vec()))
    }

    pub fn rope(&mut self, a: Var, positions: &[usize], theta: f64) -> Var {
        let v = rope_apply(&self.nodes[a.0].value, positions, theta, false);
        self.push(v, Op::Rope(a, positions.to_vec(), theta))
    }

    /// Reverse sweep from `loss` (1x1). Returns gradients keyed by param name.
    pub fn backward(&mut self, loss: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones(self.nodes[loss.0].value.raw_dim()));
        let mut out = Grads::default();

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf { param } => {
                    if let Some(name) = param {
                        out.by_name
                            .entry(name.clone())
                            .and_modify(|acc| *acc += &g)
                            .or_insert(g);
                    }
                }
                Op::Add(a, b) => {
                    accum(&mut grads, a.0, &g);
                    accum(&mut grads, b.0, &g);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, a.0, &g);
                    let gneg = -&g;
                    accum(&mut grads, b.0, &gneg);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    accum(&mut grads, a.0, &ga);
                    accum(&mut grads, b.0, &gb);
                }
                Op::Scale(a, c) => {
                    let ga = &g * *c;
                    accum(&mut grads, a.0, &ga);
                }
                Op::AddRow(x, row) => {
                    let (x, row) = (*x, *row);
                    accum(&mut grads, x.0, &g);
                    let grow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accum(&mut grads, row.0, &grow);
                }
                Op::MulRow(x, row) => {
                    let (x, row) = (*x, *row);
                    let gx = &g * &self.nodes[row.0].value;
                    let grow = (&g * &self.nodes[x.0].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    accum(&mut grads, x.0, &gx);
                    accum(&mut grads, row.0, &grow);
                }
                Op::MulCol(x, col) => {
                    let (x, col) = (*x, *col);
                    let gx = &g * &self.nodes[col.0].value;
                    let gcol = (&g * &self.nodes[x.0].value)
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    accum(&mut grads, x.0, &gx);
                    accum(&mut grads, col.0, &gcol);
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    accum(&mut grads, a.0, &ga);
                    accum(&mut grads, b.0, &gb);
                }
                Op::Transpose(a) => {
                    let ga = g.t().to_owned();
                    accum(&mut grads, a.0, &ga);
                }
                Op::Silu(a) => {
                    let a = *a;
                    let ga = {
                        let x = &self.nodes[a.0].value;
                        let d = x.mapv(|x| {
                            let s = sigmoid(x);
                            s * (1.0 + x * (1.0 - s))
                        });
                        &g * &d
                    };
                    accum(&mut grads, a.0, &ga);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let ga = {
                        let y = &self.nodes[i].value;
                        &g * &y.mapv(|t| 1.0 - t * t)
                    };
                    accum(&mut grads, a.0, &ga);
                }
                Op::Softmax(a) => {
                    let a = *a;
                    let p = self.nodes[i].value.clone();
                    let mut gx = &g * &p;
                    for (mut row, (grow, prow)) in gx
                        .rows_mut()
                        .into_iter()
                        .zip(g.rows().into_iter().zip(p.rows()))
                    {
                        let dot: f64 = grow
                            .iter()
                            .zip(prow.iter())
                            .map(|(gg, pp)| gg * pp)
                            .sum();
                        row.zip_mut_with(&prow, |r, &pp| *r -= dot * pp);
                    }
                    accum(&mut grads, a.0, &gx);
                }
                Op::LogSoftmax(a) => {
                    let a = *a;
                    let p = self.nodes[i].value.mapv(f64::exp);
                    let mut gx = g.clone();
                    for (mut row, prow) in gx.rows_mut().into_iter().zip(p.rows()) {
                        let total: f64 = row.sum();
                        row.zip_mut_with(&prow, |r, &pp| *r -= total * pp);
                    }
                    accum(&mut grads, a.0, &gx);
                }
                Op::LayerNorm(a, eps) => {
                    let (a, eps) = (*a, *eps);
                    let x = &self.nodes[a.0].value;
                    let y = &self.nodes[i].value;
                    let d = x.ncols() as f64;
                    let mut gx = Mat::zeros(x.raw_dim());
                    for r in 0..x.nrows() {
                        let xr = x.row(r);
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mean = xr.mean().unwrap();
                        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                        let std = (var + eps).sqrt();
                        let gmean = gr.mean().unwrap();
                        let gydot: f64 =
                            gr.iter().zip(yr.iter()).map(|(gg, yy)| gg * yy).sum::<f64>() / d;
                        for c in 0..x.ncols() {
                            gx[(r, c)] = (gr[c] - gmean - yr[c] * gydot) / std;
                        }
                    }
                    accum(&mut grads, a.0, &gx);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.nrows();
                        let gp = g.slice(s![offset..offset + rows, ..]).to_owned();
                        accum(&mut grads, p.0, &gp);
                        offset += rows;
                    }
                }
                Op::SliceRows(a, start, end) => {
                    let (a, start, end) = (*a, *start, *end);
                    let mut ga = Mat::zeros(self.nodes[a.0].value.raw_dim());
                    ga.slice_mut(s![start..end, ..]).assign(&g);
                    accum(&mut grads, a.0, &ga);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.nodes[p.0].value.ncols();
                        let gp = g.slice(s![.., offset..offset + cols]).to_owned();
                        accum(&mut grads, p.0, &gp);
                        offset += cols;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (a, start, end) = (*a, *start, *end);
                    let mut ga = Mat::zeros(self.nodes[a.0].value.raw_dim());
                    ga.slice_mut(s![.., start..end]).assign(&g);
                    accum(&mut grads, a.0, &ga);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let ga = Mat::from_elem(self.nodes[a.0].value.raw_dim(), g[(0, 0)]);
                    accum(&mut grads, a.0, &ga);
                }
                Op::MeanAll(a) => {
                    let a = *a;
                    let n = self.nodes[a.0].value.len() as f64;
                    let ga = Mat::from_elem(self.nodes[a.0].value.raw_dim(), g[(0, 0)] / n);
                    accum(&mut grads, a.0, &ga);
                }
                Op::MeanRows(a) => {
                    let a = *a;
                    let rows = self.nodes[a.0].value.nrows() as f64;
                    let mut ga = Mat::zeros(self.nodes[a.0].value.raw_dim());
                    for mut row in ga.rows_mut() {
                        row.zip_mut_with(&g.row(0), |r, &gg| *r = gg / rows);
                    }
                    accum(&mut grads, a.0, &ga);
                }
                Op::GatherRows(a, ids) => {
                    let (a, ids) = (*a, ids.clone());
                    let mut ga = Mat::zeros(self.nodes[a.0].value.raw_dim());
                    for (i, &id) in ids.iter().enumerate() {
                        let mut dst = ga.row_mut(id);
                        dst += &g.row(i);
                    }
                    accum(&mut grads, a.0, &ga);
                }
                Op::NegGatherMean(a, idx) => {
                    let (a, idx) = (*a, idx.clone());
                    let n = idx.len().max(1) as f64;
                    let mut ga = Mat::zeros(self.nodes[a.0].value.raw_dim());
                    for (r, c) in idx {
                        ga[(r, c)] -= g[(0, 0)] / n;
                    }
                    accum(&mut grads, a.0, &ga);
                }
                Op::Rope(a, positions, theta) => {
                    let (a, positions, theta) = (*a, positions.clone(), *theta);
                    let ga = rope_apply(&g, &positions, theta, true);
                    accum(&mut grads, a.0, &ga);
                }
            }
        }
        out
    }
}

fn accum(grads: &mut [Option<Mat>], idx: usize, g: &Mat) {
    match &mut grads[idx] {
        Some(acc) => *acc += g,
        slot @ None => *slot = Some(g.clone()),
    }
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn layer_norm_rows(x: &Mat, eps: f64) -> Mat {
    let mut out = x.clone();
    let d = x.ncols() as f64;
    for mut row in out.rows_mut() {
        let mean = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let std = (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) / std);
    }
    out
}

/// Rotary transform: row t gets rotation angle positions[t] / theta^(2i/d)
/// on dim pair (2i, 2i+1). `inverse` rotates by the negated angle.
pub fn rope_apply(x: &Mat, positions: &[usize], theta: f64, inverse: bool) -> Mat {
    assert_eq!(x.nrows(), positions.len(), "rope: one position per row");
    let d = x.ncols();
    assert!(d % 2 == 0, "rope requires an even feature dim");
    let mut out = x.clone();
    for (t, &pos) in positions.iter().enumerate() {
        for i in 0..d / 2 {
            let freq = 1.0 / theta.powf(2.0 * i as f64 / d as f64);
            let mut angle = pos as f64 * freq;
            if inverse {
                angle = -angle;
            }
            let (sin, cos) = angle.sin_cos();
            let a = x[(t, 2 * i)];
            let b = x[(t, 2 * i + 1)];
            out[(t, 2 * i)] = a * cos - b * sin;
            out[(t, 2 * i + 1)] = a * sin + b * cos;
        }
    }
    out
}

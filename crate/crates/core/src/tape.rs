//! A small reverse-mode autodiff tape over dense `f32` matrices.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over node
//! indices is a valid topological order for backpropagation. Parameters are
//! borrowed, not copied, and their gradients are collected per parameter id.

use std::borrow::Cow;
use std::sync::Arc;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f32>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNT(Var, Var),
    /// c · x with a constant left factor.
    ConstLeft(Arc<Mat>, Var),
    Add(Var, Var),
    /// x + row, broadcasting a 1×n row over every row of x.
    AddRow(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    SoftmaxRows(Var),
    /// Normalized input and per-row inverse std are cached for backward.
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f32>,
    },
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
}

struct Node<'p> {
    value: Cow<'p, Mat>,
    op: Op,
}

/// Evaluation record for one forward pass.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Mat>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Constant input; gradients reach it but go nowhere further.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(Cow::Owned(value), Op::Input)
    }

    /// Borrowed trainable parameter with the given id.
    pub fn param(&mut self, id: usize, value: &'p Mat) -> Var {
        self.push(Cow::Borrowed(value), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(Cow::Owned(v), Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(Cow::Owned(v), Op::MatMulNT(a, b))
    }

    pub fn const_left(&mut self, c: Arc<Mat>, x: Var) -> Var {
        let v = c.dot(self.value(x));
        self.push(Cow::Owned(v), Op::ConstLeft(c, x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Cow::Owned(v), Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) + self.value(row);
        self.push(Cow::Owned(v), Op::AddRow(x, row))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let v = self.value(x) * k;
        self.push(Cow::Owned(v), Op::Scale(x, k))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|u| 0.5 * u * (1.0 + (GELU_C * (u + 0.044_715 * u * u * u)).tanh()));
        self.push(Cow::Owned(v), Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f32::NEG_INFINITY, |m, &u| m.max(u));
            row.mapv_inplace(|u| (u - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        self.push(Cow::Owned(v), Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f32;
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.fold(0.0, |a, &u| a + u * u) / d;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row *= r;
            rstd.push(r);
        }
        let v = &xhat * self.value(gamma) + self.value(beta);
        self.push(Cow::Owned(v), Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice(s![start..end, ..]).to_owned();
        self.push(Cow::Owned(v), Op::SliceRows(x, start, end))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(Cow::Owned(v), Op::SliceCols(x, start, end))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f32>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("column counts agree");
        self.push(Cow::Owned(v), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f32>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts agree");
        self.push(Cow::Owned(v), Op::ConcatCols(parts.to_vec()))
    }

    /// Backpropagates from the given seed gradients. Seeds on the same node
    /// accumulate.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            accumulate(&mut grads[v.0], g.view());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads, params: self.param_ids() }
    }

    fn param_ids(&self) -> Vec<(usize, usize)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((i, id)),
                _ => None,
            })
            .collect()
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.value(*b).t());
                let gb = self.value(*a).t().dot(g);
                accumulate(&mut grads[a.0], ga.view());
                accumulate(&mut grads[b.0], gb.view());
            }
            Op::MatMulNT(a, b) => {
                let ga = g.dot(self.value(*b));
                let gb = g.t().dot(self.value(*a));
                accumulate(&mut grads[a.0], ga.view());
                accumulate(&mut grads[b.0], gb.view());
            }
            Op::ConstLeft(c, x) => {
                let gx = c.t().dot(g);
                accumulate(&mut grads[x.0], gx.view());
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.view());
                accumulate(&mut grads[b.0], g.view());
            }
            Op::AddRow(x, row) => {
                accumulate(&mut grads[x.0], g.view());
                let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(&mut grads[row.0], gr.view());
            }
            Op::Scale(x, k) => {
                let gx = g * *k;
                accumulate(&mut grads[x.0], gx.view());
            }
            Op::Gelu(x) => {
                let mut gx = self.value(*x).clone();
                Zip::from(&mut gx).and(g).for_each(|u, &gu| {
                    let x = *u;
                    let inner = GELU_C * (x + 0.044_715 * x * x * x);
                    let t = inner.tanh();
                    let dinner = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
                    *u = gu * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner);
                });
                accumulate(&mut grads[x.0], gx.view());
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = g * &**y;
                for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row).and(&yrow).for_each(|r, &yv| *r -= yv * dot);
                }
                accumulate(&mut grads[x.0], gx.view());
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gamma_v = self.value(*gamma);
                let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                let ggamma = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                let gxhat = g * gamma_v;
                let d = xhat.ncols() as f32;
                let mut gx = gxhat.clone();
                for (r, (mut row, xrow)) in gx.rows_mut().into_iter().zip(xhat.rows()).enumerate() {
                    let mean_g = row.sum() / d;
                    let mean_gx = row.iter().zip(xrow.iter()).map(|(a, b)| a * b).sum::<f32>() / d;
                    let rs = rstd[r];
                    Zip::from(&mut row).and(&xrow).for_each(|v, &xh| *v = rs * (*v - mean_g - xh * mean_gx));
                }
                accumulate(&mut grads[x.0], gx.view());
                accumulate(&mut grads[gamma.0], ggamma.view());
                accumulate(&mut grads[beta.0], gbeta.view());
            }
            Op::SliceRows(x, start, end) => {
                let shape = self.value(*x).raw_dim();
                let slot = grads[x.0].get_or_insert_with(|| Mat::zeros(shape));
                let mut view = slot.slice_mut(s![*start..*end, ..]);
                view += g;
            }
            Op::SliceCols(x, start, end) => {
                let shape = self.value(*x).raw_dim();
                let slot = grads[x.0].get_or_insert_with(|| Mat::zeros(shape));
                let mut view = slot.slice_mut(s![.., *start..*end]);
                view += g;
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    accumulate(&mut grads[p.0], g.slice(s![at..at + n, ..]));
                    at += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = self.value(*p).ncols();
                    accumulate(&mut grads[p.0], g.slice(s![.., at..at + n]));
                    at += n;
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Mat>, g: ArrayView2<f32>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g.to_owned()),
    }
}

/// Gradients from one backward sweep.
pub struct Grads {
    grads: Vec<Option<Mat>>,
    params: Vec<(usize, usize)>,
}

impl Grads {
    /// Gradient at a node, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Adds every parameter gradient into `out[param_id]`.
    pub fn accumulate_params(&self, out: &mut [Mat]) {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                out[id] += g;
            }
        }
    }
}

//! Tape-based reverse-mode differentiation over the handful of ops the
//! detector needs.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Parameters are copied
//! in from a [`ParamStore`] by name, and [`Graph::backward`] accumulates the
//! loss gradient back into the store's `grad` buffers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, gemm};
use crate::tensor::{ParamStore, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// `a [r, k] x b[n, k]^T -> [r, n]`; a rank-1 `a` is a single row.
    MatMulNT { a: Var, b: Var },
    /// `a [r, n] + row [n]`, broadcast over rows.
    AddRow { a: Var, row: Var },
    Add { a: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Conv3x3 {
        input: Var,
        filters: Var,
        bias: Option<Var>,
        cols: Vec<f64>,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    ColSlice { a: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Scale(Var, f64),
    /// Terminal losses keep their local derivative from the forward pass.
    FusedLoss { input: Var, local_grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    param: Option<String>,
}

/// Per-element weights and targets for the sigmoid focal loss.
#[derive(Debug, Clone, Copy)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Focal loss of one logit against a binary target, and its derivative.
pub fn focal_term(x: f64, positive: bool, fp: FocalParams) -> (f64, f64) {
    let p = kernels::sigmoid(x);
    let g = fp.gamma;
    if positive {
        let log_p = -kernels::softplus(-x);
        let q = 1.0 - p;
        let qg = q.powf(g);
        let loss = -fp.alpha * qg * log_p;
        let d = fp.alpha * qg * (g * p * log_p - q);
        (loss, d)
    } else {
        let log_q = -kernels::softplus(x);
        let pg = p.powf(g);
        let loss = -(1.0 - fp.alpha) * pg * log_q;
        let d = (1.0 - fp.alpha) * pg * (p - g * (1.0 - p) * log_q);
        (loss, d)
    }
}

/// Huber-style smooth L1 of a residual and its derivative.
pub fn smooth_l1_term(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records gradient state; used for inference.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracked: tracked && self.grad_enabled,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf whose gradient can be read back with [`Graph::gradients`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies a named parameter out of the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let src = store.get(name)?;
        let value = Tensor::new(src.shape().to_vec(), src.data().to_vec())?;
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (r, k) = match sa {
            [k] => (1, *k),
            [r, k] => (*r, *k),
            _ => return Err(Error::shape("matmul", format!("lhs rank {} unsupported", sa.len()))),
        };
        let (n, kb) = match sb {
            [n, kb] => (*n, *kb),
            _ => return Err(Error::shape("matmul", format!("rhs must be a matrix, got {sb:?}"))),
        };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dimension: lhs has {k} columns, matrix has {kb}"),
            ));
        }
        let mut out = vec![0.0; r * n];
        gemm(
            r,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (1, k),
            0.0,
            &mut out,
        );
        let shape = if sa.len() == 1 { vec![n] } else { vec![r, n] };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMulNT { a, b }, tracked))
    }

    /// `w x (+ bias)` for a vector `x [n]` and matrix `w [m, n]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        if self.shape(x).len() != 1 {
            return Err(Error::shape("linear", format!("input must be a vector, got {:?}", self.shape(x))));
        }
        let y = self.matmul_nt(x, w)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&1);
        if self.shape(row) != [n] {
            return Err(Error::shape(
                "add_row",
                format!("row of length {n} expected, got {:?}", self.shape(row)),
            ));
        }
        let rv = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            chunk.iter_mut().zip(&rv).for_each(|(o, r)| *o += r);
        }
        let tracked = self.tracked(a) || self.tracked(row);
        Ok(self.push(strip(out), Op::AddRow { a, row }, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(o, v)| *o += v);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(strip(out), Op::Add { a, b }, tracked))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let tracked = self.tracked(x);
        self.push(strip(out), Op::Relu(x), tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = kernels::sigmoid(*v));
        let tracked = self.tracked(x);
        self.push(strip(out), Op::Sigmoid(x), tracked)
    }

    pub fn conv2d_3x3(&mut self, input: Var, filters: Var, bias: Option<Var>) -> Result<Var> {
        let (c_in, h, w) = chw("conv2d_3x3", self.shape(input))?;
        let fs = self.shape(filters);
        if fs.len() != 4 || fs[2] != 3 || fs[3] != 3 {
            return Err(Error::shape(
                "conv2d_3x3",
                format!("filters must be [c_out, c_in, 3, 3], got {fs:?}"),
            ));
        }
        if fs[1] != c_in {
            return Err(Error::shape(
                "conv2d_3x3",
                format!("input channels: filters expect {}, input has {c_in}", fs[1]),
            ));
        }
        let c_out = fs[0];
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::shape(
                    "conv2d_3x3",
                    format!("bias length: expected {c_out}, got {:?}", self.shape(b)),
                ));
            }
        }
        let (out, cols) = kernels::conv3x3_forward(
            self.value(input).data(),
            c_in,
            h,
            w,
            self.value(filters).data(),
            c_out,
            bias.map(|b| self.value(b).data()),
        );
        let tracked = self.tracked(input)
            || self.tracked(filters)
            || bias.is_some_and(|b| self.tracked(b));
        // patch columns are only needed for the filter gradient
        let cols = if tracked && self.tracked(filters) {
            cols
        } else {
            Vec::new()
        };
        Ok(self.push(
            Tensor::new(vec![c_out, h, w], out)?,
            Op::Conv3x3 {
                input,
                filters,
                bias,
                cols,
            },
            tracked,
        ))
    }

    /// 2x2 average pooling with stride 2; spatial extents must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("avg_pool2", self.shape(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "avg_pool2",
                format!("spatial extent {h}x{w} is not even"),
            ));
        }
        let out = kernels::avg_pool2(self.value(x).data(), c, h, w);
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(vec![c, h / 2, w / 2], out)?, Op::AvgPool2(x), tracked))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("global_avg_pool", self.shape(x))?;
        if h * w == 0 {
            return Err(Error::shape("global_avg_pool", "empty spatial extent"));
        }
        let hw = h * w;
        let data = self.value(x).data();
        let out: Vec<f64> = (0..c)
            .map(|ci| data[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::vector(out), Op::GlobalAvgPool(x), tracked))
    }

    /// Columns `start..start + len` of a matrix `[r, n]`.
    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, n) = match self.shape(a) {
            [n] => (1, *n),
            [r, n] => (*r, *n),
            s => return Err(Error::shape("col_slice", format!("rank {} unsupported", s.len()))),
        };
        if start + len > n {
            return Err(Error::shape(
                "col_slice",
                format!("columns {start}..{} out of {n}", start + len),
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&src[row * n + start..row * n + start + len]);
        }
        let shape = if self.shape(a).len() == 1 { vec![len] } else { vec![r, len] };
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::ColSlice { a, start }, tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let tracked = self.tracked(a);
        Ok(self.push(strip(out), Op::Reshape(a), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= k);
        let tracked = self.tracked(a);
        self.push(strip(out), Op::Scale(a, k), tracked)
    }

    /// Sum of per-element focal terms over entries with `weight != 0`,
    /// divided by `normalizer`. `targets` holds 1.0 for positives.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        targets: &[f64],
        weights: &[f64],
        fp: FocalParams,
        normalizer: f64,
    ) -> Result<Var> {
        let x = self.value(logits).data();
        if targets.len() != x.len() || weights.len() != x.len() {
            return Err(Error::shape(
                "focal_loss",
                format!(
                    "{} logits, {} targets, {} weights",
                    x.len(),
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let mut total = 0.0;
        let mut local = vec![0.0; x.len()];
        for i in 0..x.len() {
            if weights[i] == 0.0 {
                continue;
            }
            let (l, d) = focal_term(x[i], targets[i] > 0.5, fp);
            total += weights[i] * l;
            local[i] = weights[i] * d / normalizer;
        }
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(total / normalizer),
            Op::FusedLoss {
                input: logits,
                local_grad: local,
            },
            tracked,
        ))
    }

    /// Sum of smooth-L1 residual terms over weighted entries, divided by
    /// `normalizer`.
    pub fn smooth_l1_loss(
        &mut self,
        pred: Var,
        targets: &[f64],
        weights: &[f64],
        beta: f64,
        normalizer: f64,
    ) -> Result<Var> {
        let x = self.value(pred).data();
        if targets.len() != x.len() || weights.len() != x.len() {
            return Err(Error::shape(
                "smooth_l1",
                format!(
                    "{} predictions, {} targets, {} weights",
                    x.len(),
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let mut total = 0.0;
        let mut local = vec![0.0; x.len()];
        for i in 0..x.len() {
            if weights[i] == 0.0 {
                continue;
            }
            let (l, d) = smooth_l1_term(x[i] - targets[i], beta);
            total += weights[i] * l;
            local[i] = weights[i] * d / normalizer;
        }
        let tracked = self.tracked(pred);
        Ok(self.push(
            Tensor::scalar(total / normalizer),
            Op::FusedLoss {
                input: pred,
                local_grad: local,
            },
            tracked,
        ))
    }

    fn run_backward(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMulNT { a, b } => {
                let k = *self.shape(*b).last().unwrap();
                let n = self.shape(*b)[0];
                let r = self.value(*a).numel() / k;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // da = g [r,n] * b [n,k]
                acc(*a, &mut |da| gemm(r, n, k, g, (n, 1), bv, (k, 1), 1.0, da));
                // db = g^T [n,r] * a [r,k]
                acc(*b, &mut |db| gemm(n, r, k, g, (1, n), av, (k, 1), 1.0, db));
            }
            Op::AddRow { a, row } => {
                let n = self.value(*row).numel();
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, v)| *d += v));
                acc(*row, &mut |dr| {
                    for chunk in g.chunks(n) {
                        dr.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, v)| *d += v));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, v)| *d += v));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |dx| {
                    for ((d, gv), xi) in dx.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for ((d, gv), yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yi * (1.0 - yi);
                    }
                });
            }
            Op::Conv3x3 {
                input,
                filters,
                bias,
                cols,
            } => {
                let (c_in, h, w) = chw("conv2d_3x3", self.shape(*input)).unwrap();
                let c_out = node.value.shape()[0];
                let hw = h * w;
                let k = c_in * 9;
                if let Some(b) = bias {
                    acc(*b, &mut |db| {
                        for (o, d) in db.iter_mut().enumerate() {
                            *d += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
                        }
                    });
                }
                // dF = g [c_out, hw] * cols^T [hw, k]
                acc(*filters, &mut |df| {
                    gemm(c_out, hw, k, g, (hw, 1), cols, (1, hw), 1.0, df)
                });
                let fv = self.value(*filters).data();
                acc(*input, &mut |dx| {
                    // dcols = F^T [k, c_out] * g [c_out, hw]
                    let mut dcols = vec![0.0; k * hw];
                    gemm(k, c_out, hw, fv, (1, k), g, (hw, 1), 0.0, &mut dcols);
                    kernels::col2im3x3(&dcols, c_in, h, w, dx);
                });
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = chw("avg_pool2", self.shape(*x)).unwrap();
                let (oh, ow) = (h / 2, w / 2);
                acc(*x, &mut |dx| {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                dx[ci * h * w + y * w + xx] +=
                                    0.25 * g[ci * oh * ow + (y / 2) * ow + xx / 2];
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let (_, h, w) = chw("global_avg_pool", self.shape(*x)).unwrap();
                let hw = h * w;
                acc(*x, &mut |dx| {
                    for (ci, chunk) in dx.chunks_mut(hw).enumerate() {
                        let v = g[ci] / hw as f64;
                        chunk.iter_mut().for_each(|d| *d += v);
                    }
                });
            }
            Op::ColSlice { a, start } => {
                let n = *self.shape(*a).last().unwrap();
                let len = *node.value.shape().last().unwrap();
                acc(*a, &mut |da| {
                    for (row, chunk) in g.chunks(len).enumerate() {
                        da[row * n + start..row * n + start + len]
                            .iter_mut()
                            .zip(chunk)
                            .for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, v)| *d += v));
            }
            Op::Sum(a) => {
                let gv = g[0];
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += gv));
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, v)| *d += s * v));
            }
            Op::FusedLoss { input, local_grad } => {
                let gv = g[0];
                acc(*input, &mut |dx| {
                    dx.iter_mut()
                        .zip(local_grad)
                        .for_each(|(d, l)| *d += gv * l)
                });
            }
        }
    }

    /// Accumulates `d loss / d param` into every store parameter used on this
    /// graph. Repeated calls add up until the store's grads are zeroed.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.run_backward(loss)?;
        for (node, grad) in self.nodes.iter().zip(grads) {
            let (Some(name), Some(grad)) = (&node.param, grad) else {
                continue;
            };
            let dst = store
                .get_mut(name)?
                .grad_mut()
                .ok_or_else(|| Error::invalid(format!("parameter '{name}' does not track gradients")))?;
            dst.iter_mut().zip(&grad).for_each(|(d, v)| *d += v);
        }
        Ok(())
    }

    /// Gradients of `loss` with respect to the given vars (zeros when a var
    /// does not influence the loss).
    pub fn gradients(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let mut grads = self.run_backward(loss)?;
        wrt.iter()
            .map(|v| {
                let shape = self.shape(*v).to_vec();
                let n = self.value(*v).numel();
                let data = grads
                    .get_mut(v.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; n]);
                Tensor::new(shape, data)
            })
            .collect()
    }

    /// Names of the store parameters pulled onto this graph, with how often
    /// each was requested.
    pub fn param_uses(&self) -> BTreeMap<&str, usize> {
        let mut out = BTreeMap::new();
        for n in &self.nodes {
            if let Some(p) = &n.param {
                *out.entry(p.as_str()).or_insert(0) += 1;
            }
        }
        out
    }
}

fn strip(mut t: Tensor) -> Tensor {
    t.set_requires_grad(false);
    t
}

fn chw(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize)> {
    match s {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::shape(op, format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Evaluates a graph-building closure once without recording gradients.
fn eval_no_grad(
    inputs: &[&Tensor],
    f: impl FnOnce(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<Tensor> {
    let mut g = Graph::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.nodes.swap_remove(out.0).value)
}

pub fn conv2d_3x3(input: &Tensor, filters: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    match bias {
        Some(b) => eval_no_grad(&[input, filters, b], |g, v| g.conv2d_3x3(v[0], v[1], Some(v[2]))),
        None => eval_no_grad(&[input, filters], |g, v| g.conv2d_3x3(v[0], v[1], None)),
    }
}

pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    match bias {
        Some(b) => eval_no_grad(&[x, w, b], |g, v| g.linear(v[0], v[1], Some(v[2]))),
        None => eval_no_grad(&[x, w], |g, v| g.linear(v[0], v[1], None)),
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = strip(x.clone());
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut out = strip(x.clone());
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = kernels::sigmoid(*v));
    out
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    eval_no_grad(&[x], |g, v| g.global_avg_pool(v[0]))
}

pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    eval_no_grad(&[x], |g, v| g.avg_pool2(v[0]))
}

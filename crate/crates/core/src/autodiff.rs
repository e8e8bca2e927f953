//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards
//! visits them in reverse topological order. Leaves created with
//! [`Graph::constant`] never receive an adjoint.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A linear map applied independently to every row along the last axis.
///
/// Backward applies [`LinearMap::adjoint`] to the upstream gradient.
pub trait LinearMap: Send + Sync {
    fn apply(&self, row: &[f64]) -> Vec<f64>;
    fn adjoint(&self, row: &[f64]) -> Vec<f64>;
    fn name(&self) -> &'static str {
        "linear_map"
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRowBias(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Relu(Var),
    Log(Var),
    L2NormSq(Var),
    Mean(Var),
    Index(Var, usize),
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    LeastSquares {
        zr: Var,
        zt: Var,
        residual: Tensor,
        coef: Tensor,
    },
    RowMap(Var, Arc<dyn LinearMap>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph recording tensor operations for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` if `v` does not depend on any parameter
    /// or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

/// Unfolds one sample `x[C×L]` into `cols[(C·k)×Lo]` with implicit zero padding.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    l: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lo: usize,
    cols: &mut [f64],
) {
    for ci in 0..c {
        let xrow = &x[ci * l..(ci + 1) * l];
        for j in 0..k {
            let dst = &mut cols[(ci * k + j) * lo..(ci * k + j + 1) * lo];
            for (t, d) in dst.iter_mut().enumerate() {
                let i = (t * stride + j) as isize - pad as isize;
                *d = if i >= 0 && (i as usize) < l {
                    xrow[i as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto `x[C×L]`.
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    cols: &[f64],
    c: usize,
    l: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lo: usize,
    x: &mut [f64],
) {
    for ci in 0..c {
        let xrow = &mut x[ci * l..(ci + 1) * l];
        for j in 0..k {
            let src = &cols[(ci * k + j) * lo..(ci * k + j + 1) * lo];
            for (t, &v) in src.iter().enumerate() {
                let i = (t * stride + j) as isize - pad as isize;
                if i >= 0 && (i as usize) < l {
                    xrow[i as usize] += v;
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
    f(t.data_mut());
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn emit(&mut self, name: &'static str, value: Tensor, op: Op, rg: bool) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.emit("matmul", out, Op::MatMul(a, b), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.emit("add", out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.emit("sub", out, Op::Sub(a, b), rg)
    }

    /// `a[N×M] + b[M]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.len() != va.cols() {
            return Err(Error::shape(
                "add_row_bias",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let m = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vb.data()[i % m])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.emit("add_row_bias", out, Op::AddRowBias(a, b), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x + c).collect(),
        )?;
        let rg = self.rg(a);
        self.emit("add_scalar", out, Op::AddScalar(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x * c).collect(),
        )?;
        let rg = self.rg(a);
        self.emit("scale", out, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data()
                .iter()
                .map(|&x| if x > 0.0 { x } else { 0.0 })
                .collect(),
        )?;
        let rg = self.rg(a);
        self.emit("relu", out, Op::Relu(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = va.data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::LogDomain(bad));
        }
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x.ln()).collect(),
        )?;
        let rg = self.rg(a);
        self.emit("log", out, Op::Log(a), rg)
    }

    /// Sum of squares of all entries.
    pub fn l2_norm_sq(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum_sq());
        let rg = self.rg(a);
        self.emit("l2_norm_sq", out, Op::L2NormSq(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let out = Tensor::scalar(va.data().iter().sum::<f64>() / va.len() as f64);
        let rg = self.rg(a);
        self.emit("mean", out, Op::Mean(a), rg)
    }

    /// Extracts element `i` (flat index) as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let va = self.value(a);
        if i >= va.len() {
            return Err(Error::shape("index", format!("{i} of {}", va.len())));
        }
        let out = Tensor::scalar(va.data()[i]);
        let rg = self.rg(a);
        self.emit("index", out, Op::Index(a, i), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        self.emit("reshape", out, Op::Reshape(a), rg)
    }

    /// Cross-correlation of `x[N×C×L]` with `w[C'×C×k]`, zero padding `pad`
    /// on both ends. Output length is `floor((L + 2·pad − k)/stride) + 1`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (xs, ws) = (vx.shape(), vw.shape());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || stride == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("input {xs:?}, kernel {ws:?}, stride {stride}"),
            ));
        }
        let (n, c, l) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[0], ws[2]);
        if k > l + 2 * pad || k == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("kernel {k} larger than padded input {}", l + 2 * pad),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).len() != co {
                return Err(Error::shape("conv1d", "bias length != out channels"));
            }
        }
        let lo = (l + 2 * pad - k) / stride + 1;
        let wd = vw.data();
        let mut out = vec![0.0; n * co * lo];
        let mut cols = vec![0.0; c * k * lo];
        for ni in 0..n {
            im2col(
                &vx.data()[ni * c * l..(ni + 1) * c * l],
                c,
                l,
                k,
                stride,
                pad,
                lo,
                &mut cols,
            );
            let orow = &mut out[ni * co * lo..(ni + 1) * co * lo];
            if let Some(b) = bias {
                let bd = self.nodes[b.0].value.data();
                for (o, chunk) in orow.chunks_mut(lo).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bd[o]);
                }
            }
            gemm_acc(wd, &cols, orow, co, c * k, lo);
        }
        let out = Tensor::new(vec![n, co, lo], out)?;
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        self.emit(
            "conv1d",
            out,
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Mean over the last axis: `N×C×L → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 3 {
            return Err(Error::shape("global_avg_pool", format!("{:?}", vx.shape())));
        }
        let (n, c, l) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let data = vx
            .data()
            .chunks(l)
            .map(|row| row.iter().sum::<f64>() / l as f64)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(x);
        self.emit("global_avg_pool", out, Op::GlobalAvgPool(x), rg)
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.shape().len() != 2 || vl.rows() != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?}, {} labels", vl.shape(), labels.len()),
            ));
        }
        let (n, c) = (vl.rows(), vl.cols());
        if let Some(&label) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = vl.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / n as f64);
        let rg = self.rg(logits);
        self.emit(
            "softmax_cross_entropy",
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// OLS residual of `zt` regressed on `[zr, 1]`.
    ///
    /// Returns a length-2 vector `(SS_res, SS_total)` with `SS_total = ‖zt‖²`.
    pub fn least_squares_residual(&mut self, zr: Var, zt: Var) -> Result<Var> {
        let fit = linalg::least_squares(self.value(zr), self.value(zt))?;
        let out = Tensor::new(vec![2], vec![fit.ss_res, fit.ss_total])?;
        let rg = self.rg(zr) || self.rg(zt);
        self.emit(
            "least_squares_residual",
            out,
            Op::LeastSquares {
                zr,
                zt,
                residual: fit.residual,
                coef: fit.coef,
            },
            rg,
        )
    }

    /// Applies `map` to every row along the last axis.
    pub fn row_map(&mut self, x: Var, map: Arc<dyn LinearMap>) -> Result<Var> {
        let vx = self.value(x);
        let l = *vx.shape().last().unwrap_or(&1);
        let mut data = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(l) {
            let mapped = map.apply(row);
            if mapped.len() != l {
                return Err(Error::shape(map.name(), "row length changed"));
            }
            data.extend(mapped);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.emit(map.name(), out, Op::RowMap(x, map), rg)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite("backward"));
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], va.shape(), |ga| {
                        gemm_nt_acc(gd, vb.data(), ga, n, m, k)
                    });
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], vb.shape(), |gb| {
                        gemm_tn_acc(va.data(), gd, gb, n, k, m)
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.shape(), |ga| {
                        ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y)
                    });
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], g.shape(), |gb| {
                        gb.iter_mut().zip(gd).for_each(|(x, y)| *x += sign * y)
                    });
                }
            }
            Op::AddRowBias(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.shape(), |ga| {
                        ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y)
                    });
                }
                if self.rg(*b) {
                    let m = self.value(*b).len();
                    accumulate(&mut grads[b.0], self.value(*b).shape(), |gb| {
                        for (i, y) in gd.iter().enumerate() {
                            gb[i % m] += y;
                        }
                    });
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.value(*a).shape();
                accumulate(&mut grads[a.0], shape, |ga| {
                    ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y)
                });
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], g.shape(), |ga| {
                    ga.iter_mut().zip(gd).for_each(|(x, y)| *x += c * y)
                });
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                accumulate(&mut grads[a.0], g.shape(), |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(gd).zip(va) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::Log(a) => {
                let va = self.value(*a).data();
                accumulate(&mut grads[a.0], g.shape(), |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(gd).zip(va) {
                        *x += y / v;
                    }
                });
            }
            Op::L2NormSq(a) => {
                let va = self.value(*a);
                let s = gd[0];
                accumulate(&mut grads[a.0], va.shape(), |ga| {
                    ga.iter_mut()
                        .zip(va.data())
                        .for_each(|(x, v)| *x += 2.0 * s * v)
                });
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let s = gd[0] / va.len() as f64;
                accumulate(&mut grads[a.0], va.shape(), |ga| {
                    ga.iter_mut().for_each(|x| *x += s)
                });
            }
            Op::Index(a, i) => {
                let va = self.value(*a);
                accumulate(&mut grads[a.0], va.shape(), |ga| ga[*i] += gd[0]);
            }
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                pad,
            } => self.conv1d_backward(*x, *w, *bias, *stride, *pad, g, grads),
            Op::GlobalAvgPool(x) => {
                let vx = self.value(*x);
                let l = vx.shape()[2];
                let inv = 1.0 / l as f64;
                accumulate(&mut grads[x.0], vx.shape(), |gx| {
                    for (row, y) in gx.chunks_mut(l).zip(gd) {
                        row.iter_mut().for_each(|v| *v += y * inv);
                    }
                });
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let vl = self.value(*logits);
                let (n, c) = (vl.rows(), vl.cols());
                let s = gd[0] / n as f64;
                accumulate(&mut grads[logits.0], vl.shape(), |gl| {
                    for i in 0..n {
                        for j in 0..c {
                            let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                            gl[i * c + j] += s * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::LeastSquares {
                zr,
                zt,
                residual,
                coef,
            } => {
                let (g_res, g_tot) = (gd[0], gd[1]);
                if self.rg(*zt) {
                    let vt = self.value(*zt);
                    accumulate(&mut grads[zt.0], vt.shape(), |gt| {
                        for ((x, e), z) in gt.iter_mut().zip(residual.data()).zip(vt.data()) {
                            *x += 2.0 * g_res * e + 2.0 * g_tot * z;
                        }
                    });
                }
                if self.rg(*zr) {
                    // d SS_res / d[Zr,1] = −2·E·Bᵀ; the intercept column is dropped.
                    let vr = self.value(*zr);
                    let (n, p) = (vr.rows(), vr.cols());
                    let q = residual.cols();
                    let mut full = vec![0.0; n * (p + 1)];
                    gemm_nt_acc(residual.data(), coef.data(), &mut full, n, q, p + 1);
                    accumulate(&mut grads[zr.0], vr.shape(), |gr| {
                        for i in 0..n {
                            for j in 0..p {
                                gr[i * p + j] += -2.0 * g_res * full[i * (p + 1) + j];
                            }
                        }
                    });
                }
            }
            Op::RowMap(x, map) => {
                let l = *g.shape().last().unwrap_or(&1);
                let mut back = Vec::with_capacity(g.len());
                for row in gd.chunks(l) {
                    back.extend(map.adjoint(row));
                }
                accumulate(&mut grads[x.0], g.shape(), |gx| {
                    gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b)
                });
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, c, l) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (co, k) = (vw.shape()[0], vw.shape()[2]);
        let lo = g.shape()[2];
        let (xd, wd, gd) = (vx.data(), vw.data(), g.data());

        if let Some(b) = bias.filter(|b| self.rg(*b)) {
            accumulate(&mut grads[b.0], self.value(b).shape(), |gb| {
                for ni in 0..n {
                    for (o, gbo) in gb.iter_mut().enumerate() {
                        *gbo += gd[(ni * co + o) * lo..(ni * co + o + 1) * lo]
                            .iter()
                            .sum::<f64>();
                    }
                }
            });
        }
        let ck = c * k;
        let mut cols = vec![0.0; ck * lo];
        if self.rg(w) {
            accumulate(&mut grads[w.0], vw.shape(), |gw| {
                for ni in 0..n {
                    im2col(
                        &xd[ni * c * l..(ni + 1) * c * l],
                        c,
                        l,
                        k,
                        stride,
                        pad,
                        lo,
                        &mut cols,
                    );
                    gemm_nt_acc(&gd[ni * co * lo..(ni + 1) * co * lo], &cols, gw, co, lo, ck);
                }
            });
        }
        if self.rg(x) {
            accumulate(&mut grads[x.0], vx.shape(), |gx| {
                for ni in 0..n {
                    cols.iter_mut().for_each(|v| *v = 0.0);
                    gemm_tn_acc(
                        wd,
                        &gd[ni * co * lo..(ni + 1) * co * lo],
                        &mut cols,
                        co,
                        ck,
                        lo,
                    );
                    col2im_acc(
                        &cols,
                        c,
                        l,
                        k,
                        stride,
                        pad,
                        lo,
                        &mut gx[ni * c * l..(ni + 1) * c * l],
                    );
                }
            });
        }
    }
}

//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order. [`Graph::backward`]
//! walks the tape in exact reverse order and accumulates gradients into the
//! parameter leaves. Each graph is single-writer; independent graphs share no
//! mutable state.

mod adam;
mod batchnorm;
mod conv;

use std::sync::Arc;

pub use adam::AdamState;
pub use batchnorm::{BatchStats, RunningStats, BN_EPS, BN_MOMENTUM};

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Training,
    Inference,
}

/// A fixed linear map `R^n -> R^m` with its adjoint.
pub trait LinearMap: Send + Sync {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    fn apply_adjoint(&self, r: &[f64], out: &mut [f64]);

    /// Applies the map to `rows` stacked inputs.
    fn apply_rows(&self, x: &[f64], rows: usize, out: &mut [f64]) {
        let (n, m) = (self.input_len(), self.output_len());
        for b in 0..rows {
            self.apply(&x[b * n..(b + 1) * n], &mut out[b * m..(b + 1) * m]);
        }
    }

    fn apply_adjoint_rows(&self, r: &[f64], rows: usize, out: &mut [f64]) {
        let (n, m) = (self.input_len(), self.output_len());
        for b in 0..rows {
            self.apply_adjoint(&r[b * m..(b + 1) * m], &mut out[b * n..(b + 1) * n]);
        }
    }
}

/// Dense row-major matrix used as a constant linear map.
#[derive(Clone, Debug)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl LinearMap for DenseMatrix {
    fn input_len(&self) -> usize {
        self.cols
    }

    fn output_len(&self) -> usize {
        self.rows
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        gemm(self.rows, self.cols, 1, &self.data, false, x, false, out, false);
    }

    fn apply_adjoint(&self, r: &[f64], out: &mut [f64]) {
        gemm(self.cols, self.rows, 1, &self.data, true, r, false, out, false);
    }

    fn apply_rows(&self, x: &[f64], rows: usize, out: &mut [f64]) {
        // out[B, m] = x[B, n] * A^T
        gemm(rows, self.cols, self.rows, x, false, &self.data, true, out, false);
    }

    fn apply_adjoint_rows(&self, r: &[f64], rows: usize, out: &mut [f64]) {
        gemm(rows, self.rows, self.cols, r, false, &self.data, false, out, false);
    }
}

/// Coefficient of one term in [`Graph::combine`].
#[derive(Clone, Copy, Debug)]
pub enum Coef {
    /// Fixed weight, not differentiated.
    Const(f64),
    /// Element `idx` of a trainable tensor.
    Param(Var, usize),
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Combine {
        coefs: Vec<Coef>,
        terms: Vec<Var>,
    },
    RowScale {
        x: Var,
        factors: Vec<f64>,
    },
    Relu(Var),
    Reshape(Var),
    Linear {
        x: Var,
        map: Arc<dyn LinearMap>,
        adjoint: bool,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: batchnorm::Saved,
    },
    SumSquaredDiff(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Combine { .. } => "combine",
            Op::RowScale { .. } => "row_scale",
            Op::Relu(_) => "relu",
            Op::Reshape(_) => "reshape",
            Op::Linear { adjoint: false, .. } => "linear",
            Op::Linear { adjoint: true, .. } => "linear_adjoint",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::SumSquaredDiff(..) => "mse",
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Data that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a parameter leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::SumSquaredDiff(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Relu(x) | Op::Reshape(x) => vec![*x],
            Op::RowScale { x, .. } | Op::Linear { x, .. } => vec![*x],
            Op::Combine { coefs, terms } => {
                let mut v = terms.clone();
                v.extend(coefs.iter().filter_map(|c| match c {
                    Coef::Param(p, _) => Some(*p),
                    Coef::Const(_) => None,
                }));
                v
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
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

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Sub(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| c * v).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(value, Op::Scale(x, c))
    }

    /// Weighted sum `sum_k coef_k * term_k` of same-shape terms.
    ///
    /// With parameter coefficients this is a one-by-one convolution over the
    /// stacked term images.
    pub fn combine(&mut self, coefs: &[Coef], terms: &[Var]) -> Result<Var> {
        if coefs.len() != terms.len() || terms.is_empty() {
            return Err(Error::shape(
                "combine",
                format!("{} coefficients for {} terms", coefs.len(), terms.len()),
            ));
        }
        for t in &terms[1..] {
            self.same_shape("combine", terms[0], *t)?;
        }
        let mut out = vec![0.0; self.value(terms[0]).numel()];
        for (c, t) in coefs.iter().zip(terms) {
            let w = self.coef_value(*c)?;
            for (o, v) in out.iter_mut().zip(self.value(*t).data()) {
                *o += w * v;
            }
        }
        let value = Tensor::new(self.shape(terms[0]).to_vec(), out)?;
        self.push(
            value,
            Op::Combine {
                coefs: coefs.to_vec(),
                terms: terms.to_vec(),
            },
        )
    }

    fn coef_value(&self, c: Coef) -> Result<f64> {
        match c {
            Coef::Const(w) => Ok(w),
            Coef::Param(p, idx) => self.value(p).data().get(idx).copied().ok_or_else(|| {
                Error::shape("combine", format!("coefficient index {idx} out of range"))
            }),
        }
    }

    /// Multiplies row `b` of `x` (viewed as `[B, rest]`) by the constant `factors[b]`.
    pub fn row_scale(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let rows = self.shape(x)[0];
        if factors.len() != rows {
            return Err(Error::shape(
                "row_scale",
                format!("{} factors for {rows} rows", factors.len()),
            ));
        }
        let src = self.value(x);
        let width = src.numel() / rows;
        let data = src
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * factors[i / width])
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(
            value,
            Op::RowScale {
                x,
                factors: factors.to_vec(),
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(value, Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x))
    }

    /// Applies `map` to every row of `x` (`[n]` or `[B, n]`).
    pub fn linear(&mut self, x: Var, map: Arc<dyn LinearMap>) -> Result<Var> {
        self.linear_impl(x, map, false)
    }

    /// Applies the adjoint of `map` to every row of `r` (`[m]` or `[B, m]`).
    pub fn linear_adjoint(&mut self, r: Var, map: Arc<dyn LinearMap>) -> Result<Var> {
        self.linear_impl(r, map, true)
    }

    fn linear_impl(&mut self, x: Var, map: Arc<dyn LinearMap>, adjoint: bool) -> Result<Var> {
        let (in_len, out_len) = if adjoint {
            (map.output_len(), map.input_len())
        } else {
            (map.input_len(), map.output_len())
        };
        let shape = self.shape(x).to_vec();
        let last = *shape.last().unwrap_or(&0);
        if last != in_len || shape.len() > 2 {
            return Err(Error::shape(
                if adjoint { "linear_adjoint" } else { "linear" },
                format!("input {shape:?}, map expects rows of {in_len}"),
            ));
        }
        let rows = if shape.len() == 2 { shape[0] } else { 1 };
        let mut out = vec![0.0; rows * out_len];
        let src = self.value(x).data();
        if adjoint {
            map.apply_adjoint_rows(src, rows, &mut out);
        } else {
            map.apply_rows(src, rows, &mut out);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_len;
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::Linear { x, map, adjoint })
    }

    /// `A x` for a constant matrix `a` of shape `[m, n]`.
    pub fn matvec(&mut self, a: &Tensor, x: Var) -> Result<Var> {
        let map = dense_map(a)?;
        self.linear(x, map)
    }

    /// `A^T r` for a constant matrix `a` of shape `[m, n]`.
    pub fn matvec_t(&mut self, a: &Tensor, r: Var) -> Result<Var> {
        let map = dense_map(a)?;
        self.linear_adjoint(r, map)
    }

    /// Same-padded 2D cross-correlation.
    ///
    /// `input` is `[B, C_in, H, W]`, `kernel` is `[C_out, C_in, kh, kw]` with odd
    /// `kh`, `kw`; `bias` is `[C_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let geom = conv::Geometry::new(
            self.shape(input),
            self.shape(kernel),
            bias.map(|b| self.shape(b)),
        )?;
        let out = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(geom.output_shape(), out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
        )
    }

    /// Per-channel batch normalization of `[B, C, H, W]`.
    ///
    /// Training mode normalizes with batch statistics and returns them so the
    /// caller can fold them into `running`; inference mode uses `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("batch_norm", format!("expected 4-D input, got {shape:?}")));
        }
        let c = shape[1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} has shape {:?}, expected [{c}]", self.shape(v)),
                ));
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape("batch_norm", "running stats width"));
        }
        let (out, saved, stats) = batchnorm::forward(
            &shape,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            running,
            self.mode,
        )?;
        let value = Tensor::new(shape, out)?;
        let var = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            },
        )?;
        Ok((var, stats))
    }

    /// Unaveraged sum of squared differences, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(s), Op::SumSquaredDiff(a, b))
    }

    /// Accumulates `d loss / d p` into every parameter leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                op: "backward (loss)".into(),
            });
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; end];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();

        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("backward through {}", node.op.name()),
                });
            }
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |d| add_into(d, &g));
                    self.acc(&mut grads, *b, |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |d| add_into(d, &g));
                    self.acc(&mut grads, *b, |d| {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d -= g)
                    });
                }
                Op::Scale(x, c) => {
                    self.acc(&mut grads, *x, |d| {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += c * g)
                    });
                }
                Op::Combine { coefs, terms } => {
                    for (c, t) in coefs.iter().zip(terms) {
                        if let Coef::Param(p, idx) = c {
                            let dw = crate::tensor::dot(&g, self.value(*t).data());
                            self.acc(&mut grads, *p, |d| d[*idx] += dw);
                        }
                        let w = self.coef_value(*c)?;
                        self.acc(&mut grads, *t, |d| {
                            d.iter_mut().zip(&g).for_each(|(d, g)| *d += w * g)
                        });
                    }
                }
                Op::RowScale { x, factors } => {
                    let width = g.len() / factors.len();
                    self.acc(&mut grads, *x, |d| {
                        for (j, (d, g)) in d.iter_mut().zip(&g).enumerate() {
                            *d += factors[j / width] * g;
                        }
                    });
                }
                Op::Relu(x) => {
                    let input = self.value(*x).data();
                    self.acc(&mut grads, *x, |d| {
                        for ((d, g), v) in d.iter_mut().zip(&g).zip(input) {
                            if *v > 0.0 {
                                *d += g;
                            }
                        }
                    });
                }
                Op::Reshape(x) => self.acc(&mut grads, *x, |d| add_into(d, &g)),
                Op::Linear { x, map, adjoint } => {
                    let rows = if self.shape(*x).len() == 2 {
                        self.shape(*x)[0]
                    } else {
                        1
                    };
                    let mut back = vec![0.0; self.value(*x).numel()];
                    if *adjoint {
                        map.apply_rows(&g, rows, &mut back);
                    } else {
                        map.apply_adjoint_rows(&g, rows, &mut back);
                    }
                    self.acc(&mut grads, *x, |d| add_into(d, &back));
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                } => {
                    let geom = conv::Geometry::new(
                        self.shape(*input),
                        self.shape(*kernel),
                        bias.map(|b| self.shape(b)),
                    )?;
                    let back = conv::backward(
                        &geom,
                        self.value(*input).data(),
                        self.value(*kernel).data(),
                        &g,
                        self.requires_grad(*input),
                    );
                    if let Some(d_in) = back.input {
                        self.acc(&mut grads, *input, |d| add_into(d, &d_in));
                    }
                    self.acc(&mut grads, *kernel, |d| add_into(d, &back.kernel));
                    if let Some(b) = bias {
                        self.acc(&mut grads, *b, |d| add_into(d, &back.bias));
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    saved,
                } => {
                    let back = batchnorm::backward(
                        self.shape(*x),
                        self.value(*gamma).data(),
                        saved,
                        &g,
                    );
                    self.acc(&mut grads, *x, |d| add_into(d, &back.x));
                    self.acc(&mut grads, *gamma, |d| add_into(d, &back.gamma));
                    self.acc(&mut grads, *beta, |d| add_into(d, &back.beta));
                }
                Op::SumSquaredDiff(a, b) => {
                    let scale = 2.0 * g[0];
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.acc(&mut grads, *a, |d| {
                        for ((d, x), y) in d.iter_mut().zip(va).zip(vb) {
                            *d += scale * (x - y);
                        }
                    });
                    self.acc(&mut grads, *b, |d| {
                        for ((d, x), y) in d.iter_mut().zip(va).zip(vb) {
                            *d -= scale * (x - y);
                        }
                    });
                }
            }
        }

        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(existing) => add_into(existing.data_mut(), &g),
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }
}

fn dense_map(a: &Tensor) -> Result<Arc<dyn LinearMap>> {
    if a.shape().len() != 2 {
        return Err(Error::shape("matvec", format!("matrix shape {:?}", a.shape())));
    }
    Ok(Arc::new(DenseMatrix {
        rows: a.shape()[0],
        cols: a.shape()[1],
        data: a.data().to_vec(),
    }))
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests;
